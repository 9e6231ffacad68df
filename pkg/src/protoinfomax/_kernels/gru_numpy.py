"""Reference GRU sequence kernel in plain numpy.

Both kernels implement the same contract so the package can swap them at
import time:

``gru_forward`` consumes precomputed input projections ``xz, xr, xh`` of
shape (T, B, H) (token embedding already multiplied by the input weight
matrices, bias included), an initial state ``h0`` (B, H), recurrent
matrices ``uz, ur, uh`` (H, H) and a validity mask (T, B).  Per step:

    z = sigmoid(xz[t] + h @ uz)
    r = sigmoid(xr[t] + h @ ur)
    h~ = tanh(xh[t] + (r * h) @ uh)
    h  = (1 - z) * h + z * h~        where mask[t] == 1
    h  = h                           where mask[t] == 0  (pad passthrough)

``gru_backward`` replays the recurrence in reverse and returns gradients
for every input that carries parameters.  Gate activations are cached by
the forward pass so no nonlinearity has to be recomputed.
"""

import numpy as np


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_forward(xz, xr, xh, h0, uz, ur, uh, mask):
    """Run the recurrence; returns (hs, (z, r, ht)) with hs[t] = state after step t."""
    steps, batch, width = xz.shape
    zs = np.empty((steps, batch, width))
    rs = np.empty((steps, batch, width))
    hts = np.empty((steps, batch, width))
    hs = np.empty((steps, batch, width))
    h = h0
    for t in range(steps):
        z = _sigmoid(xz[t] + h @ uz)
        r = _sigmoid(xr[t] + h @ ur)
        ht = np.tanh(xh[t] + (r * h) @ uh)
        m = mask[t][:, None]
        h = m * ((1.0 - z) * h + z * ht) + (1.0 - m) * h
        zs[t] = z
        rs[t] = r
        hts[t] = ht
        hs[t] = h
    return hs, (zs, rs, hts)


def gru_backward(dh_all, hs, zs, rs, hts, h0, uz, ur, uh, mask):
    """Gradient of the recurrence.

    ``dh_all`` holds the loss gradient w.r.t. every per-step state hs[t].
    Returns (dxz, dxr, dxh, dh0, duz, dur, duh).
    """
    steps, batch, width = dh_all.shape
    dxz = np.empty((steps, batch, width))
    dxr = np.empty((steps, batch, width))
    dxh = np.empty((steps, batch, width))
    duz = np.zeros((width, width))
    dur = np.zeros((width, width))
    duh = np.zeros((width, width))
    dh_next = np.zeros((batch, width))
    for t in range(steps - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else h0
        z, r, ht = zs[t], rs[t], hts[t]
        m = mask[t][:, None]
        g = dh_all[t] + dh_next
        gc = g * m
        dh_prev = g * (1.0 - m)

        dz = gc * (ht - h_prev)
        dht = gc * z
        dh_prev = dh_prev + gc * (1.0 - z)

        da_h = dht * (1.0 - ht * ht)
        dxh[t] = da_h
        rh = r * h_prev
        duh += rh.T @ da_h
        drh = da_h @ uh.T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r

        da_z = dz * z * (1.0 - z)
        dxz[t] = da_z
        duz += h_prev.T @ da_z
        dh_prev = dh_prev + da_z @ uz.T

        da_r = dr * r * (1.0 - r)
        dxr[t] = da_r
        dur += h_prev.T @ da_r
        dh_prev = dh_prev + da_r @ ur.T

        dh_next = dh_prev
    return dxz, dxr, dxh, dh_next, duz, dur, duh

"""Sentence and keyword encoders.

Sentences run through an embedding table, a single bidirectional GRU, and
multi-query scaled-dot attention pooling: each of r trainable context
queries attends over the unmasked steps and the r pooled vectors are
averaged.  Output width is twice the per-direction hidden size.

Keyword sets are encoded as the IDF-weighted mean of their token
embeddings, projected to the sentence width by a trainable linear map
whenever the embedding width differs.

All parameters are float64 tensors tracked by the autodiff tape.  The PAD
embedding row is zero and stays zero: the trainer must skip it when
applying updates (see ``EncoderParams.frozen_rows``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .features import PAD, MAX_SENTENCE_LEN, KeywordSet, Vocabulary


class DimensionMismatchError(ValueError):
    """A pretrained vector line disagrees with the table width."""


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_emb: int = 100
    hidden: int = 100
    attn_queries: int = 5
    max_len: int = MAX_SENTENCE_LEN

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden


@dataclass
class GRUWeights:
    """One direction: input projections, recurrent matrices, gate biases."""

    wz: nm.Tensor
    wr: nm.Tensor
    wh: nm.Tensor
    uz: nm.Tensor
    ur: nm.Tensor
    uh: nm.Tensor
    bz: nm.Tensor
    br: nm.Tensor
    bh: nm.Tensor

    def named(self, prefix: str):
        for name in ("wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class EncoderParams:
    config: EncoderConfig
    embedding: nm.Tensor
    fwd: GRUWeights
    bwd: GRUWeights
    attn_q: nm.Tensor
    kw_proj: nm.Tensor | None

    def parameters(self) -> list[tuple[str, nm.Tensor]]:
        out = [("embedding", self.embedding)]
        out.extend(self.fwd.named("fwd"))
        out.extend(self.bwd.named("bwd"))
        out.append(("attn_q", self.attn_q))
        if self.kw_proj is not None:
            out.append(("kw_proj", self.kw_proj))
        return out

    @property
    def frozen_rows(self) -> dict[str, tuple[int, ...]]:
        """Rows whose gradient must be dropped before any update."""
        return {"embedding": (PAD,)}

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _init_direction(rng: np.random.Generator, d_emb: int, hidden: int) -> GRUWeights:
    def wmat():
        return nm.Tensor(_glorot(rng, d_emb, hidden, (d_emb, hidden)), requires_grad=True)

    def umat():
        return nm.Tensor(_glorot(rng, hidden, hidden, (hidden, hidden)), requires_grad=True)

    def bias():
        return nm.Tensor(np.zeros(hidden), requires_grad=True)

    return GRUWeights(
        wz=wmat(), wr=wmat(), wh=wmat(), uz=umat(), ur=umat(), uh=umat(),
        bz=bias(), br=bias(), bh=bias(),
    )


def init_encoder(config: EncoderConfig, seed: int = 0) -> EncoderParams:
    """Deterministic per seed.  Embeddings and attention queries start in
    U[-0.1, 0.1]; GRU and projection weights use U[-a, a] with
    a = sqrt(6 / (fan_in + fan_out)); biases start at zero."""
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-0.1, 0.1, size=(config.vocab_size, config.d_emb))
    emb[PAD, :] = 0.0
    embedding = nm.Tensor(emb, requires_grad=True)
    fwd = _init_direction(rng, config.d_emb, config.hidden)
    bwd = _init_direction(rng, config.d_emb, config.hidden)
    attn_q = nm.Tensor(
        rng.uniform(-0.1, 0.1, size=(config.attn_queries, config.out_dim)), requires_grad=True
    )
    kw_proj = None
    if config.d_emb != config.out_dim:
        kw_proj = nm.Tensor(
            _glorot(rng, config.d_emb, config.out_dim, (config.d_emb, config.out_dim)),
            requires_grad=True,
        )
    return EncoderParams(
        config=config, embedding=embedding, fwd=fwd, bwd=bwd, attn_q=attn_q, kw_proj=kw_proj
    )


def prepare_batch(token_seqs, max_len: int):
    """Pad to the longest sequence; returns (indices, mask, lengths).

    ``indices`` is time-major, shape (T * B,), laid out so position
    (t, b) sits at t * B + b; ``mask`` is (T, B) with 1 on valid steps.
    """
    if not token_seqs:
        raise ValueError("empty batch")
    seqs = [list(s)[:max_len] for s in token_seqs]
    if any(len(s) == 0 for s in seqs):
        raise ValueError("empty token sequence in batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.intp)
    steps = int(lengths.max())
    batch = len(seqs)
    idx = np.full((steps, batch), PAD, dtype=np.intp)
    for b, s in enumerate(seqs):
        idx[: len(s), b] = s
    mask = (np.arange(steps)[:, None] < lengths[None, :]).astype(np.float64)
    return idx.reshape(-1), mask, lengths


def _input_projections(emb_rows, direction: GRUWeights, steps: int, batch: int):
    n = steps * batch
    out = []
    for w, b in ((direction.wz, direction.bz), (direction.wr, direction.br), (direction.wh, direction.bh)):
        proj = nm.add(nm.matmul(emb_rows, w), nm.expand_rows(b, n))
        out.append(nm.reshape(proj, (steps, batch, w.shape[1])))
    return out


def encode_batch(token_seqs, params: EncoderParams) -> nm.Tensor:
    """Encode a batch of token index sequences into (B, out_dim) vectors.

    A sentence's encoding does not depend on its batch partners: padded
    steps pass the recurrent state through unchanged and attention gives
    them exactly zero weight.  Agreement with the sentence encoded alone
    is within float rounding (BLAS kernel selection varies with shape).
    """
    cfg = params.config
    idx, mask, lengths = prepare_batch(token_seqs, cfg.max_len)
    steps, batch = mask.shape
    hidden = cfg.hidden

    emb_rows = nm.gather_rows(params.embedding, idx)
    h0 = nm.Tensor(np.zeros((batch, hidden)))

    xz, xr, xh = _input_projections(emb_rows, params.fwd, steps, batch)
    h_fwd = nm.gru_sequence(xz, xr, xh, h0, params.fwd.uz, params.fwd.ur, params.fwd.uh, mask)

    xz, xr, xh = _input_projections(emb_rows, params.bwd, steps, batch)
    h_bwd_rev = nm.gru_sequence(
        nm.time_reverse(xz, lengths),
        nm.time_reverse(xr, lengths),
        nm.time_reverse(xh, lengths),
        h0,
        params.bwd.uz,
        params.bwd.ur,
        params.bwd.uh,
        mask,
    )
    h_bwd = nm.time_reverse(h_bwd_rev, lengths)

    states = nm.concat([h_fwd, h_bwd], axis=2)
    flat = nm.reshape(states, (steps * batch, cfg.out_dim))
    scores = nm.reshape(
        nm.matmul(flat, nm.transpose2d(params.attn_q)), (steps, batch, cfg.attn_queries)
    )
    scores = nm.scale(scores, 1.0 / math.sqrt(cfg.out_dim))
    alpha = nm.masked_softmax(scores, mask)
    pooled = nm.weighted_pool(alpha, states)
    return nm.mean_axis(pooled, axis=1)


def encode_sentence(token_ids, params: EncoderParams) -> nm.Tensor:
    """Single-sentence convenience wrapper; returns a (out_dim,) vector."""
    out = encode_batch([token_ids], params)
    return nm.reshape(out, (params.config.out_dim,))


def encode_keywords_batch(keyword_sets, params: EncoderParams) -> nm.Tensor:
    """IDF-weighted mean of keyword embeddings per set, projected to the
    sentence width; shape (B, out_dim)."""
    if not keyword_sets:
        raise ValueError("empty batch")
    sets = [ks.items if isinstance(ks, KeywordSet) else list(ks) for ks in keyword_sets]
    if any(len(s) == 0 for s in sets):
        raise ValueError("empty keyword set in batch")
    batch = len(sets)
    kmax = max(len(s) for s in sets)
    d = params.config.d_emb
    idx = np.full((batch, kmax), PAD, dtype=np.intp)
    w = np.zeros((batch, kmax))
    for b, items in enumerate(sets):
        for j, (token_idx, idf_weight) in enumerate(items):
            idx[b, j] = token_idx
            w[b, j] = idf_weight
    inv_n = 1.0 / np.array([len(s) for s in sets], dtype=np.float64)

    rows = nm.gather_rows(params.embedding, idx.reshape(-1))
    weighted = nm.mul(rows, nm.expand_cols(nm.Tensor(w.reshape(-1)), d))
    summed = nm.sum_axis(nm.reshape(weighted, (batch, kmax, d)), axis=1)
    mean = nm.mul(summed, nm.expand_cols(nm.Tensor(inv_n), d))
    if params.kw_proj is not None:
        return nm.matmul(mean, params.kw_proj)
    return mean


def encode_keywords(keywords: KeywordSet, params: EncoderParams) -> nm.Tensor:
    out = encode_keywords_batch([keywords], params)
    return nm.reshape(out, (params.config.out_dim,))


def load_pretrained_vectors(path, vocab: Vocabulary):
    """Read word vectors (word then space-separated floats per line).

    Returns (table, coverage, n_skipped): a (V, d) array with rows for
    covered words, zeros elsewhere; coverage counts covered non-reserved
    vocabulary entries; unreadable lines are skipped and counted.  The
    PAD row stays zero even when the file provides it.  Lines whose float
    count disagrees with the first valid line raise
    :class:`DimensionMismatchError`.
    """
    dim = None
    table = None
    covered: set[int] = set()
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                skipped += 1
                continue
            word, values = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                skipped += 1
                continue
            if dim is None:
                dim = vec.size
                table = np.zeros((len(vocab), dim))
            elif vec.size != dim:
                raise DimensionMismatchError(
                    f"{path}:{line_no}: {vec.size} components, expected {dim}"
                )
            if word in vocab:
                i = vocab.index(word)
                if i != PAD:
                    table[i] = vec
                    covered.add(i)
    if table is None:
        raise ValueError(f"{path}: no usable vector lines")
    n_real = len(vocab) - 2
    coverage = len(covered - {PAD, 1}) / n_real if n_real else 0.0
    return table, coverage, skipped


def save_vectors(table: np.ndarray, vocab: Vocabulary, path) -> None:
    """Write word + space-separated float components; exact round-trip."""
    if table.shape[0] != len(vocab):
        raise ValueError(f"table rows {table.shape[0]} vs vocab {len(vocab)}")
    with open(path, "w", encoding="utf-8") as fh:
        for i, tok in enumerate(vocab.tokens):
            comps = " ".join(repr(float(v)) for v in table[i])
            fh.write(f"{tok} {comps}\n")

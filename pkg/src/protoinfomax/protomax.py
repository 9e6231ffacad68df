"""Prototypes, similarity scoring, and the episode objectives.

Four trainable objectives share one scoring pipeline:

* ``protonet``: softmax cross-entropy over per-class cosine similarities,
  in-domain queries only.
* ``oproto``: the cross-entropy term plus two hinge terms that push
  in-domain similarity above a margin and out-of-domain similarity below
  its complement.
* ``protoinfomax``: a binary cross-entropy bound on the mutual
  information between prototypes and queries; in-domain queries are
  positives scored against their own class prototype, out-of-domain
  queries are negatives scored against their best-matching prototype.
* ``protoinfomaxpp``: the same bound summed over three views: sentence
  prototypes vs. sentence encodings, keyword prototypes vs. keyword
  encodings, and the elementwise product of the two as a fused view.

Scores are cosine similarities in [-1, 1]; the positive/negative
probability is the affine map (d + 1) / 2, clamped away from {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm

MODEL_TAGS = ("protonet", "oproto", "protoinfomax", "protoinfomaxpp")
PROB_EPS = 1e-6
DEFAULT_MARGIN = 0.5
NORM_FLOOR = 1e-12


class NearZeroNormError(ValueError):
    """Cosine similarity is undefined for a (near-)zero vector."""


@dataclass
class LossValue:
    """Scalar objective with named additive terms; total == sum(terms)."""

    total: nm.Tensor
    terms: dict[str, nm.Tensor] = field(default_factory=dict)

    def item(self) -> float:
        return self.total.item()

    def term_items(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.terms.items()}


def _check_norms(t: nm.Tensor, name: str) -> None:
    norms = np.sqrt((t.data * t.data).sum(axis=-1))
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        raise NearZeroNormError(f"{name}: near-zero vector at row(s) {bad.tolist()[:5]}")


def prototypes(encodings: nm.Tensor, n_classes: int, k_shot: int) -> nm.Tensor:
    """Per-class mean of support encodings.

    ``encodings`` is (N * K, F) in class-major order (class 0 first K
    rows, then class 1, ...); returns (N, F).
    """
    n, f = encodings.shape
    if n != n_classes * k_shot:
        raise nm.ShapeError(f"prototypes: {n} rows != {n_classes} classes * {k_shot} shots")
    return nm.mean_axis(nm.reshape(encodings, (n_classes, k_shot, f)), axis=1)


def _normalize_rows(t: nm.Tensor, name: str) -> nm.Tensor:
    _check_norms(t, name)
    norms = nm.sqrt(nm.sum_axis(nm.mul(t, t), axis=1))
    return nm.div(t, nm.expand_cols(norms, t.shape[1]))


def cosine_matrix(queries: nm.Tensor, protos: nm.Tensor, q_name: str = "queries", p_name: str = "prototypes") -> nm.Tensor:
    """(B, F) x (N, F) -> (B, N) pairwise cosine similarities."""
    qn = _normalize_rows(queries, q_name)
    pn = _normalize_rows(protos, p_name)
    return nm.matmul(qn, nm.transpose2d(pn))


def cosine_similarity(a: nm.Tensor, b: nm.Tensor) -> nm.Tensor:
    """Cosine of two vectors as a scalar tensor."""
    for v, name in ((a, "left"), (b, "right")):
        if float(np.sqrt((v.data * v.data).sum())) < NORM_FLOOR:
            raise NearZeroNormError(f"{name}: near-zero vector")
    dot = nm.sum_axis(nm.mul(a, b))
    na = nm.sqrt(nm.sum_axis(nm.mul(a, a)))
    nb = nm.sqrt(nm.sum_axis(nm.mul(b, b)))
    return nm.div(dot, nm.mul(na, nb))


def similarity_to_probability(d: nm.Tensor) -> nm.Tensor:
    """Affine map from [-1, 1] to (0, 1), clamped to [eps, 1 - eps]."""
    return nm.clamp(nm.scale(nm.shift(d, 1.0), 0.5), PROB_EPS, 1.0 - PROB_EPS)


def class_mask(similarities: nm.Tensor, labels) -> nm.Tensor:
    """Reduce a (B, N) similarity matrix to one score per query.

    ``labels[i]`` is the true class index for in-domain queries or -1 for
    out-of-domain ones, which take the maximum over classes instead.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (similarities.shape[0],):
        raise nm.ShapeError(f"class_mask: labels {labels.shape} for {similarities.shape}")
    is_id = labels >= 0
    if is_id.all():
        return nm.select_columns(similarities, labels)
    maxed = nm.max_axis(similarities, axis=1)
    if not is_id.any():
        return maxed
    selected = nm.select_columns(similarities, np.where(is_id, labels, 0))
    id_f = is_id.astype(np.float64)
    return nm.add(nm.mul(selected, nm.Tensor(id_f)), nm.mul(maxed, nm.Tensor(1.0 - id_f)))


def infomax_bce(p_id: nm.Tensor, p_ood: nm.Tensor, prefix: str = "") -> LossValue:
    """Negative binary cross-entropy bound: -(mean log p_id + mean log(1 - p_ood)).

    Both terms are reported separately; each is nonnegative because the
    probabilities live strictly inside (0, 1).
    """
    id_term = nm.scale(nm.mean_axis(nm.log(p_id)), -1.0)
    ood_term = nm.scale(nm.mean_axis(nm.log(nm.scale(nm.shift(p_ood, -1.0), -1.0))), -1.0)
    total = nm.add(id_term, ood_term)
    return LossValue(total=total, terms={f"{prefix}id": id_term, f"{prefix}ood": ood_term})


@dataclass
class EpisodeEncodings:
    """Encoded episode ready for an objective.

    Sentence encodings are mandatory; keyword encodings are needed only
    by the fused-view objective.  Support rows are class-major.
    """

    n_classes: int
    k_shot: int
    support: nm.Tensor
    id_queries: nm.Tensor
    ood_queries: nm.Tensor
    id_labels: np.ndarray
    support_kw: nm.Tensor | None = None
    id_queries_kw: nm.Tensor | None = None
    ood_queries_kw: nm.Tensor | None = None


def _bce_view(
    protos: nm.Tensor,
    id_enc: nm.Tensor,
    ood_enc: nm.Tensor,
    id_labels: np.ndarray,
    prefix: str,
    view_name: str,
) -> LossValue:
    sim_id = cosine_matrix(id_enc, protos, f"{view_name} id queries", f"{view_name} prototypes")
    sim_ood = cosine_matrix(ood_enc, protos, f"{view_name} ood queries", f"{view_name} prototypes")
    p_id = similarity_to_probability(class_mask(sim_id, id_labels))
    p_ood = similarity_to_probability(nm.max_axis(sim_ood, axis=1))
    return infomax_bce(p_id, p_ood, prefix=prefix)


def loss_protoinfomax(batch: EpisodeEncodings) -> LossValue:
    """Mutual-information bound on the sentence view alone."""
    protos = prototypes(batch.support, batch.n_classes, batch.k_shot)
    return _bce_view(protos, batch.id_queries, batch.ood_queries, batch.id_labels, "", "sentence")


def loss_protoinfomaxpp(batch: EpisodeEncodings) -> LossValue:
    """Mutual-information bound summed over sentence, keyword, and fused views.

    The fused view multiplies keyword encodings elementwise with the
    corresponding sentence encodings on both the prototype and query
    sides, tying the two representations together.
    """
    if batch.support_kw is None or batch.id_queries_kw is None or batch.ood_queries_kw is None:
        raise ValueError("fused-view objective needs keyword encodings for support and queries")
    proto_sent = prototypes(batch.support, batch.n_classes, batch.k_shot)
    proto_kw = prototypes(batch.support_kw, batch.n_classes, batch.k_shot)
    sent = _bce_view(
        proto_sent, batch.id_queries, batch.ood_queries, batch.id_labels, "sent_", "sentence"
    )
    kw = _bce_view(
        proto_kw, batch.id_queries_kw, batch.ood_queries_kw, batch.id_labels, "kw_", "keyword"
    )
    fused = _bce_view(
        nm.mul(proto_kw, proto_sent),
        nm.mul(batch.id_queries_kw, batch.id_queries),
        nm.mul(batch.ood_queries_kw, batch.ood_queries),
        batch.id_labels,
        "fused_",
        "fused",
    )
    total = nm.add(nm.add(sent.total, kw.total), fused.total)
    terms = {**sent.terms, **kw.terms, **fused.terms}
    return LossValue(total=total, terms=terms)


def loss_protonet(sim_id: nm.Tensor, labels) -> LossValue:
    """Softmax cross-entropy over class similarities for in-domain queries."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (sim_id.shape[0],):
        raise nm.ShapeError(f"loss_protonet: labels {labels.shape} for {sim_id.shape}")
    m = nm.Tensor(sim_id.data.max(axis=1, keepdims=False))
    shifted = nm.sub(sim_id, nm.expand_cols(m, sim_id.shape[1]))
    logz = nm.log(nm.sum_axis(nm.exp(shifted), axis=1))
    ce = nm.mean_axis(nm.sub(logz, nm.select_columns(shifted, labels)))
    return LossValue(total=ce, terms={"ce": ce})


def loss_oproto(
    sim_id: nm.Tensor, sim_ood: nm.Tensor, labels, margin: float = DEFAULT_MARGIN
) -> LossValue:
    """Cross-entropy plus hinge terms keeping true-class similarity above
    ``margin`` and best out-of-domain similarity below ``1 - margin``."""
    ce = loss_protonet(sim_id, labels)
    labels = np.asarray(labels, dtype=np.intp)
    d_true = nm.select_columns(sim_id, labels)
    hinge_id = nm.mean_axis(nm.clamp(nm.scale(nm.shift(d_true, -margin), -1.0), 0.0, None))
    d_ood = nm.max_axis(sim_ood, axis=1)
    hinge_ood = nm.mean_axis(nm.clamp(nm.shift(d_ood, -(1.0 - margin)), 0.0, None))
    total = nm.add(nm.add(ce.total, hinge_id), hinge_ood)
    return LossValue(
        total=total, terms={"ce": ce.terms["ce"], "hinge_id": hinge_id, "hinge_ood": hinge_ood}
    )


def episode_loss(model: str, batch: EpisodeEncodings, margin: float = DEFAULT_MARGIN) -> LossValue:
    """Dispatch an encoded episode to the objective named by ``model``."""
    if model == "protoinfomax":
        return loss_protoinfomax(batch)
    if model == "protoinfomaxpp":
        return loss_protoinfomaxpp(batch)
    protos = prototypes(batch.support, batch.n_classes, batch.k_shot)
    sim_id = cosine_matrix(batch.id_queries, protos, "id queries", "prototypes")
    if model == "protonet":
        return loss_protonet(sim_id, batch.id_labels)
    if model == "oproto":
        sim_ood = cosine_matrix(batch.ood_queries, protos, "ood queries", "prototypes")
        return loss_oproto(sim_id, sim_ood, batch.id_labels, margin=margin)
    raise ValueError(f"unknown model {model!r}; expected one of {MODEL_TAGS}")

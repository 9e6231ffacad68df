"""Thresholded evaluation: acceptance threshold search, detection and
classification error rates, and confidence calibration.

Every meta-test query gets one record holding its best-class cosine score
``d``.  A query is accepted as in-domain when d >= tau.  The threshold is
swept over candidate values between consecutive sorted scores: starting
from the mean of the two lowest scores, the first candidate where the
false-rejection rate reaches the false-acceptance rate is kept, falling
back to the |FRR - FAR| minimizer (lower tau on ties).

Counts at a threshold:
    TP  in-domain accepted          FP  in-domain rejected
    TN  out-of-domain rejected      FN  out-of-domain accepted
    TP_id  in-domain accepted and classified correctly

Rates: FRR = FP / #ID, FAR = FN / #OOD, EER = 1 - (TP + TN) / n,
CER_id = 1 - TP_id / #ID, CER_all = 1 - TP_id / n.

Calibration maps scores to confidences (d + 1) / 2, bins them uniformly
on [0, 1], and reports the expected calibration error as a percentage.
In-domain calibration judges class predictions; the out-of-domain
histogram judges rejection (correct when d < tau).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

OOD_CLASS = "ood"
N_BINS = 10


@dataclass(frozen=True)
class PredictionRecord:
    """One scored meta-test query."""

    query_id: str
    score: float
    predicted_class: int
    true_class: int  # -1 marks ground-truth out-of-domain
    is_ood: bool
    domain: str = ""

    @property
    def confidence(self) -> float:
        return (self.score + 1.0) / 2.0


@dataclass
class ThresholdResult:
    tau: float
    frr: float
    far: float
    crossed: bool
    trace: list[tuple[float, float, float]] = field(default_factory=list)


@dataclass
class MetricsReport:
    tau: float
    n: int
    n_id: int
    n_ood: int
    tp: int
    tn: int
    fp: int
    fn: int
    tp_id: int
    frr: float
    far: float
    eer: float
    cer_id: float
    cer_all: float
    per_domain: dict[str, dict[str, float]] = field(default_factory=dict)


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    accuracy: float
    confidence: float

    @property
    def gap(self) -> float:
        return abs(self.accuracy - self.confidence)


@dataclass
class CalibrationReport:
    kind: str  # "id" or "ood"
    n: int
    bins: list[CalibrationBin]
    ece: float  # percentage
    avg_confidence: float
    accuracy: float


def _split_scores(records):
    id_scores = np.array([r.score for r in records if not r.is_ood])
    ood_scores = np.array([r.score for r in records if r.is_ood])
    return id_scores, ood_scores


def _rates(id_scores, ood_scores, tau: float):
    frr = float((id_scores < tau).sum()) / id_scores.size
    far = float((ood_scores >= tau).sum()) / ood_scores.size
    return frr, far


def threshold_candidates(scores) -> np.ndarray:
    """Mean of the two lowest scores, then midpoints of consecutive sorted
    scores, deduplicated and ascending."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size < 2:
        raise ValueError("need at least 2 scores to place a threshold")
    mids = (s[:-1] + s[1:]) / 2.0
    return np.unique(np.concatenate([[(s[0] + s[1]) / 2.0], mids]))


def select_threshold(records) -> ThresholdResult:
    """Sweep candidates ascending; keep the first with FRR - FAR >= 0,
    else the |FRR - FAR| minimizer (ties favor the lower candidate)."""
    id_scores, ood_scores = _split_scores(records)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValueError("need both in-domain and out-of-domain records")
    candidates = threshold_candidates([r.score for r in records])
    trace = []
    chosen = None
    for c in candidates:
        frr, far = _rates(id_scores, ood_scores, c)
        trace.append((float(c), frr, far))
        if chosen is None and frr - far >= 0.0:
            chosen = (float(c), frr, far)
    if chosen is not None:
        tau, frr, far = chosen
        return ThresholdResult(tau=tau, frr=frr, far=far, crossed=True, trace=trace)
    best = min(trace, key=lambda row: (abs(row[1] - row[2]), row[0]))
    return ThresholdResult(tau=best[0], frr=best[1], far=best[2], crossed=False, trace=trace)


def compute_metrics(records, tau: float) -> MetricsReport:
    """Confusion counts and error rates at a fixed threshold, with a
    per-domain breakdown at the same (global) threshold."""
    if not records:
        raise ValueError("no records")

    def _counts(rs):
        tp = fp = tn = fn = tp_id = 0
        for r in rs:
            if r.is_ood:
                if r.score >= tau:
                    fn += 1
                else:
                    tn += 1
            else:
                if r.score >= tau:
                    tp += 1
                    if r.predicted_class == r.true_class:
                        tp_id += 1
                else:
                    fp += 1
        return tp, tn, fp, fn, tp_id

    tp, tn, fp, fn, tp_id = _counts(records)
    n_id, n_ood = tp + fp, tn + fn
    if n_id == 0 or n_ood == 0:
        raise ValueError("need both in-domain and out-of-domain records")
    n = n_id + n_ood
    per_domain = {}
    for domain in sorted({r.domain for r in records}):
        rs = [r for r in records if r.domain == domain]
        dtp, dtn, dfp, dfn, dtp_id = _counts(rs)
        dn_id, dn_ood = dtp + dfp, dtn + dfn
        dn = len(rs)
        per_domain[domain] = {
            "n": dn,
            "eer": 1.0 - (dtp + dtn) / dn,
            "cer_id": 1.0 - dtp_id / dn_id if dn_id else float("nan"),
            "cer_all": 1.0 - dtp_id / dn,
        }
    return MetricsReport(
        tau=tau,
        n=n,
        n_id=n_id,
        n_ood=n_ood,
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
        tp_id=tp_id,
        frr=fp / n_id,
        far=fn / n_ood,
        eer=1.0 - (tp + tn) / n,
        cer_id=1.0 - tp_id / n_id,
        cer_all=1.0 - tp_id / n,
        per_domain=per_domain,
    )


def bin_edges(n_bins: int = N_BINS) -> np.ndarray:
    return np.arange(n_bins + 1) / n_bins


def bin_of(confidence: float, edges: np.ndarray) -> int:
    """Half-open bins [lo, hi), last bin closed above."""
    b = int(np.searchsorted(edges, confidence, side="right")) - 1
    return min(max(b, 0), len(edges) - 2)


def calibration(records, kind: str = "id", tau: float | None = None, n_bins: int = N_BINS) -> CalibrationReport:
    """Reliability bins and expected calibration error (as a percentage).

    ``kind='id'`` scores class predictions on in-domain records;
    ``kind='ood'`` scores rejection (d < tau) on out-of-domain records and
    therefore needs ``tau``.
    """
    if kind == "id":
        subset = [r for r in records if not r.is_ood]
        correct = [float(r.predicted_class == r.true_class) for r in subset]
    elif kind == "ood":
        if tau is None:
            raise ValueError("out-of-domain calibration needs tau")
        subset = [r for r in records if r.is_ood]
        correct = [float(r.score < tau) for r in subset]
    else:
        raise ValueError(f"kind must be 'id' or 'ood', got {kind!r}")
    if not subset:
        raise ValueError(f"no records for kind={kind!r}")
    edges = bin_edges(n_bins)
    conf_sum = np.zeros(n_bins)
    acc_sum = np.zeros(n_bins)
    count = np.zeros(n_bins, dtype=np.intp)
    for r, c in zip(subset, correct):
        b = bin_of(r.confidence, edges)
        conf_sum[b] += r.confidence
        acc_sum[b] += c
        count[b] += 1
    n = len(subset)
    bins = []
    ece = 0.0
    for m in range(n_bins):
        if count[m] == 0:
            bins.append(
                CalibrationBin(lo=float(edges[m]), hi=float(edges[m + 1]), count=0, accuracy=0.0, confidence=0.0)
            )
            continue
        acc = acc_sum[m] / count[m]
        conf = conf_sum[m] / count[m]
        bins.append(
            CalibrationBin(
                lo=float(edges[m]), hi=float(edges[m + 1]), count=int(count[m]), accuracy=float(acc), confidence=float(conf)
            )
        )
        ece += (count[m] / n) * abs(acc - conf) * 100.0
    return CalibrationReport(
        kind=kind,
        n=n,
        bins=bins,
        ece=float(ece),
        avg_confidence=float(sum(r.confidence for r in subset) / n),
        accuracy=float(sum(correct) / n),
    )


def score_meta_test(params, model_assets, corpus, spec, seed: int = 0) -> list[PredictionRecord]:
    """Run the full scoring pass over one meta-test stream.

    ``model_assets`` bundles the vocabulary and IDF table used at training
    time (see :mod:`protoinfomax.training`).  Records carry the episode
    domain, the best-class score, and the argmax class.
    """
    # local import: training pulls evaluation for the validation loop
    from . import protomax as pm
    from .corpus import sample_meta_test_stream
    from .encoder import encode_batch
    from .features import tokenize

    vocab = model_assets.vocab
    records: list[PredictionRecord] = []
    for episode in sample_meta_test_stream(corpus, spec, seed):
        toks = lambda sents: [tokenize(s.text, vocab, params.config.max_len) for s in sents]
        flat_support = [s for cls in episode.support for s in cls]
        sup_enc = encode_batch(toks(flat_support), params)
        protos = pm.prototypes(sup_enc, len(episode.class_labels), spec.k_shot)
        queries = [s for s, _ in episode.id_queries] + list(episode.ood_queries)
        truths = [ci for _, ci in episode.id_queries] + [-1] * len(episode.ood_queries)
        sim = pm.cosine_matrix(encode_batch(toks(queries), params), protos)
        best = sim.data.max(axis=1)
        pred = sim.data.argmax(axis=1)
        for sent, truth, d, p in zip(queries, truths, best, pred):
            records.append(
                PredictionRecord(
                    query_id=sent.id,
                    score=float(d),
                    predicted_class=int(p),
                    true_class=int(truth),
                    is_ood=truth < 0,
                    domain=episode.domain,
                )
            )
    return records


# ------------------------------------------------------------- serialization

def save_predictions(records, path) -> None:
    """CSV columns: query_id,score,predicted_class,true_class,is_ood."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "score", "predicted_class", "true_class", "is_ood"])
        for r in records:
            true = OOD_CLASS if r.is_ood else str(r.true_class)
            writer.writerow([r.query_id, repr(r.score), str(r.predicted_class), true, str(r.is_ood).lower()])


def save_metrics(report: MetricsReport, path, ece: float | None = None) -> None:
    """Write the headline numbers plus raw counts as sorted, indented JSON.

    ``ece`` is the in-domain expected calibration error when the caller has
    one; it is stored under the same key either way so readers need no
    special case (null when absent).
    """
    payload = {
        "eer": report.eer,
        "cer_id": report.cer_id,
        "cer_all": report.cer_all,
        "tau": report.tau,
        "ece": ece,
        "frr": report.frr,
        "far": report.far,
        "counts": {
            "n": report.n, "n_id": report.n_id, "n_ood": report.n_ood,
            "tp": report.tp, "tn": report.tn, "fp": report.fp, "fn": report.fn,
            "tp_id": report.tp_id,
        },
        "per_domain": report.per_domain,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_calibration_bins(report: CalibrationReport, path) -> None:
    """CSV columns: bin_lo,bin_hi,count,accuracy,confidence,gap."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "accuracy", "confidence", "gap"])
        for b in report.bins:
            writer.writerow([repr(b.lo), repr(b.hi), str(b.count), repr(b.accuracy), repr(b.confidence), repr(b.gap)])


def save_calibration_summary(report: CalibrationReport, path) -> None:
    payload = {
        "kind": report.kind,
        "n": report.n,
        "ece": report.ece,
        "avg_confidence": report.avg_confidence,
        "accuracy": report.accuracy,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

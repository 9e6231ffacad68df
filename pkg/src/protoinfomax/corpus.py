"""Labeled sentence corpora and episodic sampling.

A corpus is a JSONL file, one object per line with string fields
``id``, ``text``, ``label``, ``domain``, tagged with the split it serves
(meta-train / meta-val / meta-test).  Episodes are N-way K-shot tasks
drawn from one domain, with out-of-domain queries pooled from every other
domain; meta-test streams one episode per domain.

The label value ``"ood"`` is reserved: it marks ground-truth
out-of-domain material and may not occur in meta-train files.  Sentences
carrying it never form classes and are only eligible as OOD queries for
episodes of other domains.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SPLITS = ("meta-train", "meta-val", "meta-test")
OOD_LABEL = "ood"
_FIELDS = ("id", "text", "label", "domain")


class CorpusFormatError(ValueError):
    """Malformed corpus file or invariant violation."""


class EpisodeSamplingError(ValueError):
    """No domain can satisfy the requested episode shape."""


@dataclass(frozen=True)
class Sentence:
    id: str
    text: str
    label: str
    domain: str


@dataclass
class Corpus:
    """Validated sentence collection for one split."""

    sentences: tuple[Sentence, ...]
    split: str
    by_domain: dict[str, dict[str, list[Sentence]]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise CorpusFormatError(f"unknown split {self.split!r}, expected one of {SPLITS}")
        seen_ids: set[str] = set()
        index: dict[str, dict[str, list[Sentence]]] = {}
        for sent in self.sentences:
            if not sent.text.strip():
                raise CorpusFormatError(f"sentence {sent.id!r} has blank text")
            if not sent.label or not sent.domain:
                raise CorpusFormatError(f"sentence {sent.id!r} has empty label or domain")
            if sent.id in seen_ids:
                raise CorpusFormatError(f"duplicate sentence id {sent.id!r}")
            seen_ids.add(sent.id)
            if sent.label == OOD_LABEL:
                if self.split == "meta-train":
                    raise CorpusFormatError(
                        f"sentence {sent.id!r}: label {OOD_LABEL!r} is reserved for "
                        "evaluation ground truth and may not appear in meta-train files"
                    )
                continue
            index.setdefault(sent.domain, {}).setdefault(sent.label, []).append(sent)
        # domain-size adequacy is a sampling-time concern: an undersized
        # domain is simply never eligible to host an episode
        self.by_domain = index

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def domains(self) -> list[str]:
        return sorted({s.domain for s in self.sentences})

    def class_sizes(self, domain: str) -> dict[str, int]:
        return {label: len(sents) for label, sents in self.by_domain.get(domain, {}).items()}


def load_corpus(path, split: str) -> Corpus:
    """Parse JSONL; errors carry 1-based line numbers."""
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{line_no}: invalid JSON ({exc})") from None
            if not isinstance(obj, dict):
                raise CorpusFormatError(f"{path}:{line_no}: expected an object")
            values = []
            for key in _FIELDS:
                if key not in obj:
                    raise CorpusFormatError(f"{path}:{line_no}: missing field {key!r}")
                if not isinstance(obj[key], str):
                    raise CorpusFormatError(f"{path}:{line_no}: field {key!r} must be a string")
                values.append(obj[key])
            sent = Sentence(*values)
            if not sent.text.strip():
                raise CorpusFormatError(f"{path}:{line_no}: blank text")
            if not sent.label or not sent.domain:
                raise CorpusFormatError(f"{path}:{line_no}: empty label or domain")
            sentences.append(sent)
    if not sentences:
        raise CorpusFormatError(f"{path}: corpus is empty")
    try:
        return Corpus(sentences=tuple(sentences), split=split)
    except CorpusFormatError as exc:
        raise CorpusFormatError(f"{path}: {exc}") from None


def save_corpus(corpus: Corpus, path) -> None:
    """Canonical JSONL: fixed key order, compact separators."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus.sentences:
            fh.write(
                json.dumps(
                    {"id": s.id, "text": s.text, "label": s.label, "domain": s.domain},
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )


def check_domain_disjoint(train: Corpus, other: Corpus) -> None:
    """Meta-train domains must not leak into meta-val/meta-test."""
    shared = set(train.domains) & set(other.domains)
    if shared:
        raise CorpusFormatError(
            f"domains shared between {train.split} and {other.split}: {sorted(shared)}"
        )


@dataclass(frozen=True)
class EpisodeSpec:
    """Shape of one episode: N-way, K-shot, and query counts."""

    n_classes: int = 2
    k_shot: int = 10
    n_id_queries: int = 50
    n_ood_queries: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "k_shot", "n_id_queries", "n_ood_queries"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def id_query_quota(self) -> int:
        """Per-class ID query demand used for eligibility."""
        return math.ceil(self.n_id_queries / self.n_classes)


@dataclass
class Episode:
    """One sampled task: per-class support, labeled ID queries, OOD queries."""

    domain: str
    class_labels: tuple[str, ...]
    support: tuple[tuple[Sentence, ...], ...]
    id_queries: tuple[tuple[Sentence, int], ...]
    ood_queries: tuple[Sentence, ...]


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _eligible_classes(corpus: Corpus, domain: str, spec: EpisodeSpec) -> list[str]:
    need = spec.k_shot + spec.id_query_quota()
    return sorted(
        label for label, sents in corpus.by_domain.get(domain, {}).items() if len(sents) >= need
    )


def _sample_for_domain(corpus: Corpus, spec: EpisodeSpec, domain: str, rng: np.random.Generator) -> Episode:
    labels = _eligible_classes(corpus, domain, spec)
    if len(labels) < spec.n_classes:
        raise EpisodeSamplingError(
            f"domain {domain!r} has {len(labels)} classes with >= "
            f"{spec.k_shot + spec.id_query_quota()} sentences; need {spec.n_classes}"
        )
    if len(labels) > spec.n_classes:
        chosen = sorted(rng.choice(len(labels), size=spec.n_classes, replace=False))
        labels = [labels[i] for i in chosen]
    base, rem = divmod(spec.n_id_queries, spec.n_classes)
    support: list[tuple[Sentence, ...]] = []
    id_queries: list[tuple[Sentence, int]] = []
    for ci, label in enumerate(labels):
        quota = base + (1 if ci < rem else 0)
        pool = sorted(corpus.by_domain[domain][label], key=lambda s: s.id)
        take = rng.choice(len(pool), size=spec.k_shot + quota, replace=False)
        support.append(tuple(pool[i] for i in take[: spec.k_shot]))
        id_queries.extend((pool[i], ci) for i in take[spec.k_shot :])
    ood_pool = sorted(
        (s for s in corpus.sentences if s.domain != domain), key=lambda s: s.id
    )
    if len(ood_pool) < spec.n_ood_queries:
        raise EpisodeSamplingError(
            f"only {len(ood_pool)} out-of-domain sentences available, "
            f"need {spec.n_ood_queries}"
        )
    take = rng.choice(len(ood_pool), size=spec.n_ood_queries, replace=False)
    ood_queries = tuple(ood_pool[i] for i in take)
    return Episode(
        domain=domain,
        class_labels=tuple(labels),
        support=tuple(support),
        id_queries=tuple(id_queries),
        ood_queries=ood_queries,
    )


def sample_episode(corpus: Corpus, spec: EpisodeSpec, rng) -> Episode:
    """Draw one episode: uniform among eligible domains, uniform classes,
    sentences without replacement, OOD queries pooled over other domains."""
    rng = _as_rng(rng)
    if len(corpus.domains) < 2:
        raise EpisodeSamplingError("need at least 2 domains to form OOD queries")
    eligible = [
        d for d in corpus.domains if len(_eligible_classes(corpus, d, spec)) >= spec.n_classes
    ]
    if not eligible:
        sizes = {
            d: sorted(corpus.class_sizes(d).values(), reverse=True)[:3] for d in corpus.domains
        }
        raise EpisodeSamplingError(
            f"no domain has {spec.n_classes} classes with >= "
            f"{spec.k_shot + spec.id_query_quota()} sentences; largest class sizes: {sizes}"
        )
    domain = eligible[int(rng.integers(len(eligible)))]
    return _sample_for_domain(corpus, spec, domain, rng)


def sample_meta_test_stream(corpus: Corpus, spec: EpisodeSpec, seed: int) -> list[Episode]:
    """One episode per domain, in sorted domain order, each with its own
    seed-derived generator so the stream is reproducible as a whole."""
    if len(corpus.domains) < 2:
        raise EpisodeSamplingError("need at least 2 domains to form OOD queries")
    episodes = []
    for i, domain in enumerate(sorted(corpus.by_domain)):
        rng = np.random.default_rng([seed, i])
        episodes.append(_sample_for_domain(corpus, spec, domain, rng))
    return episodes

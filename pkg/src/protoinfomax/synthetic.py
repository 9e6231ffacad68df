"""Synthetic corpora with controllable domain structure.

Each domain owns a keyword cluster of ``cluster_size`` tokens.  With
overlap f > 0, every cluster is sampled without replacement from one
shared keyword pool sized c (1 + f) / (2 f), which makes the expected
pairwise Jaccard between clusters ~= f: two clusters then share
s = c^2/|pool| tokens out of 2c - s.  Because the pool is shared, unseen
domains are new combinations of known tokens -- the stand-in for real
corpora whose domains share one pretrained embedding space.  Overlap 0
instead gives every domain its own fresh tokens, so clusters are fully
disjoint.

Inside a domain the cluster is partitioned into a domain-common slice
and per-class slices, so classes are separable within a domain while the
domain as a whole remains distinguishable from others.  Sentences mix
class tokens, domain-common tokens, and a global filler vocabulary that
plays the role of stopwords.

Meta-train, meta-val, and meta-test splits use disjoint domain names.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Sentence


@dataclass(frozen=True)
class SyntheticSpec:
    n_train_domains: int = 6
    n_val_domains: int = 2
    n_test_domains: int = 3
    classes_per_domain: int = 2
    sentences_per_class: int = 200
    vocab_size: int = 150  # filler pool; cluster tokens are added on top
    cluster_size: int = 24
    overlap: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.overlap <= 1.0):
            raise ValueError("overlap must be in [0, 1]")
        for name in (
            "n_train_domains", "n_val_domains", "n_test_domains",
            "classes_per_domain", "sentences_per_class", "vocab_size", "cluster_size",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cluster_size < 3 * self.classes_per_domain:
            raise ValueError("cluster_size must be at least 3 * classes_per_domain")
        if self.n_train_domains < 2 or self.n_test_domains < 2:
            raise ValueError("meta-train and meta-test need at least 2 domains each")


@dataclass
class SyntheticData:
    train: Corpus
    val: Corpus
    test: Corpus
    clusters: dict[str, set[str]]


def _pool_size(cluster_size: int, overlap: float) -> int:
    return max(cluster_size, int(round(cluster_size * (1.0 + overlap) / (2.0 * overlap))))


def generate(spec: SyntheticSpec) -> SyntheticData:
    """Deterministic per seed; corpora plus the cluster map for inspection."""
    rng = np.random.default_rng(spec.seed)
    filler = [f"f{i:04d}" for i in range(spec.vocab_size)]
    pool = (
        [f"k{i:04d}" for i in range(_pool_size(spec.cluster_size, spec.overlap))]
        if spec.overlap > 0.0
        else None
    )

    splits = (
        ("meta-train", "trn", spec.n_train_domains),
        ("meta-val", "val", spec.n_val_domains),
        ("meta-test", "tst", spec.n_test_domains),
    )
    clusters: dict[str, set[str]] = {}
    corpora: dict[str, Corpus] = {}
    fresh_serial = 0
    for split, prefix, n_domains in splits:
        sentences: list[Sentence] = []
        for d in range(n_domains):
            domain = f"{prefix}{d:02d}"
            if pool is None:
                cluster = [f"x{fresh_serial + i:05d}" for i in range(spec.cluster_size)]
                fresh_serial += len(cluster)
                order = rng.permutation(len(cluster))
                cluster = [cluster[i] for i in order]
            else:
                picks = rng.choice(len(pool), size=spec.cluster_size, replace=False)
                cluster = [pool[i] for i in picks]
            clusters[domain] = set(cluster)
            n_common = spec.cluster_size // 3
            per_class = (spec.cluster_size - n_common) // spec.classes_per_domain
            common = cluster[:n_common]
            class_slices = [
                cluster[n_common + k * per_class : n_common + (k + 1) * per_class]
                for k in range(spec.classes_per_domain)
            ]
            for k in range(spec.classes_per_domain):
                label = f"c{k}"
                slice_k = class_slices[k]
                for i in range(spec.sentences_per_class):
                    length = int(rng.integers(8, 15))
                    words = []
                    for _ in range(length):
                        u = rng.random()
                        if u < 0.5:
                            words.append(slice_k[int(rng.integers(len(slice_k)))])
                        elif u < 0.75:
                            words.append(common[int(rng.integers(len(common)))])
                        else:
                            words.append(filler[int(rng.integers(len(filler)))])
                    sentences.append(
                        Sentence(
                            id=f"{domain}-{label}-{i:05d}",
                            text=" ".join(words),
                            label=label,
                            domain=domain,
                        )
                    )
        corpora[split] = Corpus(sentences=tuple(sentences), split=split)
    return SyntheticData(
        train=corpora["meta-train"],
        val=corpora["meta-val"],
        test=corpora["meta-test"],
        clusters=clusters,
    )


def cluster_jaccard(clusters: dict[str, set[str]]) -> float:
    """Mean pairwise Jaccard similarity between domain keyword clusters."""
    names = sorted(clusters)
    if len(names) < 2:
        return 0.0
    vals = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = clusters[names[i]], clusters[names[j]]
            vals.append(len(a & b) / len(a | b))
    return float(np.mean(vals))

"""Synthetic corpus generator: domain structure, overlap control, and
determinism."""

import numpy as np
import pytest

import protoinfomax.synthetic as syn
from protoinfomax.corpus import check_domain_disjoint


def small_spec(**overrides):
    base = dict(n_train_domains=3, n_val_domains=1, n_test_domains=2,
                classes_per_domain=2, sentences_per_class=5, vocab_size=30,
                cluster_size=12, overlap=0.2, seed=0)
    base.update(overrides)
    return syn.SyntheticSpec(**base)


class TestSpecValidation:
    def test_overlap_bounds(self):
        with pytest.raises(ValueError):
            small_spec(overlap=-0.1)
        with pytest.raises(ValueError):
            small_spec(overlap=1.5)
        small_spec(overlap=0.0)
        small_spec(overlap=1.0)

    def test_counts_must_be_positive(self):
        for name in ("n_train_domains", "n_val_domains", "n_test_domains",
                     "classes_per_domain", "sentences_per_class", "vocab_size",
                     "cluster_size"):
            with pytest.raises(ValueError):
                small_spec(**{name: 0})

    def test_cluster_must_cover_classes(self):
        # each class needs a non-empty slice after the domain-common cut
        with pytest.raises(ValueError):
            small_spec(classes_per_domain=5, cluster_size=12)

    def test_minimum_domain_counts(self):
        with pytest.raises(ValueError):
            small_spec(n_train_domains=1)
        with pytest.raises(ValueError):
            small_spec(n_test_domains=1)
        small_spec(n_val_domains=1)  # validation may be a single domain


class TestGenerate:
    def test_split_and_domain_layout(self):
        spec = small_spec()
        data = syn.generate(spec)
        assert data.train.split == "meta-train"
        assert data.val.split == "meta-val"
        assert data.test.split == "meta-test"
        assert len(data.train.domains) == 3
        assert len(data.val.domains) == 1
        assert len(data.test.domains) == 2
        for corpus in (data.train, data.val, data.test):
            for domain in corpus.domains:
                sizes = corpus.class_sizes(domain)
                assert sorted(sizes) == ["c0", "c1"]
                assert all(v == 5 for v in sizes.values())

    def test_meta_splits_are_domain_disjoint(self):
        data = syn.generate(small_spec())
        check_domain_disjoint(data.train, data.val)
        check_domain_disjoint(data.train, data.test)
        assert not (set(data.val.domains) & set(data.test.domains))

    def test_same_seed_is_byte_for_byte_identical(self):
        a = syn.generate(small_spec(seed=9))
        b = syn.generate(small_spec(seed=9))
        assert a.train.sentences == b.train.sentences
        assert a.val.sentences == b.val.sentences
        assert a.test.sentences == b.test.sentences
        assert a.clusters == b.clusters

    def test_different_seeds_differ(self):
        a = syn.generate(small_spec(seed=0))
        b = syn.generate(small_spec(seed=1))
        assert [s.text for s in a.train.sentences] != [s.text for s in b.train.sentences]

    def test_zero_overlap_makes_disjoint_clusters(self):
        data = syn.generate(small_spec(overlap=0.0, n_train_domains=4))
        names = sorted(data.clusters)
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                assert not (data.clusters[names[i]] & data.clusters[names[j]])
        assert syn.cluster_jaccard(data.clusters) == 0.0

    @pytest.mark.parametrize("target", [0.2, 0.5])
    def test_measured_overlap_tracks_requested_fraction(self, target):
        """Mean pairwise cluster Jaccard stays within +-0.05 of the knob:
        clusters sample a shared pool sized so the expected hypergeometric
        intersection hits the requested fraction."""
        measured = []
        for seed in range(20):
            data = syn.generate(small_spec(overlap=target, cluster_size=24, seed=seed))
            measured.append(syn.cluster_jaccard(data.clusters))
        assert abs(float(np.mean(measured)) - target) <= 0.05
        assert all(abs(v - target) <= 0.05 for v in measured)

    def test_cluster_map_covers_every_domain(self):
        data = syn.generate(small_spec())
        domains = set(data.train.domains) | set(data.val.domains) | set(data.test.domains)
        assert set(data.clusters) == domains

    def test_sentences_draw_from_cluster_and_filler_only(self):
        spec = small_spec()
        data = syn.generate(spec)
        filler = {f"f{i:04d}" for i in range(spec.vocab_size)}
        for corpus in (data.train, data.val, data.test):
            for s in corpus.sentences:
                words = s.text.split()
                assert 8 <= len(words) <= 14
                allowed = data.clusters[s.domain] | filler
                assert set(words) <= allowed

    def test_full_overlap_shares_whole_cluster(self):
        data = syn.generate(small_spec(overlap=1.0))
        names = sorted(data.clusters)
        for name in names[1:]:
            assert data.clusters[name] == data.clusters[names[0]]


class TestClusterJaccard:
    def test_hand_fixture(self):
        clusters = {"a": {"x", "y"}, "b": {"y", "z"}}
        assert syn.cluster_jaccard(clusters) == pytest.approx(1.0 / 3.0)

    def test_three_way_mean(self):
        clusters = {"a": {"x"}, "b": {"x"}, "c": {"y"}}
        # pairs: (a,b)=1, (a,c)=0, (b,c)=0
        assert syn.cluster_jaccard(clusters) == pytest.approx(1.0 / 3.0)

    def test_single_cluster_is_zero(self):
        assert syn.cluster_jaccard({"a": {"x"}}) == 0.0

"""Threshold search, detection/classification metrics, and calibration,
checked against hand arithmetic and brute-force recomputation."""

import csv
import json

import numpy as np
import pytest

import protoinfomax.evaluation as ev
from protoinfomax.corpus import Corpus, EpisodeSpec, Sentence, sample_meta_test_stream
from protoinfomax.encoder import EncoderConfig, encode_batch, init_encoder
from protoinfomax.features import build_vocab, fit_idf, tokenize
from protoinfomax.training import ModelAssets


def rec(score, pred=0, true=0, is_ood=False, qid="q", domain=""):
    """Record builder keeping the is_ood <-> true_class = -1 law intact."""
    return ev.PredictionRecord(
        query_id=qid,
        score=score,
        predicted_class=pred,
        true_class=-1 if is_ood else true,
        is_ood=is_ood,
        domain=domain,
    )


def random_records(rng, n_id, n_ood, n_classes=3):
    out = []
    for i in range(n_id):
        true = int(rng.integers(n_classes))
        pred = int(rng.integers(n_classes))
        out.append(rec(float(rng.uniform(-1, 1)), pred=pred, true=true, qid=f"id{i}"))
    for i in range(n_ood):
        out.append(rec(float(rng.uniform(-1, 1)), pred=int(rng.integers(n_classes)),
                       is_ood=True, qid=f"ood{i}"))
    return out


def brute_force_threshold(records):
    """Exhaustive sweep over the same candidate set, in plain Python."""
    id_s = sorted(r.score for r in records if not r.is_ood)
    ood_s = sorted(r.score for r in records if r.is_ood)
    s = sorted(r.score for r in records)
    cands = sorted({(s[0] + s[1]) / 2.0} | {(a + b) / 2.0 for a, b in zip(s, s[1:])})
    rows = []
    for c in cands:
        frr = sum(1 for v in id_s if v < c) / len(id_s)
        far = sum(1 for v in ood_s if v >= c) / len(ood_s)
        rows.append((c, frr, far))
    for c, frr, far in rows:
        if frr - far >= 0.0:
            return c, frr, far, True
    c, frr, far = min(rows, key=lambda row: (abs(row[1] - row[2]), row[0]))
    return c, frr, far, False


def brute_force_ece(records, kind, tau=None, n_bins=10):
    """Per-record recomputation with Python-float accumulators."""
    if kind == "id":
        subset = [r for r in records if not r.is_ood]
        correct = [1.0 if r.predicted_class == r.true_class else 0.0 for r in subset]
    else:
        subset = [r for r in records if r.is_ood]
        correct = [1.0 if r.score < tau else 0.0 for r in subset]
    edges = [m / n_bins for m in range(n_bins + 1)]
    conf_sum = [0.0] * n_bins
    acc_sum = [0.0] * n_bins
    count = [0] * n_bins
    for r, c in zip(subset, correct):
        # walk the edges instead of dividing: bins are half-open with a
        # closed top, and exact edge hits must land in the upper bin
        b = 0
        while b < n_bins - 1 and r.confidence >= edges[b + 1]:
            b += 1
        conf_sum[b] += r.confidence
        acc_sum[b] += c
        count[b] += 1
    n = len(subset)
    ece = 0.0
    for m in range(n_bins):
        if count[m]:
            ece += (count[m] / n) * abs(acc_sum[m] / count[m] - conf_sum[m] / count[m]) * 100.0
    return ece


class TestPredictionRecord:
    def test_confidence_maps_scores_to_unit_interval(self):
        assert rec(-1.0).confidence == 0.0
        assert rec(1.0).confidence == 1.0
        assert rec(0.5).confidence == 0.75

    def test_ood_truth_marker(self):
        r = rec(0.2, is_ood=True)
        assert r.true_class == -1 and r.is_ood


class TestThresholdCandidates:
    def test_initial_candidate_is_mean_of_two_lowest(self):
        cands = ev.threshold_candidates([0.9, 0.6, 0.2, 0.1])
        assert cands[0] == pytest.approx((0.1 + 0.2) / 2.0)

    def test_ascending_and_deduplicated(self):
        cands = ev.threshold_candidates([0.3, 0.3, 0.3, 0.7])
        assert np.all(np.diff(cands) > 0)
        assert len(cands) == len(set(cands.tolist()))

    def test_fewer_than_two_scores_rejected(self):
        with pytest.raises(ValueError):
            ev.threshold_candidates([0.5])


class TestSelectThreshold:
    def test_separable_pair_set(self):
        """ID {0.9, 0.6} vs OOD {0.2, 0.1}: the sweep starts at 0.15 and
        settles strictly between the score groups with zero error rates."""
        records = [rec(0.9), rec(0.6), rec(0.2, is_ood=True), rec(0.1, is_ood=True)]
        result = ev.select_threshold(records)
        assert result.trace[0][0] == pytest.approx(0.15)
        assert 0.2 < result.tau < 0.6
        assert result.frr == 0.0 and result.far == 0.0
        assert result.crossed

    def test_single_id_above_single_ood(self):
        result = ev.select_threshold([rec(0.8), rec(-0.3, is_ood=True)])
        assert -0.3 < result.tau < 0.8
        assert result.frr == 0.0 and result.far == 0.0

    def test_no_crossing_falls_back_to_gap_minimizer(self):
        # OOD tied at the top keeps FAR pinned to 1 while FRR stays at 0.5,
        # so FRR - FAR is negative everywhere; the tie over |FRR - FAR|
        # breaks toward the lower candidate
        records = [rec(0.5), rec(1.0), rec(1.0, is_ood=True), rec(1.0, is_ood=True)]
        result = ev.select_threshold(records)
        assert not result.crossed
        assert result.tau == pytest.approx(0.75)
        assert result.frr == 0.5 and result.far == 1.0

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(42)
        for trial in range(40):
            records = random_records(rng, int(rng.integers(2, 30)), int(rng.integers(2, 30)))
            got = ev.select_threshold(records)
            tau, frr, far, crossed = brute_force_threshold(records)
            assert got.tau == tau, f"trial {trial}"
            assert got.frr == frr and got.far == far
            assert got.crossed == crossed

    def test_trace_is_monotone_in_rates(self):
        """Raising tau can only reject more ID and accept fewer OOD."""
        rng = np.random.default_rng(3)
        records = random_records(rng, 25, 25)
        trace = ev.select_threshold(records).trace
        frrs = [row[1] for row in trace]
        fars = [row[2] for row in trace]
        assert all(a <= b for a, b in zip(frrs, frrs[1:]))
        assert all(a >= b for a, b in zip(fars, fars[1:]))
        assert [row[0] for row in trace] == sorted(row[0] for row in trace)

    def test_single_sided_input_rejected(self):
        with pytest.raises(ValueError):
            ev.select_threshold([rec(0.5), rec(0.6)])
        with pytest.raises(ValueError):
            ev.select_threshold([rec(0.5, is_ood=True), rec(0.6, is_ood=True)])

    def test_outputs_are_python_floats(self):
        result = ev.select_threshold([rec(0.9), rec(0.1, is_ood=True)])
        assert type(result.tau) is float
        assert type(result.frr) is float and type(result.far) is float


class TestComputeMetrics:
    def test_perfect_separation_and_classification(self):
        records = [rec(0.9, pred=1, true=1), rec(0.8, pred=0, true=0),
                   rec(-0.5, is_ood=True), rec(-0.6, is_ood=True)]
        report = ev.compute_metrics(records, tau=0.0)
        assert report.eer == 0.0
        assert report.cer_id == 0.0
        # cer_all keeps the all-examples denominator, so even a perfect run
        # retains the OOD mass: 1 - #ID/n
        assert report.cer_all == pytest.approx(1.0 - 2.0 / 4.0)
        assert report.frr == 0.0 and report.far == 0.0

    def test_hand_counted_fixture(self):
        """Four ID and four OOD records placed around tau=0.5 so the
        confusion counts can be tallied on paper."""
        records = [
            rec(0.9, pred=1, true=1, qid="a"),   # accepted, correct
            rec(0.8, pred=0, true=0, qid="b"),   # accepted, correct
            rec(0.7, pred=1, true=0, qid="c"),   # accepted, misclassified
            rec(0.3, pred=0, true=0, qid="d"),   # rejected ID
            rec(0.6, is_ood=True, qid="e"),      # accepted OOD
            rec(0.55, is_ood=True, qid="f"),     # accepted OOD
            rec(0.2, is_ood=True, qid="g"),      # rejected OOD
            rec(0.1, is_ood=True, qid="h"),      # rejected OOD
        ]
        report = ev.compute_metrics(records, tau=0.5)
        assert (report.tp, report.tn, report.fp, report.fn) == (3, 2, 1, 2)
        assert report.tp_id == 2
        assert (report.n, report.n_id, report.n_ood) == (8, 4, 4)
        assert report.eer == pytest.approx(1.0 - 5.0 / 8.0)   # 0.375
        assert report.cer_id == pytest.approx(0.5)
        assert report.cer_all == pytest.approx(0.75)
        assert report.frr == pytest.approx(0.25)
        assert report.far == pytest.approx(0.5)

    def test_score_equal_to_tau_is_accepted(self):
        records = [rec(0.5, pred=0, true=0), rec(0.4, is_ood=True)]
        report = ev.compute_metrics(records, tau=0.5)
        assert report.tp == 1 and report.fp == 0

    def test_counts_partition_records(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            records = random_records(rng, int(rng.integers(2, 40)), int(rng.integers(2, 40)))
            report = ev.compute_metrics(records, tau=float(rng.uniform(-1, 1)))
            assert report.tp + report.fp == report.n_id
            assert report.tn + report.fn == report.n_ood
            assert report.n == report.n_id + report.n_ood
            for rate in (report.frr, report.far, report.eer, report.cer_id, report.cer_all):
                assert 0.0 <= rate <= 1.0

    def test_per_domain_breakdown_uses_global_tau(self):
        records = [
            rec(0.9, pred=0, true=0, domain="books"),
            rec(0.1, pred=0, true=0, domain="books"),
            rec(0.7, is_ood=True, domain="books"),
            rec(0.8, pred=1, true=1, domain="games"),
            rec(-0.2, is_ood=True, domain="games"),
        ]
        report = ev.compute_metrics(records, tau=0.5)
        assert sorted(report.per_domain) == ["books", "games"]
        books = report.per_domain["books"]
        # books at tau=0.5: TP=1, FP=1, FN=1 -> EER = 1 - 1/3
        assert books["n"] == 3
        assert books["eer"] == pytest.approx(1.0 - 1.0 / 3.0)
        assert books["cer_id"] == pytest.approx(0.5)
        assert books["cer_all"] == pytest.approx(1.0 - 1.0 / 3.0)
        games = report.per_domain["games"]
        assert games["eer"] == 0.0 and games["cer_id"] == 0.0

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            ev.compute_metrics([], tau=0.0)


class TestBinning:
    def test_edges_are_uniform(self):
        edges = ev.bin_edges()
        assert edges.shape == (11,)
        assert edges[0] == 0.0 and edges[-1] == 1.0
        assert np.allclose(np.diff(edges), 0.1)

    def test_half_open_bins_with_closed_top(self):
        edges = ev.bin_edges()
        assert ev.bin_of(0.0, edges) == 0
        assert ev.bin_of(0.05, edges) == 0
        assert ev.bin_of(0.1, edges) == 1   # left edge belongs to the bin above
        assert ev.bin_of(0.95, edges) == 9
        assert ev.bin_of(1.0, edges) == 9   # top edge stays in the last bin

    def test_out_of_range_confidence_clamps(self):
        edges = ev.bin_edges()
        assert ev.bin_of(-0.01, edges) == 0
        assert ev.bin_of(1.01, edges) == 9


class TestCalibration:
    def test_perfectly_calibrated_records_have_zero_ece(self):
        # 20 records at confidence 0.85, exactly 17 correct: bin accuracy
        # equals bin confidence so the gap vanishes
        records = [rec(0.7, pred=0, true=0 if i < 17 else 1, qid=f"q{i}") for i in range(20)]
        report = ev.calibration(records, kind="id")
        assert report.ece == pytest.approx(0.0, abs=1e-12)

    def test_fully_confident_half_right_is_fifty_percent(self):
        records = [rec(1.0, pred=0, true=i % 2, qid=f"q{i}") for i in range(10)]
        report = ev.calibration(records, kind="id")
        assert report.ece == pytest.approx(50.0)
        assert report.avg_confidence == 1.0
        assert report.accuracy == 0.5

    def test_matches_brute_force_on_random_records(self):
        rng = np.random.default_rng(123)
        records = random_records(rng, 700, 300)
        report = ev.calibration(records, kind="id")
        assert report.ece == pytest.approx(brute_force_ece(records, "id"), abs=1e-12)
        tau = 0.1
        report_ood = ev.calibration(records, kind="ood", tau=tau)
        assert report_ood.ece == pytest.approx(brute_force_ece(records, "ood", tau), abs=1e-12)

    def test_order_invariance(self):
        rng = np.random.default_rng(7)
        records = random_records(rng, 120, 80)
        shuffled = list(records)
        rng.shuffle(shuffled)
        a = ev.calibration(records, kind="id").ece
        b = ev.calibration(shuffled, kind="id").ece
        assert a == pytest.approx(b, abs=1e-12)

    def test_bin_bookkeeping(self):
        rng = np.random.default_rng(9)
        records = random_records(rng, 50, 10)
        report = ev.calibration(records, kind="id")
        assert len(report.bins) == 10
        assert sum(b.count for b in report.bins) == report.n == 50
        for b in report.bins:
            if b.count == 0:
                assert b.accuracy == 0.0 and b.confidence == 0.0
            else:
                assert b.gap == pytest.approx(abs(b.accuracy - b.confidence))

    def test_ood_kind_scores_rejection(self):
        # both OOD records sit below tau -> rejection always correct
        records = [rec(-0.5, is_ood=True), rec(-0.8, is_ood=True), rec(0.9)]
        report = ev.calibration(records, kind="ood", tau=0.0)
        assert report.n == 2
        assert report.accuracy == 1.0

    def test_ood_kind_requires_tau(self):
        with pytest.raises(ValueError):
            ev.calibration([rec(0.1, is_ood=True)], kind="ood")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            ev.calibration([rec(0.1)], kind="both")

    def test_empty_subset_rejected(self):
        with pytest.raises(ValueError):
            ev.calibration([rec(0.1, is_ood=True)], kind="id")


def toy_corpus():
    sentences = []
    texts = {
        "zebra": ["stripe mane gallop", "mane stripe trot", "gallop stripe herd",
                  "stripe herd mane", "trot mane gallop"],
        "otter": ["river swim fish", "fish river dive", "swim dive river",
                  "river fish swim", "dive swim fish"],
    }
    for d, (label_a, label_b) in {"plains": ("zebra", "otter"), "coast": ("otter", "zebra"),
                                  "hills": ("zebra", "otter")}.items():
        for label in (label_a, label_b):
            for i, text in enumerate(texts[label]):
                sentences.append(Sentence(id=f"{d}-{label}-{i}", text=text, label=label, domain=d))
    return Corpus(sentences=tuple(sentences), split="meta-test")


class TestScoreMetaTest:
    def setup_method(self):
        self.corpus = toy_corpus()
        self.vocab = build_vocab(self.corpus)
        self.idf = fit_idf(self.corpus, self.vocab)
        self.assets = ModelAssets(vocab=self.vocab, idf=self.idf)
        self.config = EncoderConfig(vocab_size=len(self.vocab), d_emb=6, hidden=4,
                                    attn_queries=2, max_len=8)
        self.params = init_encoder(self.config, seed=5)
        self.spec = EpisodeSpec(n_classes=2, k_shot=2, n_id_queries=4, n_ood_queries=3)

    def test_records_match_numpy_recomputation(self):
        """Scores and argmax classes agree with an encoder-plus-numpy
        recomputation that never touches the similarity module."""
        records = ev.score_meta_test(self.params, self.assets, self.corpus, self.spec, seed=2)
        want = []
        for episode in sample_meta_test_stream(self.corpus, self.spec, 2):
            toks = lambda sents: [tokenize(s.text, self.vocab, self.config.max_len) for s in sents]
            flat = [s for cls in episode.support for s in cls]
            sup = encode_batch(toks(flat), self.params).data
            protos = sup.reshape(self.spec.n_classes, self.spec.k_shot, -1).mean(axis=1)
            queries = [s for s, _ in episode.id_queries] + list(episode.ood_queries)
            q = encode_batch(toks(queries), self.params).data
            qn = q / np.linalg.norm(q, axis=1, keepdims=True)
            pn = protos / np.linalg.norm(protos, axis=1, keepdims=True)
            sim = qn @ pn.T
            for row, sent in zip(sim, queries):
                want.append((sent.id, float(row.max()), int(row.argmax()), episode.domain))
        assert len(records) == len(want) == 3 * (4 + 3)
        for r, (qid, score, pred, domain) in zip(records, want):
            assert r.query_id == qid and r.domain == domain
            assert r.score == pytest.approx(score, abs=1e-12)
            assert r.predicted_class == pred

    def test_ood_records_are_marked(self):
        records = ev.score_meta_test(self.params, self.assets, self.corpus, self.spec, seed=2)
        per_episode = 4 + 3
        for i, r in enumerate(records):
            if i % per_episode >= 4:
                assert r.is_ood and r.true_class == -1
            else:
                assert not r.is_ood and r.true_class in (0, 1)

    def test_single_class_episodes_always_predict_zero(self):
        spec = EpisodeSpec(n_classes=1, k_shot=2, n_id_queries=3, n_ood_queries=2)
        records = ev.score_meta_test(self.params, self.assets, self.corpus, spec, seed=4)
        assert records
        assert all(r.predicted_class == 0 for r in records)

    def test_repeat_runs_are_identical(self):
        a = ev.score_meta_test(self.params, self.assets, self.corpus, self.spec, seed=6)
        b = ev.score_meta_test(self.params, self.assets, self.corpus, self.spec, seed=6)
        assert a == b


class TestSerialization:
    def make_records(self):
        return [rec(0.875, pred=1, true=1, qid="q0", domain="d"),
                rec(-0.25, pred=0, is_ood=True, qid="q1", domain="d")]

    def test_prediction_csv_layout(self, tmp_path):
        path = tmp_path / "predictions.csv"
        ev.save_predictions(self.make_records(), path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["query_id", "score", "predicted_class", "true_class", "is_ood"]
        assert rows[1] == ["q0", "0.875", "1", "1", "false"]
        assert rows[2] == ["q1", "-0.25", "0", "ood", "true"]

    def test_prediction_csv_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        ev.save_predictions(self.make_records(), a)
        ev.save_predictions(self.make_records(), b)
        assert a.read_bytes() == b.read_bytes()

    def test_metrics_json_round_trip(self, tmp_path):
        records = [rec(0.9, pred=0, true=0), rec(-0.9, is_ood=True)]
        report = ev.compute_metrics(records, tau=0.0)
        path = tmp_path / "metrics.json"
        ev.save_metrics(report, path, ece=1.25)
        payload = json.loads(path.read_text())
        assert payload["eer"] == report.eer
        assert payload["cer_id"] == report.cer_id
        assert payload["cer_all"] == report.cer_all
        assert payload["tau"] == 0.0
        assert payload["ece"] == 1.25
        assert payload["counts"]["tp"] == 1 and payload["counts"]["tn"] == 1
        assert "per_domain" in payload
        assert path.read_text().endswith("\n")

    def test_metrics_json_without_ece_stores_null(self, tmp_path):
        records = [rec(0.9, pred=0, true=0), rec(-0.9, is_ood=True)]
        path = tmp_path / "metrics.json"
        ev.save_metrics(ev.compute_metrics(records, tau=0.0), path)
        assert json.loads(path.read_text())["ece"] is None

    def test_calibration_bin_csv_layout(self, tmp_path):
        records = [rec(1.0, pred=0, true=i % 2, qid=f"q{i}") for i in range(4)]
        report = ev.calibration(records, kind="id")
        path = tmp_path / "bins.csv"
        ev.save_calibration_bins(report, path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["bin_lo", "bin_hi", "count", "accuracy", "confidence", "gap"]
        assert len(rows) == 11
        assert rows[-1] == ["0.9", "1.0", "4", "0.5", "1.0", "0.5"]

    def test_calibration_summary_json(self, tmp_path):
        records = [rec(1.0, pred=0, true=i % 2, qid=f"q{i}") for i in range(4)]
        report = ev.calibration(records, kind="id")
        path = tmp_path / "calibration.json"
        ev.save_calibration_summary(report, path)
        payload = json.loads(path.read_text())
        assert payload == {"kind": "id", "n": 4, "ece": 50.0,
                           "avg_confidence": 1.0, "accuracy": 0.5}

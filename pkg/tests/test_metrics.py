import numpy as np
import pytest

from mlmtsed.annotation import EventInstance
from mlmtsed.decoder import DetectedEvent
from mlmtsed.errors import EmptyValidation, NoClasses
from mlmtsed.metrics import (
    ALPHA_GRID,
    BETA_GRID,
    MEDIAN_WINDOWS,
    ClassMetrics,
    MatchConfig,
    ValItem,
    aggregate,
    decode_baseline,
    decode_confidence,
    evaluate,
    format_table,
    match_events,
    tune_median_windows,
    tune_thresholds,
)

from oracles import brute_bipartite_tp


def ev(c, on, off):
    return EventInstance(c, on, off)


class TestMatching:
    def test_within_collars(self):
        (m,) = match_events([ev(0, 1.0, 2.0)], [ev(0, 1.05, 1.9)])
        assert (m.tp, m.fn, m.fp) == (1, 0, 0)

    def test_onset_outside_collar(self):
        (m,) = match_events([ev(0, 1.0, 2.0)], [ev(0, 1.25, 2.0)])
        assert (m.tp, m.fn, m.fp) == (0, 1, 1)

    def test_offset_ratio_tolerance(self):
        # 2 s reference -> offset tolerance 1 s
        (m,) = match_events([ev(0, 1.0, 3.0)], [ev(0, 1.0, 3.9)])
        assert m.tp == 1

    def test_class_must_agree(self):
        ms = match_events([ev(0, 1.0, 2.0)], [ev(1, 1.0, 2.0)], n_classes=2)
        assert (ms[0].fn, ms[1].fp) == (1, 1)

    def test_empty_hypothesis(self):
        (m,) = match_events([ev(0, 1, 2), ev(0, 3, 4)], [], n_classes=1)
        assert (m.tp, m.fn, m.fp) == (0, 2, 0)
        assert m.f1 == 0.0 and m.er == 1.0

    def test_fp_heavy(self):
        (m,) = match_events([ev(0, 1, 2)], [ev(0, 5, 6), ev(0, 7, 8), ev(0, 9, 9.5)])
        assert (m.fn, m.fp) == (1, 3)
        assert m.er == 4.0

    def test_detected_events_use_frames(self):
        (m,) = match_events([ev(0, 1.0, 2.0)], [DetectedEvent(0, 50, 100)])
        assert m.tp == 1

    def test_greedy_agrees_with_optimal(self):
        rng = np.random.default_rng(7)
        cfg = MatchConfig()
        agree = 0
        n_cases = 300
        for _ in range(n_cases):
            refs = sorted((float(a), float(a + d)) for a, d in zip(rng.uniform(0, 4, rng.integers(0, 7)), rng.uniform(0.1, 1.5, 7)))
            hyps = [(r[0] + rng.normal(0, 0.15), r[1] + rng.normal(0, 0.3)) for r in refs if rng.random() < 0.8]
            hyps += [(float(a), float(a + 0.5)) for a in rng.uniform(0, 4, rng.integers(0, 3))]
            hyps = sorted((max(a, 0.0), b) for a, b in hyps)[:6]
            ref_ev = [ev(0, a, b) for a, b in refs]
            hyp_ev = [ev(0, a, max(b, a + 0.01)) for a, b in hyps]
            (m,) = match_events(ref_ev, hyp_ev, n_classes=1)

            def ok(r, h):
                return abs(h.onset_s - r.onset_s) <= 0.2 and abs(h.offset_s - r.offset_s) <= cfg.offset_tolerance(r.duration_s)

            agree += m.tp == brute_bipartite_tp(ref_ev, hyp_ev, ok)
        assert agree / n_cases >= 0.95


class TestAggregate:
    def test_single_class(self):
        agg = aggregate([ClassMetrics(3, 1, 2)])
        assert agg.average_f1 == agg.overall_f1 and agg.average_er == agg.overall_er

    def test_two_classes(self):
        agg = aggregate([ClassMetrics(1, 0, 0), ClassMetrics(0, 1, 0)])
        assert agg.average_f1 == 0.5
        assert agg.overall_f1 == pytest.approx(2 / 3)
        assert agg.overall_er == 0.5

    def test_identical_counts(self):
        agg = aggregate([ClassMetrics(2, 1, 1)] * 3)
        assert agg.average_f1 == pytest.approx(agg.overall_f1)

    def test_perfect(self):
        refs = {"r": [ev(0, 1, 2), ev(1, 3, 4)]}
        agg = aggregate(evaluate(refs, refs, 2))
        assert (agg.average_f1, agg.average_er) == (1.0, 0.0)

    def test_no_classes(self):
        with pytest.raises(NoClasses):
            aggregate([])

    def test_table(self):
        per = [ClassMetrics(1, 0, 0)]
        assert "100.0" in format_table(per, ["dog"], aggregate(per))


def _val_item(n_frames=60, T=20):
    """One class active on frames 10..29; predictions carry exact distances."""
    ref = [ev(0, 10 * 0.02, 29 * 0.02)]
    segs = []
    for start in range(0, n_frames, T):
        pred = np.zeros((T, 2, 3))
        for t in range(T):
            n = start + t
            if 10 <= n <= 29:
                pred[t, 0] = [0.9, (n - 10) / T, (29 - n) / T]
            else:
                pred[t, 0, 0] = 0.1
        segs.append((start, pred))
    return ValItem([segs], n_frames, ref)


class TestTuning:
    def test_grid_sizes(self):
        assert len(ALPHA_GRID) == 101 and len(BETA_GRID) == 21 and len(MEDIAN_WINDOWS) == 43
        assert MEDIAN_WINDOWS[0] == 1 and MEDIAN_WINDOWS[-1] == 253 and np.all(MEDIAN_WINDOWS % 2 == 1)

    def test_empty(self):
        with pytest.raises(EmptyValidation):
            tune_thresholds([], 1, 4)
        with pytest.raises(EmptyValidation):
            tune_median_windows([], 1)

    def test_confidence_tuning_and_idempotence(self):
        item = _val_item()
        alpha, beta, f1 = tune_thresholds([item], 2, 20)
        assert f1[0] == 1.0
        # class 1 never occurs nor fires; the smallest pair wins the tie
        assert (alpha[1], beta[1]) == (0.0, 0.0)
        dets = decode_confidence(item.models_preds, item.n_frames, alpha, beta, 20)
        per = evaluate({"r": item.ref}, {"r": dets}, 2)
        assert per[0].f1 == f1[0]

    def test_brute_force_grid(self):
        item = _val_item()
        a_grid, b_grid = np.array([0.0, 0.5, 0.95]), np.array([0.0, 0.5, 1.0])
        alpha, beta, f1 = tune_thresholds([item], 2, 20, a_grid, b_grid)
        best = max(
            (evaluate({"r": item.ref}, {"r": decode_confidence(item.models_preds, 60, [a, a], [b, b], 20)}, 2)[0].f1, -a, -b)
            for a in a_grid
            for b in b_grid
        )
        assert f1[0] == best[0] and (alpha[0], beta[0]) == (-best[1], -best[2])

    def test_median_tuning_exhaustive(self):
        rng = np.random.default_rng(1)
        act = np.zeros((120, 1))
        act[20:60, 0] = 0.8
        act[rng.integers(0, 120, 8), 0] = 0.7
        act[rng.integers(20, 60, 4), 0] = 0.2
        ref = [ev(0, 20 * 0.02, 59 * 0.02)]
        a_grid = np.array([0.0, 0.5, 0.75])
        alpha, win, f1 = tune_median_windows([(act, ref)], 1, a_grid)
        best = max(
            (evaluate({"r": ref}, {"r": decode_baseline(act, [a], [w])}, 1)[0].f1, -a, -w)
            for a in a_grid
            for w in MEDIAN_WINDOWS
        )
        assert (f1[0], -alpha[0], -win[0]) == best

    def test_median_all_tie(self):
        act = np.zeros((30, 1))
        _, win, f1 = tune_median_windows([(act, [])], 1, np.array([0.5]))
        assert win[0] == 1 and f1[0] == 0.0

import numpy as np
import pytest

from nowcal import metrics
from nowcal.metrics import (
    ConfidenceBinning,
    RateBinning,
    ReliabilityTable,
    assign_bin,
    class_probabilities,
    diagram_export,
    ece,
    etce,
    exceedance_labels,
    exceedance_probabilities,
    f1_at_threshold,
    reliability_table,
    sce,
)


def test_default_rate_binning():
    rb = RateBinning()
    assert rb.n_classes == 12
    assert rb.thresholds[0] == 0.2 and rb.thresholds[-1] == 10.0
    assert 1.0 in rb.thresholds and 1.5 in rb.thresholds


def test_rate_binning_rejects_unsorted():
    with pytest.raises(ValueError):
        RateBinning((1.0, 0.5))
    with pytest.raises(ValueError):
        RateBinning((-1.0, 0.5))


def test_threshold_index_errors_off_edge():
    with pytest.raises(ValueError, match="not a rate-bin edge"):
        RateBinning().threshold_index(1.25)


# -- softmax ---------------------------------------------------------------

def test_uniform_logits_give_uniform_probs():
    p = class_probabilities(np.zeros((1, 12, 2, 2), dtype=np.float32))
    assert np.allclose(p, 1.0 / 12, atol=1e-7)


def test_two_class_analytic():
    logits = np.zeros((1, 2, 1, 1))
    logits[0, 0] = np.log(2.0)
    p = class_probabilities(logits)
    assert np.allclose(p[0, :, 0, 0], [2 / 3, 1 / 3], atol=1e-12)


def test_probs_sum_to_one_random():
    rng = np.random.default_rng(3)
    p = class_probabilities(rng.normal(scale=5, size=(4, 12, 8, 8)).astype(np.float32))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_nan_logits_rejected():
    bad = np.zeros((1, 2, 1, 1), dtype=np.float32)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        class_probabilities(bad)


# -- exceedance ------------------------------------------------------------

def test_exceedance_probs_cumulative():
    rb = RateBinning((1.0, 2.0))
    probs = np.array([0.5, 0.3, 0.2]).reshape(1, 3, 1, 1)
    ex = exceedance_probabilities(probs, rb)
    assert np.allclose(ex[0, :, 0, 0], [0.5, 0.2], atol=1e-15)


def test_exceedance_one_hot_extremes():
    rb = RateBinning()
    low = np.zeros((1, 12, 1, 1))
    low[0, 0] = 1.0
    assert np.all(exceedance_probabilities(low, rb) == 0.0)
    high = np.zeros((1, 12, 1, 1))
    high[0, 11] = 1.0
    assert np.all(exceedance_probabilities(high, rb) == 1.0)


def test_exceedance_monotone_random():
    rng = np.random.default_rng(5)
    probs = class_probabilities(rng.normal(size=(3, 12, 4, 4)))
    ex = exceedance_probabilities(probs, RateBinning())
    assert np.all(np.diff(ex, axis=1) <= 1e-12)


def test_exceedance_labels_definition():
    rb = RateBinning()
    labels = np.array([0, 11, 5]).reshape(3, 1, 1)
    ev = exceedance_labels(labels, rb)
    assert np.all(ev[0] == 0)
    assert np.all(ev[1] == 1)
    assert list(ev[2, :, 0, 0]) == [1] * 5 + [0] * 6


def test_exceedance_labels_out_of_range():
    with pytest.raises(ValueError):
        exceedance_labels(np.array([[[12]]]), RateBinning())


# -- confidence bins -------------------------------------------------------

def test_assign_bin_edges():
    b = ConfidenceBinning(20)
    assert assign_bin(0.0, b) == 0
    assert assign_bin(1.0, b) == 19  # last bin is closed
    assert assign_bin(0.05, b) == 1  # half-open left edges


def test_assign_bin_rejects_outside_unit_interval():
    with pytest.raises(ValueError):
        assign_bin(1.5, ConfidenceBinning())
    with pytest.raises(ValueError):
        assign_bin(-0.1, ConfidenceBinning())


def test_binning_needs_two_bins():
    with pytest.raises(ValueError):
        ConfidenceBinning(1)


# -- reliability table -----------------------------------------------------

def _two_class_dataset(confs, events):
    """One pixel per sample, two classes; exceedance confidence = p(class 1)."""
    n = len(confs)
    probs = np.zeros((n, 2, 1, 1))
    probs[:, 1, 0, 0] = confs
    probs[:, 0, 0, 0] = 1.0 - np.asarray(confs)
    labels = np.asarray(events, dtype=np.int64).reshape(n, 1, 1)
    leads = np.zeros(n, dtype=np.int64)
    return probs, labels, leads


def test_reliability_hand_enumeration():
    # 10 pixels, all exceedance confidence 0.82, 6 of them exceed
    probs, labels, leads = _two_class_dataset([0.82] * 10, [1] * 6 + [0] * 4)
    table = reliability_table(probs, labels, leads, RateBinning((1.0,)), ConfidenceBinning(20))
    b = assign_bin(0.82, ConfidenceBinning(20))
    assert table.counts[0, 0, b] == 10
    assert table.mean_conf()[0, 0, b] == pytest.approx(0.82, abs=1e-12)
    assert table.obs_freq()[0, 0, b] == pytest.approx(0.6, abs=1e-15)


def test_reliability_sharp_one_hot_predictions():
    probs, labels, leads = _two_class_dataset([1.0, 1.0, 0.0, 0.0], [1, 1, 0, 0])
    table = reliability_table(probs, labels, leads, RateBinning((1.0,)), ConfidenceBinning(20))
    nz = np.nonzero(table.counts[0, 0])[0]
    assert set(nz) == {0, 19}
    assert table.obs_freq()[0, 0, 0] == 0.0
    assert table.obs_freq()[0, 0, 19] == 1.0


def test_reliability_counts_sum_to_pixels_per_lead():
    rng = np.random.default_rng(11)
    n, k, h, w = 12, 12, 4, 4
    probs = class_probabilities(rng.normal(size=(n, k, h, w)))
    labels = rng.integers(0, k, size=(n, h, w)).astype(np.int64)
    leads = rng.integers(0, 3, size=n).astype(np.int64)
    table = reliability_table(probs, labels, leads, RateBinning(), ConfidenceBinning(20))
    for lead in range(3):
        expected = int((leads == lead).sum()) * h * w
        assert np.all(table.counts[:, lead].sum(axis=1) == expected)


def test_reliability_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        reliability_table(
            np.zeros((0, 2, 1, 1)), np.zeros((0, 1, 1), dtype=np.int64),
            np.zeros(0, dtype=np.int64), RateBinning((1.0,)), ConfidenceBinning(),
        )


# -- ece -------------------------------------------------------------------

def test_ece_four_point_hand_instance():
    # top-class confidences 0.9, 0.8, 0.6, 0.55 with correctness 1, 0, 1, 1;
    # quarter-width bins put the pairs in [0.5,0.75) and [0.75,1]:
    # 0.5*|1-0.575| + 0.5*|0.5-0.85| = 0.3875
    probs = np.zeros((4, 2, 1, 1))
    probs[:, 0, 0, 0] = [0.9, 0.8, 0.6, 0.55]
    probs[:, 1, 0, 0] = [0.1, 0.2, 0.4, 0.45]
    labels = np.array([0, 1, 0, 0], dtype=np.int64).reshape(4, 1, 1)
    leads = np.zeros(4, dtype=np.int64)
    scores = ece(probs, labels, leads, ConfidenceBinning(4))
    assert scores.per_lead[0] == pytest.approx(0.3875, abs=1e-15)
    assert scores.average == pytest.approx(0.3875, abs=1e-15)


def test_ece_perfect_predictions():
    probs, labels, leads = _two_class_dataset([1.0, 0.0], [1, 0])
    assert ece(probs, labels, leads, ConfidenceBinning(20)).average == 0.0


def test_ece_bounded_random():
    rng = np.random.default_rng(7)
    probs = class_probabilities(rng.normal(size=(6, 12, 6, 6)))
    labels = rng.integers(0, 12, size=(6, 6, 6)).astype(np.int64)
    leads = rng.integers(0, 2, size=6).astype(np.int64)
    s = ece(probs, labels, leads, ConfidenceBinning(20))
    assert 0.0 <= s.average <= 1.0


# -- sce -------------------------------------------------------------------

def _sce_bruteforce(probs, labels, n_bins):
    n, k, h, w = probs.shape
    total = 0.0
    n_px = n * h * w
    for c in range(k):
        conf = probs[:, c].ravel()
        hit = (labels.ravel() == c).astype(float)
        for b in range(n_bins):
            lo, hi = b / n_bins, (b + 1) / n_bins
            sel = (conf >= lo) & ((conf < hi) | (b == n_bins - 1))
            if not sel.any():
                continue
            total += sel.sum() / n_px * abs(hit[sel].mean() - conf[sel].mean())
    return total / k


def test_sce_matches_bruteforce():
    rng = np.random.default_rng(13)
    probs = class_probabilities(rng.normal(size=(5, 3, 4, 4)))
    labels = rng.integers(0, 3, size=(5, 4, 4)).astype(np.int64)
    leads = np.zeros(5, dtype=np.int64)
    got = sce(probs, labels, leads, ConfidenceBinning(10))
    assert got.per_lead[0] == pytest.approx(_sce_bruteforce(probs, labels, 10), abs=1e-12)


def test_sce_perfect_one_hot():
    probs, labels, leads = _two_class_dataset([1.0, 0.0], [1, 0])
    assert sce(probs, labels, leads, ConfidenceBinning(20)).average == 0.0


# -- etce ------------------------------------------------------------------

def _table_from_cells(cells, n_bins=20, n_thresh=1, n_lead=1):
    counts = np.zeros((n_thresh, n_lead, n_bins), dtype=np.int64)
    conf_sum = np.zeros((n_thresh, n_lead, n_bins))
    event_sum = np.zeros((n_thresh, n_lead, n_bins))
    for (t, lead, b), (n, conf, obs) in cells.items():
        counts[t, lead, b] = n
        conf_sum[t, lead, b] = conf * n
        event_sum[t, lead, b] = obs * n
    return ReliabilityTable(tuple(range(1, n_thresh + 1)), n_lead, n_bins, counts, conf_sum, event_sum)


def test_etce_single_cell():
    table = _table_from_cells({(0, 0, 16): (10, 0.82, 0.6)})
    assert etce(table).per_lead[0] == pytest.approx(0.22, abs=1e-15)


def test_etce_two_cells_renormalized():
    table = _table_from_cells({(0, 0, 2): (4, 0.1, 0.25), (0, 0, 18): (4, 0.9, 0.5)})
    assert etce(table).per_lead[0] == pytest.approx(0.275, abs=1e-15)


def test_etce_zero_when_conf_matches_freq():
    table = _table_from_cells({(0, 0, 4): (8, 0.225, 0.225), (0, 0, 12): (5, 0.61, 0.61)})
    assert etce(table).average == 0.0


def test_etce_empty_table_raises():
    table = _table_from_cells({})
    with pytest.raises(ValueError, match="empty"):
        etce(table)


def test_etce_skips_empty_thresholds():
    # threshold 1 has no data at all and must not drag the average down
    table = _table_from_cells({(0, 0, 16): (10, 0.82, 0.6)}, n_thresh=2)
    assert etce(table).per_lead[0] == pytest.approx(0.22, abs=1e-15)


def test_etce_permutation_invariance():
    rng = np.random.default_rng(17)
    n, k, h, w = 20, 12, 4, 4
    probs = class_probabilities(rng.normal(size=(n, k, h, w)))
    labels = rng.integers(0, k, size=(n, h, w)).astype(np.int64)
    leads = rng.integers(0, 3, size=n).astype(np.int64)
    base = etce(reliability_table(probs, labels, leads, RateBinning(), ConfidenceBinning()))
    perm = rng.permutation(n)
    shuffled = etce(
        reliability_table(probs[perm], labels[perm], leads[perm], RateBinning(), ConfidenceBinning())
    )
    assert np.allclose(base.per_lead, shuffled.per_lead, atol=1e-12, equal_nan=True)
    # spatial permutation within every sample
    flat = probs.reshape(n, k, h * w)
    pperm = rng.permutation(h * w)
    probs2 = flat[:, :, pperm].reshape(n, k, h, w)
    labels2 = labels.reshape(n, h * w)[:, pperm].reshape(n, h, w)
    spatial = etce(
        reliability_table(probs2, labels2, leads, RateBinning(), ConfidenceBinning())
    )
    assert np.allclose(base.per_lead, spatial.per_lead, atol=1e-12, equal_nan=True)


# -- f1 ----------------------------------------------------------------------

def test_f1_hand_counts():
    # 2 TP (conf .8, event), 1 FP (conf .8, no event), 1 FN (conf .2, event), 1 TN
    probs, labels, leads = _two_class_dataset([0.8, 0.8, 0.8, 0.2, 0.2], [1, 1, 0, 1, 0])
    s = f1_at_threshold(probs, labels, leads, RateBinning((1.0,)), 1.0)
    assert s.per_lead[0] == pytest.approx(2 / 3, abs=1e-15)


def test_f1_all_correct_positives():
    probs, labels, leads = _two_class_dataset([0.9, 0.8], [1, 1])
    assert f1_at_threshold(probs, labels, leads, RateBinning((1.0,)), 1.0).average == 1.0


def test_f1_degenerate_zero():
    probs, labels, leads = _two_class_dataset([0.1, 0.2], [0, 0])
    assert f1_at_threshold(probs, labels, leads, RateBinning((1.0,)), 1.0).average == 0.0


def test_f1_requires_edge_threshold():
    probs, labels, leads = _two_class_dataset([0.8], [1])
    with pytest.raises(ValueError):
        f1_at_threshold(probs, labels, leads, RateBinning((1.0,)), 0.7)


# -- diagrams ----------------------------------------------------------------

def _random_table(seed=19, n=10, n_lead=2):
    rng = np.random.default_rng(seed)
    probs = class_probabilities(rng.normal(size=(n, 12, 4, 4)))
    labels = rng.integers(0, 12, size=(n, 4, 4)).astype(np.int64)
    leads = rng.integers(0, n_lead, size=n).astype(np.int64)
    return reliability_table(probs, labels, leads, RateBinning(), ConfidenceBinning(20)), probs, labels, leads


def test_diagram_row_count_and_order():
    table, *_ = _random_table()
    rows = diagram_export(table)
    assert len(rows) == 11 * 2 * 20
    keys = [(r[0], r[1], r[2]) for r in rows]
    assert keys == sorted(keys)


def test_diagram_empty_cells_blank():
    table = _table_from_cells({(0, 0, 16): (10, 0.82, 0.6)})
    rows = diagram_export(table)
    assert len(rows) == 20
    empty = [r for r in rows if r[4] == 0]
    assert all(r[5] is None and r[6] is None and r[7] is None for r in empty)
    full = [r for r in rows if r[4] > 0]
    assert len(full) == 1 and full[0][7] == pytest.approx(0.22, abs=1e-15)


def test_diagram_abs_gap_reaggregates_to_etce():
    table, *_ = _random_table()
    rows = diagram_export(table)
    scores = etce(table)
    for lead in range(table.n_lead_times):
        per_thresh = []
        for t, thr in enumerate(table.thresholds_mm_per_h):
            gaps = [r[7] for r in rows if r[0] == thr and r[1] == lead and r[4] > 0]
            if gaps:
                per_thresh.append(sum(gaps) / len(gaps))
        recomputed = sum(per_thresh) / len(per_thresh)
        assert recomputed == pytest.approx(scores.per_lead[lead], abs=1e-12)


def test_diagram_csv_roundtrip(tmp_path):
    table, *_ = _random_table()
    rows = diagram_export(table, threshold=1.5)
    path = tmp_path / "d.csv"
    metrics.write_diagram_csv(rows, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == metrics.DIAGRAM_CSV_HEADER
    assert len(lines) == 1 + 2 * 20
    first = lines[1].split(",")
    assert float(first[0]) == 1.5


def test_report_json_schema():
    table, probs, labels, leads = _random_table()
    report = metrics.compute_report(probs, labels, leads)
    doc = report.to_json_dict()
    assert doc["schema"] == "nowcal-report-v1"
    assert set(doc) == {"schema", "metadata", "ece", "sce", "etce", "f1_at_threshold", "bin_counts"}
    for key in ("ece", "sce", "etce", "f1_at_threshold"):
        assert set(doc[key]) == {"per_lead_time", "average"}
        assert len(doc[key]["per_lead_time"]) == 2
    md = doc["metadata"]
    assert md["confidence_bins"] == 20
    assert md["thresholds_mm_h"] == list(RateBinning().thresholds)
    assert np.asarray(doc["bin_counts"]).shape == (11, 2, 20)

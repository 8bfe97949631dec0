"""Acceptance suite: one test per criterion, printing one line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
PASS lines with the measured values. Shared datasets and fitted calibrators
are module-scoped fixtures so each expensive artifact is built once.
"""

import json
import time

import numpy as np
import pytest

from nowcal import calibrators, diffnet, metrics, synth, tensorio
from nowcal.cli import main as cli_main
from nowcal.metrics import ConfidenceBinning, RateBinning, ReliabilityTable

B20 = ConfidenceBinning(20)


def _etce_avg(probs, labels, leads):
    table = metrics.reliability_table(probs, labels, leads, RateBinning(), B20)
    return metrics.etce(table).average


def _probs64(logits):
    return metrics.class_probabilities(logits.astype(np.float64))


def _report(line):
    print(f"\n[acceptance] {line}")


# ---------------------------------------------------------------------------
# Shared artifacts
# ---------------------------------------------------------------------------

def _scenario(seed, distortion=None, n=2000, **kw):
    return synth.SynthScenario(
        n_samples=n, height=16, width=16, n_classes=12, n_lead_times=6,
        distortion=distortion or synth.Distortion(), seed=seed, **kw,
    )


@pytest.fixture(scope="module")
def ds_none_42():
    start = time.time()
    data = synth.generate(_scenario(42))
    return data, time.time() - start


@pytest.fixture(scope="module")
def ds_tau05_42():
    return synth.generate(_scenario(42, synth.Distortion("global", tau=0.5)))


@pytest.fixture(scope="module")
def ts_bundle(ds_tau05_42):
    logits, labels, leads = ds_tau05_42
    return calibrators.fit_temperature(logits, labels, leads)


@pytest.fixture(scope="module")
def planted_fits():
    start = time.time()
    fit_sc = _scenario(101, synth.Distortion("planted"))
    eval_sc = _scenario(202, synth.Distortion("planted"))
    lg_f, lb_f, ld_f = synth.generate(fit_sc)
    lg_e, lb_e, ld_e = synth.generate(eval_sc)
    ss = calibrators.fit_ss(lg_f, lb_f, ld_f, seed=7)
    ts = calibrators.fit_temperature(lg_f, lb_f, ld_f)
    return {
        "eval": (lg_e, lb_e, ld_e),
        "ss": ss,
        "ts": ts,
        "runtime": time.time() - start,
    }


#: per-lead-time temperature schedule scenario for the conditioning test;
#: the wider sharpness range keeps per-pixel temperature inference ambiguous
SCHEDULE_SHARPNESS = 1.3
LTS_EPOCHS = 30


@pytest.fixture(scope="module")
def schedule_fits():
    fit_sc = _scenario(301, synth.Distortion("schedule"), n=900, sharpness_log_range=SCHEDULE_SHARPNESS)
    eval_sc = _scenario(302, synth.Distortion("schedule"), n=2400, sharpness_log_range=SCHEDULE_SHARPNESS)
    lg_f, lb_f, ld_f = synth.generate(fit_sc)
    data_eval = synth.generate(eval_sc)
    results = []
    bundles = {}
    for seed in (1, 2, 3):
        bu = calibrators.fit_lts(lg_f, lb_f, ld_f, conditioned=False, epochs=LTS_EPOCHS, seed=seed)
        bc = calibrators.fit_lts(lg_f, lb_f, ld_f, conditioned=True, epochs=LTS_EPOCHS, seed=seed)
        eu = _etce_avg(calibrators.apply_calibrator(bu, data_eval[0], data_eval[2]).astype(np.float64),
                       data_eval[1], data_eval[2])
        ec = _etce_avg(calibrators.apply_calibrator(bc, data_eval[0], data_eval[2]).astype(np.float64),
                       data_eval[1], data_eval[2])
        results.append((seed, eu, ec))
        bundles[seed] = bc
    return {"results": results, "lts_bundle": bundles[1]}


# ---------------------------------------------------------------------------
# 1. Hand-oracle exactness
# ---------------------------------------------------------------------------

def test_criterion_1_hand_oracles():
    probs = np.zeros((4, 2, 1, 1))
    probs[:, 0, 0, 0] = [0.9, 0.8, 0.6, 0.55]
    probs[:, 1, 0, 0] = [0.1, 0.2, 0.4, 0.45]
    labels = np.array([0, 1, 0, 0], dtype=np.int64).reshape(4, 1, 1)
    ece_val = metrics.ece(probs, labels, np.zeros(4, np.int64), ConfidenceBinning(4)).average

    def table_with(cells):
        counts = np.zeros((1, 1, 20), dtype=np.int64)
        conf_sum = np.zeros((1, 1, 20))
        event_sum = np.zeros((1, 1, 20))
        for b, (n, conf, obs) in cells.items():
            counts[0, 0, b], conf_sum[0, 0, b], event_sum[0, 0, b] = n, conf * n, obs * n
        return ReliabilityTable((1.0,), 1, 20, counts, conf_sum, event_sum)

    etce_single = metrics.etce(table_with({16: (10, 0.82, 0.6)})).average
    etce_double = metrics.etce(table_with({2: (4, 0.1, 0.25), 18: (4, 0.9, 0.5)})).average

    _report(f"1 ece={ece_val!r} etce_single={etce_single!r} etce_double={etce_double!r}")
    assert ece_val == pytest.approx(0.3875, abs=1e-15)
    assert etce_single == pytest.approx(0.22, abs=1e-15)
    assert etce_double == pytest.approx(0.275, abs=1e-15)


# ---------------------------------------------------------------------------
# 2. Calibration by construction
# ---------------------------------------------------------------------------

def test_criterion_2_calibration_by_construction(ds_none_42):
    (logits, labels, leads), gen_time = ds_none_42
    start = time.time()
    score = _etce_avg(_probs64(logits), labels, leads)
    runtime = gen_time + (time.time() - start)
    _report(f"2 etce(none, seed 42)={score:.5f} < 0.03 (runtime {runtime:.1f}s < 60s)")
    assert score < 0.03
    assert runtime < 60.0


# ---------------------------------------------------------------------------
# 3. Monotone damage
# ---------------------------------------------------------------------------

def test_criterion_3_monotone_damage(ds_none_42, ds_tau05_42):
    (lg0, lb0, ld0), _ = ds_none_42
    e_none = _etce_avg(_probs64(lg0), lb0, ld0)
    lg8, lb8, ld8 = synth.generate(_scenario(42, synth.Distortion("global", tau=0.8)))
    e_08 = _etce_avg(_probs64(lg8), lb8, ld8)
    lg5, lb5, ld5 = ds_tau05_42
    e_05 = _etce_avg(_probs64(lg5), lb5, ld5)
    _report(f"3 etce: none={e_none:.5f} < tau0.8={e_08:.5f} < tau0.5={e_05:.5f}; "
            f"ratio={e_05 / e_none:.2f} >= 3")
    assert e_none < e_08 < e_05
    assert e_05 >= 3.0 * e_none


# ---------------------------------------------------------------------------
# 4. Temperature recovery
# ---------------------------------------------------------------------------

def test_criterion_4_temperature_recovery(ts_bundle):
    t_hat = ts_bundle.calibrator.temperature
    lg_h, lb_h, ld_h = synth.generate(_scenario(4242, synth.Distortion("global", tau=0.5)))
    post = _etce_avg(
        calibrators.apply_temperature(ts_bundle.calibrator, lg_h).astype(np.float64), lb_h, ld_h
    )
    lg_b, lb_b, ld_b = synth.generate(_scenario(4242))
    baseline = _etce_avg(_probs64(lg_b), lb_b, ld_b)
    _report(f"4 T_hat={t_hat:.4f} in [1.8,2.2]; post-TS etce={post:.5f} <= "
            f"1.5*baseline={1.5 * baseline:.5f} (held-out seed 4242)")
    assert 1.8 <= t_hat <= 2.2
    assert post <= 1.5 * baseline


# ---------------------------------------------------------------------------
# 5. Selective scaling efficacy
# ---------------------------------------------------------------------------

def test_criterion_5_selective_scaling(planted_fits):
    lg_e, lb_e, ld_e = planted_fits["eval"]
    ss, ts = planted_fits["ss"], planted_fits["ts"]
    start = time.time()
    e_unc = _etce_avg(_probs64(lg_e), lb_e, ld_e)
    e_ss = _etce_avg(calibrators.apply_calibrator(ss, lg_e, ld_e).astype(np.float64), lb_e, ld_e)
    e_ts = _etce_avg(calibrators.apply_calibrator(ts, lg_e, ld_e).astype(np.float64), lb_e, ld_e)
    auc = calibrators.rank_auc(
        ss.calibrator.scores(lg_e, ld_e), lg_e.argmax(axis=1) != lb_e
    )
    runtime = planted_fits["runtime"] + (time.time() - start)
    red_ss = (e_unc - e_ss) / e_unc
    red_ts = (e_unc - e_ts) / e_unc
    _report(f"5 uncal={e_unc:.5f} ss={e_ss:.5f} ({red_ss:+.1%}) ts={e_ts:.5f} ({red_ts:+.1%}) "
            f"auc={auc:.3f} (runtime {runtime:.0f}s < 600s)")
    assert red_ss >= 0.15
    assert auc >= 0.8
    assert red_ts < red_ss
    assert runtime < 600.0


# ---------------------------------------------------------------------------
# 6. Lead-time conditioning value
# ---------------------------------------------------------------------------

def test_criterion_6_conditioning_value(schedule_fits):
    results = schedule_fits["results"]
    wins = sum(1 for _, eu, ec in results if ec <= eu)
    detail = "  ".join(f"seed{seed}: uncond={eu:.4f} cond={ec:.4f}" for seed, eu, ec in results)
    _report(f"6 conditioned <= unconditioned on {wins}/3 seeds ({detail})")
    assert wins >= 2


# ---------------------------------------------------------------------------
# 7. Argmax invariance
# ---------------------------------------------------------------------------

def test_criterion_7_argmax_invariance(ts_bundle, planted_fits, schedule_fits):
    rng = np.random.default_rng(777)
    logits = (rng.normal(size=(400, 12, 16, 16)) * 3).astype(np.float32)
    leads = rng.integers(0, 6, size=400).astype(np.int64)
    n_pixels = 400 * 16 * 16
    base = logits.argmax(axis=1)
    fitted = {
        "ts": ts_bundle,
        "lts": schedule_fits["lts_bundle"],
        "ss": planted_fits["ss"],
    }
    mismatches = {}
    for name, bundle in fitted.items():
        probs = calibrators.apply_calibrator(bundle, logits, leads)
        mismatches[name] = int((probs.argmax(axis=1) != base).sum())
    _report(f"7 argmax mismatches over {n_pixels} pixels: {mismatches}")
    assert all(v == 0 for v in mismatches.values())


# ---------------------------------------------------------------------------
# 8. Gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_8_gradient_correctness():
    rng = np.random.default_rng(55)
    z = rng.normal(size=(4, 12, 16, 16)).astype(np.float32)
    labels = rng.integers(0, 12, size=(4, 16, 16))
    leads = rng.integers(0, 6, size=4)
    lts_net = diffnet.build_lts_network(12, 6, conditioned=True, seed=5, zero_head=False)

    def lts_loss(n):
        return calibrators.lts_loss_and_gradients(n, z, z.astype(n.dtype), labels, leads)

    rep_lts = diffnet.finite_difference_check(
        lts_net, lts_loss, mask_fn=lambda n: diffnet.relu_signs(n, z, leads),
        rng=np.random.default_rng(1),
    )

    x = rng.normal(size=(64, 12)).astype(np.float32)
    leads_px = rng.integers(0, 6, size=64)
    y = rng.integers(0, 2, size=64).astype(np.float64)
    w = np.where(y > 0, 2.5, 0.8)
    ss_net = diffnet.build_ss_classifier(12, 6, seed=6, zero_head=False)

    def ss_loss(n):
        return diffnet.loss_and_gradients(
            n, x, y, "binary-cross-entropy", lead_times=leads_px, weights=w
        )

    rep_ss = diffnet.finite_difference_check(
        ss_net, ss_loss, mask_fn=lambda n: diffnet.relu_signs(n, x, leads_px),
        rng=np.random.default_rng(2),
    )
    _report(f"8 max rel grad err: lts={rep_lts['max_rel_err']:.2e} ss={rep_ss['max_rel_err']:.2e} < 1e-4")
    assert rep_lts["max_rel_err"] < 1e-4
    assert rep_ss["max_rel_err"] < 1e-4


# ---------------------------------------------------------------------------
# 9. Determinism and round-trips
# ---------------------------------------------------------------------------

def _bundle_files(d):
    return sorted(p for p in d.rglob("*") if p.is_file() and p.name != "run_manifest.json")


def test_criterion_9_determinism_and_roundtrips(tmp_path):
    # (a) repeated cmd_synth: byte-identical artifacts
    synth_args = ["synth", "--samples", "80", "--height", "8", "--width", "8",
                  "--distortion", "planted", "--seed", "11"]
    d1, d2 = tmp_path / "s1", tmp_path / "s2"
    assert cli_main(synth_args + ["--out", str(d1)]) == 0
    assert cli_main(synth_args + ["--out", str(d2)]) == 0
    for name in ("logits.fct1", "labels.fct1", "lead_times.fct1", "scenario.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    # (b) repeated cmd_fit: byte-identical bundles for every method
    for method, extra in (("ts", []), ("lts", ["--epochs", "2"]), ("ss", ["--epochs", "2"])):
        b1, b2 = tmp_path / f"{method}1", tmp_path / f"{method}2"
        fit_args = ["fit", "--data", str(d1), "--method", method, "--seed", "3"] + extra
        assert cli_main(fit_args + ["--out", str(b1)]) == 0
        assert cli_main(fit_args + ["--out", str(b2)]) == 0
        for f1 in _bundle_files(b1):
            f2 = b2 / f1.relative_to(b1)
            assert f1.read_bytes() == f2.read_bytes(), f"{method}: {f1.name} differs"

    # (c) save -> load -> apply is bit-exact for every method
    logits = tensorio.read_tensor(d1 / "logits.fct1")
    leads = tensorio.read_tensor(d1 / "lead_times.fct1")
    for method in ("ts", "lts", "ss"):
        bundle = calibrators.load_calibrator(tmp_path / f"{method}1")
        reloaded_dir = tmp_path / f"{method}_resaved"
        calibrators.save_calibrator(bundle, reloaded_dir)
        again = calibrators.load_calibrator(reloaded_dir)
        a = calibrators.apply_calibrator(bundle, logits, leads)
        b = calibrators.apply_calibrator(again, logits, leads)
        assert np.array_equal(a, b)

    # (d) FCT1 round-trip over 1000 randomized tensors
    rng = np.random.default_rng(2024)
    path = tmp_path / "t.fct1"
    for _ in range(1000):
        ndim = int(rng.integers(1, 5))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
        dtype = np.float32 if rng.integers(2) else np.int64
        arr = np.frombuffer(
            rng.bytes(int(np.prod(shape)) * np.dtype(dtype).itemsize), dtype=dtype
        ).reshape(shape)
        tensorio.write_tensor(arr, path)
        back = tensorio.read_tensor(path)
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    _report("9 determinism: synth/fit byte-identical; save/load bit-exact; 1000 FCT1 round-trips")


# ---------------------------------------------------------------------------
# 10. Diagram schema
# ---------------------------------------------------------------------------

def test_criterion_10_diagram_schema(tmp_path):
    d = tmp_path / "ds"
    assert cli_main(["synth", "--samples", "400", "--height", "8", "--width", "8",
                     "--distortion", "temp:0.7", "--seed", "77", "--out", str(d)]) == 0
    report_path = tmp_path / "report.json"
    csv_path = tmp_path / "diagram.csv"
    assert cli_main(["eval", "--data", str(d), "--report", str(report_path)]) == 0
    assert cli_main(["diagram", "--data", str(d), "--out", str(csv_path)]) == 0

    lines = csv_path.read_text().strip().split("\n")
    assert lines[0] == metrics.DIAGRAM_CSV_HEADER
    n_rows = len(lines) - 1
    assert n_rows == 11 * 6 * 20

    # re-aggregate abs_gap: uniform weights over non-empty bins, mean over
    # thresholds, one score per lead time
    by_cell: dict = {}
    for line in lines[1:]:
        parts = line.split(",")
        thr, lead, count = float(parts[0]), int(parts[1]), int(parts[4])
        if count > 0:
            by_cell.setdefault((thr, lead), []).append(float(parts[7]))
    report = json.loads(report_path.read_text())
    per_lead = report["etce"]["per_lead_time"]
    worst = 0.0
    for lead in range(6):
        per_thresh = [sum(g) / len(g) for (thr, l), g in sorted(by_cell.items()) if l == lead]
        recomputed = sum(per_thresh) / len(per_thresh)
        worst = max(worst, abs(recomputed - per_lead[lead]))
    _report(f"10 rows={n_rows} (= 11*6*20), max |csv-reaggregated - reported etce| = {worst:.2e} < 1e-12")
    assert worst < 1e-12

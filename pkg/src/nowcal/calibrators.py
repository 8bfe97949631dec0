"""Post-hoc calibrators with a uniform fit / apply / save / load contract.

Three methods, all of which rescale each pixel's logit vector by a positive
scalar and therefore never change the per-pixel argmax:

* global temperature scaling -- one temperature for the whole dataset,
  fitted by 1-D search on the negative log-likelihood;
* local temperature scaling -- a per-pixel temperature map regressed from
  the logit field by a small hierarchical CNN, optionally conditioned on
  lead time;
* selective scaling -- a per-pixel misprediction classifier on the logit
  vector; pixels it flags get softened by one shared temperature > 1.

Networks consume standardized logits (per-channel mean/std frozen from the
fit split and stored with the calibrator); raw logits are what gets
rescaled. Fitting is single-threaded and deterministic given the seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffnet, kernels, tensorio

TEMPERATURE_BOUNDS = (0.05, 20.0)
_GOLDEN_TOL = 1e-4
_STD_FLOOR = 1e-3


class NoMispredictionsError(ValueError):
    """The fit data contains no mispredicted pixels; nothing to calibrate."""


class BundleFormatError(ValueError):
    """A calibrator bundle on disk is malformed or from an unknown version."""


@dataclass
class GlobalTemperature:
    temperature: float

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class LtsRegressor:
    network: diffnet.Network
    input_mean: np.ndarray  # [K] float32
    input_std: np.ndarray  # [K] float32

    @property
    def conditioned(self) -> bool:
        return self.network.conditioned

    def temperature_map(self, logits: np.ndarray, lead_times: np.ndarray) -> np.ndarray:
        """Per-pixel temperatures [N, H, W]; positive by construction (exp)."""
        z = (logits - self.input_mean[None, :, None, None]) / self.input_std[None, :, None, None]
        t = self.network.forward(z.astype(np.float32), lead_times)
        return np.exp(t[:, 0])


@dataclass
class SelectiveScaler:
    classifier: diffnet.Network
    input_mean: np.ndarray
    input_std: np.ndarray
    flag_threshold: float
    temperature_raw: float  # T = 1 + softplus(raw) > 1 always

    @property
    def temperature(self) -> float:
        return 1.0 + float(np.logaddexp(0.0, self.temperature_raw))

    def scores(self, logits: np.ndarray, lead_times: np.ndarray) -> np.ndarray:
        """Misprediction probability per pixel, [N, H, W] in (0, 1)."""
        n, k, h, w = logits.shape
        z = (logits - self.input_mean[None, :, None, None]) / self.input_std[None, :, None, None]
        rows = z.transpose(0, 2, 3, 1).reshape(-1, k).astype(np.float32)
        leads = np.repeat(np.asarray(lead_times, dtype=np.int64), h * w)
        s = self.classifier.forward(rows, leads)[:, 0]
        return s.reshape(n, h, w)

    def flags(self, logits: np.ndarray, lead_times: np.ndarray) -> np.ndarray:
        return self.scores(logits, lead_times) > self.flag_threshold


@dataclass
class CalibratorBundle:
    """A fitted calibrator plus its fit metadata; what save/load round-trips."""

    method: str  # "ts" | "lts" | "ss"
    calibrator: GlobalTemperature | LtsRegressor | SelectiveScaler
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Shared numerics
# ---------------------------------------------------------------------------

def _golden_section_min(f, lo: float, hi: float, tol: float) -> float:
    """Deterministic golden-section minimizer on [lo, hi].

    Ties keep the lower interval, so a flat stretch of the objective (e.g.
    an NLL at the float floor) resolves toward the lower bound.
    """
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def _pixel_rows(logits: np.ndarray) -> np.ndarray:
    n, k, h, w = logits.shape
    return np.ascontiguousarray(logits.transpose(0, 2, 3, 1).reshape(-1, k))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _channel_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0, dtype=np.float64)
    std = np.maximum(rows.std(axis=0, dtype=np.float64), _STD_FLOOR)
    return mean.astype(np.float32), std.astype(np.float32)


def rank_auc(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mann-Whitney AUC of scores against binary targets (midranks for ties)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=bool).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Global temperature scaling
# ---------------------------------------------------------------------------

def fit_temperature(
    logits: np.ndarray,
    labels: np.ndarray,
    lead_times: np.ndarray | None = None,
    bounds: tuple[float, float] = TEMPERATURE_BOUNDS,
    tol: float = _GOLDEN_TOL,
) -> CalibratorBundle:
    """Fit one temperature by golden-section search on log T.

    Minimizes the mean softmax cross-entropy of z / T over all pixels; the
    1-D problem is smooth and unimodal in practice. A degenerate dataset
    with a single class (K = 1) gets a warning and T = 1.
    """
    del lead_times  # one temperature for all lead times
    k = logits.shape[1]
    rows = _pixel_rows(logits)
    y = np.ascontiguousarray(labels.reshape(-1).astype(np.int64))
    if k < 2:
        warnings.warn("single-class logits: temperature is unidentifiable, using T = 1")
        return CalibratorBundle("ts", GlobalTemperature(1.0), {"degenerate": True})

    def nll_at_log_t(log_t: float) -> float:
        return kernels.mean_nll(rows, y, float(np.exp(-log_t)))

    log_t = _golden_section_min(nll_at_log_t, np.log(bounds[0]), np.log(bounds[1]), tol)
    t_hat = float(np.exp(log_t))
    meta = {
        "n_pixels": int(rows.shape[0]),
        "search_bounds": list(bounds),
        "final_nll": nll_at_log_t(log_t),
        "temperature": t_hat,
    }
    return CalibratorBundle("ts", GlobalTemperature(t_hat), meta)


def apply_temperature(cal: GlobalTemperature, logits: np.ndarray) -> np.ndarray:
    """softmax(z / T) per pixel; argmax identical to the uncalibrated argmax."""
    scaled = logits / np.asarray(cal.temperature, dtype=logits.dtype)
    e = np.exp(scaled - scaled.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Local temperature scaling
# ---------------------------------------------------------------------------

def lts_loss_and_gradients(
    network: diffnet.Network,
    raw_logits: np.ndarray,
    norm_logits: np.ndarray,
    labels: np.ndarray,
    lead_times: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """NLL of softmax(z / T(x)) with T = exp(network output), plus gradients."""
    n, k, h, w = raw_logits.shape
    t_map, ctx = network.forward_with_caches(norm_logits, lead_times)
    if np.isnan(t_map).any():
        raise diffnet.DivergenceError("NaN in temperature map")
    z = raw_logits.astype(network.dtype, copy=False)
    s = z * np.exp(-t_map)
    rows = s.transpose(0, 2, 3, 1).reshape(-1, k)
    loss, d_rows = diffnet.softmax_cross_entropy(rows, labels.reshape(-1))
    ds = d_rows.reshape(n, h, w, k).transpose(0, 3, 1, 2)
    # dL/dt = sum_k dL/ds_k * (-s_k)
    dt = -(ds * s).sum(axis=1, keepdims=True).astype(network.dtype)
    return loss, network.backward(dt, ctx)


def fit_lts(
    logits: np.ndarray,
    labels: np.ndarray,
    lead_times: np.ndarray,
    conditioned: bool = True,
    epochs: int = 30,
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 64,
) -> CalibratorBundle:
    """Train the per-pixel temperature regressor by NLL minimization.

    Deterministic given the seed: seeded init, seeded epoch shuffling,
    sequential accumulation. Raises DivergenceError (with the epoch index)
    if the loss goes NaN.
    """
    dims = tensorio.validate_dataset(logits, labels, lead_times)
    if dims.height % 4 or dims.width % 4:
        raise ValueError(f"LTS needs H and W divisible by 4, got {dims.height}x{dims.width}")
    mean, std = _channel_stats(_pixel_rows(logits))
    norm = ((logits - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)

    net = diffnet.build_lts_network(dims.n_classes, dims.n_lead_times, conditioned, seed)
    state = diffnet.AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    params = net.parameters()
    last_epoch_loss = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(dims.n_samples)
        losses = []
        for start in range(0, dims.n_samples, batch_size):
            idx = order[start : start + batch_size]
            try:
                loss, grads = lts_loss_and_gradients(
                    net, logits[idx], norm[idx], labels[idx], lead_times[idx]
                )
            except diffnet.DivergenceError as exc:
                raise diffnet.DivergenceError(f"epoch {epoch}: {exc}") from exc
            if np.isnan(loss):
                raise diffnet.DivergenceError(f"epoch {epoch}: NaN loss")
            diffnet.optimizer_step(state, params, grads)
            losses.append(loss)
        last_epoch_loss = float(np.mean(losses))

    cal = LtsRegressor(net, mean, std)
    meta = {
        "n_samples": dims.n_samples,
        "n_pixels": dims.n_samples * dims.height * dims.width,
        "conditioned": conditioned,
        "epochs": epochs,
        "seed": seed,
        "lr": lr,
        "batch_size": batch_size,
        "final_loss": last_epoch_loss,
        "n_parameters": net.n_parameters(),
    }
    return CalibratorBundle("lts", cal, meta)


def apply_lts(cal: LtsRegressor, logits: np.ndarray, lead_times: np.ndarray) -> np.ndarray:
    """softmax(z / T(x)) with the fitted per-pixel temperature map."""
    out = np.empty_like(logits)
    for start in range(0, logits.shape[0], 256):
        sl = slice(start, start + 256)
        t = cal.temperature_map(logits[sl], lead_times[sl])[:, None]
        scaled = logits[sl] / t.astype(logits.dtype)
        e = np.exp(scaled - scaled.max(axis=1, keepdims=True))
        out[sl] = e / e.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# Selective scaling
# ---------------------------------------------------------------------------

def fit_scaling_temperature_raw(logit_rows: np.ndarray, label_rows: np.ndarray) -> float:
    """NLL-fit the softplus preimage of a > 1 temperature over flagged pixels."""
    z = np.ascontiguousarray(logit_rows)
    y = np.ascontiguousarray(label_rows)

    def nll_at_raw(a: float) -> float:
        t = 1.0 + float(np.logaddexp(0.0, a))
        return kernels.mean_nll(z, y, 1.0 / t)

    return _golden_section_min(nll_at_raw, -12.0, 19.0, _GOLDEN_TOL)


def fit_ss(
    logits: np.ndarray,
    labels: np.ndarray,
    lead_times: np.ndarray,
    epochs: int = 12,
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 8192,
    split_ratio: int = 111,
) -> CalibratorBundle:
    """Fit the misprediction classifier, flag threshold, and temperature.

    Samples are permuted (seeded) and split ~110:1 -- the large split trains
    the classifier with class-weighted BCE (weights inverse to class
    frequency), the small split picks the flag threshold by F1 of
    misprediction detection and fits the shared temperature by NLL over the
    flagged pixels, constrained > 1 via 1 + softplus.
    """
    dims = tensorio.validate_dataset(logits, labels, lead_times)
    n, k, h, w = dims.n_samples, dims.n_classes, dims.height, dims.width
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_small = max(1, round(n / split_ratio))
    if n - n_small < 1:
        raise ValueError(f"dataset too small to split: {n} samples")
    small_idx, large_idx = perm[:n_small], perm[n_small:]

    miss_flat = (logits.argmax(axis=1) != labels).reshape(-1)
    rows = _pixel_rows(logits)
    leads_flat = np.repeat(lead_times, h * w)
    labels_flat = labels.reshape(-1).astype(np.int64)

    def take(idx):
        sel = np.zeros(n, dtype=bool)
        sel[idx] = True
        px = np.repeat(sel, h * w)
        return rows[px], miss_flat[px], leads_flat[px], labels_flat[px]

    x_large, y_large, l_large, _ = take(large_idx)
    x_small, y_small, l_small, lab_small = take(small_idx)

    n_miss = int(y_large.sum())
    if n_miss == 0:
        raise NoMispredictionsError("no mispredictions in the classifier split")
    if n_miss == y_large.size:
        raise NoMispredictionsError("every pixel mispredicted in the classifier split")
    if not y_small.any():
        raise NoMispredictionsError("no mispredictions in the temperature split")

    mean, std = _channel_stats(x_large)
    xn_large = ((x_large - mean) / std).astype(np.float32)

    # inverse-frequency class weights, normalized to mean 1
    m = y_large.size
    w_miss = m / (2.0 * n_miss)
    w_hit = m / (2.0 * (m - n_miss))
    weights = np.where(y_large, w_miss, w_hit)

    net = diffnet.build_ss_classifier(k, dims.n_lead_times, seed)
    state = diffnet.AdamState(lr=lr)
    params = net.parameters()
    y_f = y_large.astype(np.float64)
    last_epoch_loss = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(m)
        losses = []
        for start in range(0, m, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = diffnet.loss_and_gradients(
                net, xn_large[idx], y_f[idx], "binary-cross-entropy",
                lead_times=l_large[idx], weights=weights[idx],
            )
            if np.isnan(loss):
                raise diffnet.DivergenceError(f"epoch {epoch}: NaN loss")
            diffnet.optimizer_step(state, params, grads)
            losses.append(loss)
        last_epoch_loss = float(np.mean(losses))

    # flag threshold: best F1 of misprediction detection on the small split
    xn_small = ((x_small - mean) / std).astype(np.float32)
    scores_small = net.forward(xn_small, l_small)[:, 0]
    best_theta, best_f1 = 0.5, -1.0
    for theta in np.linspace(0.01, 0.99, 99):
        flagged = scores_small > theta
        tp = int(np.count_nonzero(flagged & y_small))
        denom = 2 * tp + int(np.count_nonzero(flagged & ~y_small)) + int(
            np.count_nonzero(~flagged & y_small)
        )
        f1 = 2 * tp / denom if denom else 0.0
        if f1 > best_f1 + 1e-12:
            best_f1, best_theta = f1, float(theta)

    # shared temperature fitted by NLL over the pixels the classifier flags
    flagged_small = scores_small > best_theta
    if not flagged_small.any():
        flagged_small = y_small  # fall back to true mispredictions
    raw = fit_scaling_temperature_raw(x_small[flagged_small], lab_small[flagged_small])
    cal = SelectiveScaler(net, mean, std, best_theta, float(raw))
    meta = {
        "n_samples": n,
        "split": {"classifier_samples": int(n - n_small), "temperature_samples": int(n_small)},
        "epochs": epochs,
        "seed": seed,
        "lr": lr,
        "batch_size": batch_size,
        "final_loss": last_epoch_loss,
        "class_weights": {"misprediction": w_miss, "correct": w_hit},
        "flag_threshold": best_theta,
        "flag_f1_small_split": best_f1,
        "temperature": cal.temperature,
        "n_flagged_small_split": int(np.count_nonzero(flagged_small)),
        "n_parameters": net.n_parameters(),
    }
    return CalibratorBundle("ss", cal, meta)


def apply_ss(cal: SelectiveScaler, logits: np.ndarray, lead_times: np.ndarray) -> np.ndarray:
    """Flagged pixels get softmax(z / T_ss), the rest plain softmax(z)."""
    return apply_ss_with_flags(cal, logits, cal.flags(logits, lead_times))


def apply_ss_with_flags(
    cal: SelectiveScaler, logits: np.ndarray, flags: np.ndarray
) -> np.ndarray:
    """Apply selective scaling with externally supplied flags (e.g. an oracle)."""
    plain = apply_temperature(GlobalTemperature(1.0), logits)
    scaled = apply_temperature(GlobalTemperature(cal.temperature), logits)
    return np.where(flags[:, None], scaled, plain)


# ---------------------------------------------------------------------------
# Uniform apply + bundle serialization
# ---------------------------------------------------------------------------

def apply_calibrator(
    bundle: CalibratorBundle, logits: np.ndarray, lead_times: np.ndarray
) -> np.ndarray:
    if bundle.method == "ts":
        return apply_temperature(bundle.calibrator, logits)
    if bundle.method == "lts":
        return apply_lts(bundle.calibrator, logits, lead_times)
    if bundle.method == "ss":
        return apply_ss(bundle.calibrator, logits, lead_times)
    raise ValueError(f"unknown calibrator method {bundle.method!r}")


_FORMAT = "nowcal-calibrator-v1"


def save_calibrator(bundle: CalibratorBundle, dir_path: str | Path) -> None:
    """Write a bundle directory: manifest.json plus FCT1 parameter files."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    doc = {"format": _FORMAT, "method": bundle.method, "metadata": bundle.metadata}
    cal = bundle.calibrator
    if bundle.method == "ts":
        doc["temperature"] = float(format(cal.temperature, ".17g"))
    elif bundle.method == "lts":
        diffnet.save_network(cal.network, d / "network")
        tensorio.write_tensor(cal.input_mean, d / "input_mean.fct1")
        tensorio.write_tensor(cal.input_std, d / "input_std.fct1")
    elif bundle.method == "ss":
        diffnet.save_network(cal.classifier, d / "network")
        tensorio.write_tensor(cal.input_mean, d / "input_mean.fct1")
        tensorio.write_tensor(cal.input_std, d / "input_std.fct1")
        doc["flag_threshold"] = float(format(cal.flag_threshold, ".17g"))
        doc["temperature_raw"] = float(format(cal.temperature_raw, ".17g"))
    else:
        raise ValueError(f"unknown calibrator method {bundle.method!r}")
    with open(d / "manifest.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_calibrator(dir_path: str | Path) -> CalibratorBundle:
    """Inverse of save_calibrator, bit-exact."""
    d = Path(dir_path)
    try:
        with open(d / "manifest.json") as f:
            doc = json.load(f)
    except FileNotFoundError as exc:
        raise BundleFormatError(f"no manifest.json in {d}") from exc
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"corrupt manifest in {d}: {exc}") from exc
    if doc.get("format") != _FORMAT:
        raise BundleFormatError(f"unsupported bundle format {doc.get('format')!r}")
    method = doc.get("method")
    meta = doc.get("metadata", {})
    if method == "ts":
        return CalibratorBundle("ts", GlobalTemperature(doc["temperature"]), meta)
    if method in ("lts", "ss"):
        try:
            net = diffnet.load_network(d / "network")
            mean = tensorio.read_tensor(d / "input_mean.fct1")
            std = tensorio.read_tensor(d / "input_std.fct1")
        except (tensorio.TensorIOError, ValueError, KeyError) as exc:
            raise BundleFormatError(f"bundle {d} is incomplete: {exc}") from exc
        if method == "lts":
            return CalibratorBundle("lts", LtsRegressor(net, mean, std), meta)
        return CalibratorBundle(
            "ss",
            SelectiveScaler(net, mean, std, doc["flag_threshold"], doc["temperature_raw"]),
            meta,
        )
    raise BundleFormatError(f"unknown calibrator method {method!r}")

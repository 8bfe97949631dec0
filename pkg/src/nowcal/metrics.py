"""Calibration metrics for multiclass gridded forecasts with ordered classes.

Scores are computed per lead time (lead time is a categorical group) and
averaged uniformly over lead times:

* ``ece``  -- sample-weighted binned gap between top-class confidence and
  accuracy.
* ``sce``  -- the same gap computed per class and averaged over classes.
* ``etce`` -- gap between predicted exceedance probability and observed
  exceedance frequency, uniformly weighted over non-empty confidence bins
  and averaged over rate thresholds.
* ``f1_at_threshold`` -- F1 of the binary exceedance event at one rate
  threshold, predicting positive when the exceedance probability is > 0.5.

Exceedance thresholds are exactly the K-1 rate-bin edges: the top class is
open-ended ("10+"), so there is no exceedance above it.

All accumulations run in float64; the canonical result is the sequential
reduction in pixel order (sample-major, then row-major within the grid).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels

#: 12-class rate discretization from 0.2 mm/h up to the open "10+" class.
#: The ladder deliberately contains the 1.0 and 1.5 mm/h verification
#: thresholds used in reports and diagrams.
DEFAULT_RATE_EDGES = (0.2, 0.4, 0.6, 0.8, 1.0, 1.5, 2.0, 3.0, 5.0, 7.5, 10.0)

DIAGRAM_CSV_HEADER = "threshold_mm_h,lead_time,bin_lo,bin_hi,count,mean_conf,obs_freq,abs_gap"


@dataclass(frozen=True)
class RateBinning:
    """Discretization of precipitation rate into K ordered classes.

    ``edges_mm_per_h`` are the K-1 ascending positive class boundaries;
    class 0 is everything below the first edge, the top class is open.
    """

    edges_mm_per_h: tuple[float, ...] = DEFAULT_RATE_EDGES

    def __post_init__(self) -> None:
        e = self.edges_mm_per_h
        if len(e) < 1 or any(x <= 0 for x in e) or any(a >= b for a, b in zip(e, e[1:])):
            raise ValueError(f"rate edges must be strictly ascending and positive, got {e}")

    @property
    def n_classes(self) -> int:
        return len(self.edges_mm_per_h) + 1

    @property
    def thresholds(self) -> tuple[float, ...]:
        """Exceedance thresholds: exactly the class edges."""
        return self.edges_mm_per_h

    def threshold_index(self, rate_mm_per_h: float) -> int:
        for i, e in enumerate(self.edges_mm_per_h):
            if np.isclose(rate_mm_per_h, e, rtol=1e-9, atol=0.0):
                return i
        raise ValueError(
            f"{rate_mm_per_h} mm/h is not a rate-bin edge; valid thresholds: {self.edges_mm_per_h}"
        )


@dataclass(frozen=True)
class ConfidenceBinning:
    """B evenly spaced confidence bins over [0, 1].

    Bin b covers [b/B, (b+1)/B), except the last bin which is closed so
    that a confidence of exactly 1.0 is representable.
    """

    n_bins: int = 20

    def __post_init__(self) -> None:
        if self.n_bins < 2:
            raise ValueError(f"need at least 2 confidence bins, got {self.n_bins}")

    def bin_edges(self, b: int) -> tuple[float, float]:
        return b / self.n_bins, (b + 1) / self.n_bins


def assign_bin(confidence: np.ndarray | float, binning: ConfidenceBinning) -> np.ndarray:
    """Map confidences in [0, 1] to bin indices (half-open bins, last closed)."""
    c = np.asarray(confidence, dtype=np.float64)
    if c.size and (c.min() < 0.0 or c.max() > 1.0):
        raise ValueError(f"confidence outside [0, 1]: range [{c.min()}, {c.max()}]")
    idx = np.floor(c * binning.n_bins).astype(np.int64)
    return np.minimum(idx, binning.n_bins - 1)


class LeadScores(NamedTuple):
    """A score per lead time plus the uniform average over lead times."""

    per_lead: np.ndarray
    average: float


def _lead_average(per_lead: np.ndarray) -> LeadScores:
    avg = float(np.nanmean(per_lead)) if np.any(np.isfinite(per_lead)) else float("nan")
    return LeadScores(per_lead, avg)


def class_probabilities(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the class axis of [N, K, H, W] logits.

    Numerically stabilized by max subtraction; raises on NaN/Inf input.
    """
    if not np.isfinite(logits).all():
        raise ValueError("logits contain NaN or Inf")
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def exceedance_probabilities(probs: np.ndarray, binning: RateBinning) -> np.ndarray:
    """Probability that the rate exceeds each class edge: [N, K-1, H, W].

    Channel k sums the class probabilities strictly above edge k; values are
    non-increasing in k.
    """
    k = binning.n_classes
    if probs.shape[1] != k:
        raise ValueError(f"probs have {probs.shape[1]} classes, binning expects {k}")
    rc = np.cumsum(probs[:, ::-1], axis=1)[:, ::-1]
    return np.clip(rc[:, 1:], 0.0, 1.0)


def exceedance_labels(labels: np.ndarray, binning: RateBinning) -> np.ndarray:
    """Binary event indicators per edge: channel k is 1 iff class index > k."""
    k = binning.n_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside 0..{k - 1}")
    ks = np.arange(k - 1).reshape(1, k - 1, 1, 1)
    return (labels[:, None] > ks).astype(np.uint8)


@dataclass
class ReliabilityTable:
    """Per (threshold, lead time, confidence bin) calibration statistics."""

    thresholds_mm_per_h: tuple[float, ...]
    n_lead_times: int
    n_bins: int
    counts: np.ndarray  # [K_t, L, B] int64
    conf_sum: np.ndarray  # [K_t, L, B] float64
    event_sum: np.ndarray  # [K_t, L, B] float64

    def mean_conf(self) -> np.ndarray:
        """Mean exceedance confidence per cell; NaN where the cell is empty."""
        with np.errstate(invalid="ignore"):
            return np.where(self.counts > 0, self.conf_sum / self.counts, np.nan)

    def obs_freq(self) -> np.ndarray:
        """Observed exceedance frequency per cell; NaN where the cell is empty."""
        with np.errstate(invalid="ignore"):
            return np.where(self.counts > 0, self.event_sum / self.counts, np.nan)


def reliability_table(
    probs: np.ndarray,
    labels: np.ndarray,
    lead_times: np.ndarray,
    rate_binning: RateBinning,
    conf_binning: ConfidenceBinning,
) -> ReliabilityTable:
    """Accumulate the reliability table over every pixel of every sample."""
    n, k, h, w = probs.shape
    if n == 0:
        raise ValueError("empty dataset")
    n_lead = int(lead_times.max()) + 1
    b = conf_binning.n_bins
    n_thresh = k - 1

    exceed = exceedance_probabilities(probs, rate_binning)
    events = exceedance_labels(labels, rate_binning)
    lead_flat = np.repeat(lead_times.astype(np.int64), h * w)

    counts = np.empty((n_thresh, n_lead, b), dtype=np.int64)
    conf_sum = np.empty((n_thresh, n_lead, b), dtype=np.float64)
    event_sum = np.empty((n_thresh, n_lead, b), dtype=np.float64)
    for t in range(n_thresh):
        conf_t = exceed[:, t].ravel().astype(np.float64)
        event_t = events[:, t].ravel().astype(np.float64)
        bins_t = assign_bin(conf_t, conf_binning)
        counts[t], conf_sum[t], event_sum[t] = kernels.binned_accumulate(
            bins_t, lead_flat, conf_t, event_t, n_lead, b
        )
    return ReliabilityTable(rate_binning.thresholds, n_lead, b, counts, conf_sum, event_sum)


def _binned_gap_score(
    conf: np.ndarray,
    hit: np.ndarray,
    lead_flat: np.ndarray,
    n_lead: int,
    binning: ConfidenceBinning,
) -> np.ndarray:
    """Sample-weighted sum_b (n_b/N) |acc(b) - conf(b)| per lead time."""
    bins = assign_bin(conf, binning)
    counts, conf_sum, hit_sum = kernels.binned_accumulate(
        bins, lead_flat, conf.astype(np.float64), hit.astype(np.float64), n_lead, binning.n_bins
    )
    out = np.full(n_lead, np.nan)
    for l in range(n_lead):
        n_total = counts[l].sum()
        if n_total == 0:
            continue
        nz = counts[l] > 0
        gap = np.abs(hit_sum[l, nz] / counts[l, nz] - conf_sum[l, nz] / counts[l, nz])
        out[l] = float((counts[l, nz] * gap).sum() / n_total)
    return out


def ece(
    probs: np.ndarray,
    labels: np.ndarray,
    lead_times: np.ndarray,
    conf_binning: ConfidenceBinning,
) -> LeadScores:
    """Expected calibration error of the top class, per lead time.

    Confidence is the maximum class probability, accuracy is argmax == label,
    and bins are weighted by their sample share n_b/N. Empty bins contribute
    nothing.
    """
    n, k, h, w = probs.shape
    n_lead = int(lead_times.max()) + 1
    conf = probs.max(axis=1).ravel().astype(np.float64)
    hit = (probs.argmax(axis=1) == labels).ravel()
    lead_flat = np.repeat(lead_times.astype(np.int64), h * w)
    return _lead_average(_binned_gap_score(conf, hit, lead_flat, n_lead, conf_binning))


def sce(
    probs: np.ndarray,
    labels: np.ndarray,
    lead_times: np.ndarray,
    conf_binning: ConfidenceBinning,
) -> LeadScores:
    """Static calibration error: per-class binned gap, averaged over classes."""
    n, k, h, w = probs.shape
    n_lead = int(lead_times.max()) + 1
    lead_flat = np.repeat(lead_times.astype(np.int64), h * w)
    per_class = np.full((k, n_lead), np.nan)
    for c in range(k):
        conf = probs[:, c].ravel().astype(np.float64)
        hit = labels.ravel() == c
        per_class[c] = _binned_gap_score(conf, hit, lead_flat, n_lead, conf_binning)
    with np.errstate(invalid="ignore"):
        return _lead_average(per_class.mean(axis=0))


def etce(table: ReliabilityTable) -> LeadScores:
    """Expected thresholded calibration error from a reliability table.

    Per (threshold, lead time): the mean |observed frequency - mean
    confidence| over non-empty bins (uniform bin weights, renormalized over
    the non-empty bins). Per lead time: the mean over thresholds that have
    at least one non-empty bin.
    """
    if int(table.counts.sum()) == 0:
        raise ValueError("reliability table is entirely empty")
    mean_conf = table.mean_conf()
    obs_freq = table.obs_freq()
    gap = np.abs(obs_freq - mean_conf)  # NaN in empty cells
    per_lead = np.full(table.n_lead_times, np.nan)
    for l in range(table.n_lead_times):
        thr_scores = []
        for t in range(len(table.thresholds_mm_per_h)):
            nz = table.counts[t, l] > 0
            if not nz.any():
                continue
            thr_scores.append(float(gap[t, l, nz].sum() / nz.sum()))
        if thr_scores:
            per_lead[l] = sum(thr_scores) / len(thr_scores)
    return _lead_average(per_lead)


def f1_at_threshold(
    probs: np.ndarray,
    labels: np.ndarray,
    lead_times: np.ndarray,
    rate_binning: RateBinning,
    rate_threshold_mm_per_h: float,
) -> LeadScores:
    """F1 of the exceedance event at one rate threshold, per lead time.

    A pixel is predicted positive when its exceedance probability is > 0.5.
    Returns 0 for a lead time with no positives anywhere (TP+FP+FN = 0).
    """
    idx = rate_binning.threshold_index(rate_threshold_mm_per_h)
    n_lead = int(lead_times.max()) + 1
    exceed_prob = probs[:, idx + 1 :].sum(axis=1, dtype=np.float64)
    pred = exceed_prob > 0.5
    event = labels > idx
    per_lead = np.full(n_lead, np.nan)
    for l in range(n_lead):
        m = lead_times == l
        if not m.any():
            continue
        p, e = pred[m], event[m]
        tp = int(np.count_nonzero(p & e))
        fp = int(np.count_nonzero(p & ~e))
        fn = int(np.count_nonzero(~p & e))
        denom = 2 * tp + fp + fn
        per_lead[l] = 2 * tp / denom if denom else 0.0
    return _lead_average(per_lead)


def diagram_export(
    table: ReliabilityTable,
    threshold: float | None = None,
    lead_time: int | None = None,
) -> list[tuple]:
    """Rows for reliability/miscalibration diagrams.

    One row per (threshold, lead time, bin) in that order:
    ``(threshold_mm_h, lead_time, bin_lo, bin_hi, count, mean_conf,
    obs_freq, abs_gap)``. Empty cells keep their count of 0 and carry None
    in the three statistics columns.
    """
    mean_conf = table.mean_conf()
    obs_freq = table.obs_freq()
    b = table.n_bins
    rows: list[tuple] = []
    for t, thr in enumerate(table.thresholds_mm_per_h):
        if threshold is not None and not np.isclose(thr, threshold, rtol=1e-9, atol=0.0):
            continue
        for l in range(table.n_lead_times):
            if lead_time is not None and l != lead_time:
                continue
            for bi in range(b):
                cnt = int(table.counts[t, l, bi])
                if cnt > 0:
                    mc = float(mean_conf[t, l, bi])
                    of = float(obs_freq[t, l, bi])
                    rows.append((thr, l, bi / b, (bi + 1) / b, cnt, mc, of, abs(of - mc)))
                else:
                    rows.append((thr, l, bi / b, (bi + 1) / b, 0, None, None, None))
    return rows


def write_diagram_csv(rows: list[tuple], path) -> None:
    """Serialize diagram rows as CSV with the fixed header, full float precision."""
    with open(path, "w", newline="") as f:
        f.write(DIAGRAM_CSV_HEADER + "\n")
        for thr, lead, lo, hi, cnt, mc, of, gap in rows:
            stats = ",".join("" if v is None else repr(v) for v in (mc, of, gap))
            f.write(f"{thr!r},{lead},{lo!r},{hi!r},{cnt},{stats}\n")


@dataclass
class CalibrationReport:
    """All verification scores for one dataset, plus the reliability table."""

    ece: LeadScores
    sce: LeadScores
    etce: LeadScores
    f1: LeadScores
    f1_threshold_mm_per_h: float
    table: ReliabilityTable
    n_samples: int
    n_pixels: int

    def to_json_dict(self, probs_source: str = "softmax(logits)") -> dict:
        """Fixed-schema dict for the JSON report (documented in the README)."""

        def block(s: LeadScores) -> dict:
            return {
                "per_lead_time": [None if np.isnan(v) else float(v) for v in s.per_lead],
                "average": None if np.isnan(s.average) else float(s.average),
            }

        return {
            "schema": "nowcal-report-v1",
            "metadata": {
                "n_samples": self.n_samples,
                "n_pixels": self.n_pixels,
                "n_lead_times": self.table.n_lead_times,
                "confidence_bins": self.table.n_bins,
                "thresholds_mm_h": list(self.table.thresholds_mm_per_h),
                "f1_threshold_mm_h": self.f1_threshold_mm_per_h,
                "f1_decision_rule": "exceedance_probability > 0.5",
                "probs_source": probs_source,
            },
            "ece": block(self.ece),
            "sce": block(self.sce),
            "etce": block(self.etce),
            "f1_at_threshold": block(self.f1),
            "bin_counts": self.table.counts.tolist(),
        }


def compute_report(
    probs: np.ndarray,
    labels: np.ndarray,
    lead_times: np.ndarray,
    rate_binning: RateBinning | None = None,
    conf_binning: ConfidenceBinning | None = None,
    f1_threshold_mm_per_h: float = 1.0,
) -> CalibrationReport:
    """Evaluate every score on one dataset of probabilities."""
    rb = rate_binning or RateBinning()
    cb = conf_binning or ConfidenceBinning()
    table = reliability_table(probs, labels, lead_times, rb, cb)
    return CalibrationReport(
        ece=ece(probs, labels, lead_times, cb),
        sce=sce(probs, labels, lead_times, cb),
        etce=etce(table),
        f1=f1_at_threshold(probs, labels, lead_times, rb, f1_threshold_mm_per_h),
        f1_threshold_mm_per_h=f1_threshold_mm_per_h,
        table=table,
        n_samples=probs.shape[0],
        n_pixels=int(probs.shape[0] * probs.shape[2] * probs.shape[3]),
    )

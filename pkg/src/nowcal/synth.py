"""Synthetic forecast datasets whose true calibration is known by construction.

Every pixel draws a class distribution q from a Dirichlet prior skewed
toward class 0 (dry / trace rates dominate), then a label y ~ q. The
emitted logits are z = log(q) / tau, so undistorted pixels (tau = 1) are
perfectly calibrated, and the NLL-optimal global temperature for a
uniformly distorted dataset is analytically 1/tau.

Two extra per-pixel randomizations keep the raw logits from simply
advertising the distortion, the way a real network's logits never do:

* sharpness: the drawn distribution is tempered per pixel, p = q**s / Z
  with s log-uniform around 1. The pixel stays perfectly calibrated
  (labels are drawn from p), but since z = log(p)/tau + c only the ratio
  s/tau is identifiable from a single logit vector, the distortion tau is
  confounded with natural sharpness unless extra conditioning (such as
  lead time) supplies it.
* gauge shift: a random scalar added to all K logits of a pixel. A
  constant shift cancels in softmax at any temperature, so probabilities,
  labels, and every metric are untouched.

Randomness comes from a counter-based generator keyed by
(seed, sample, pixel, draw slot), so outputs are bit-identical for a given
(scenario, seed) no matter how generation is ordered or parallelized.
Dirichlet components are drawn by inverse-CDF through the regularized
incomplete gamma function, one uniform per component.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import gammaincinv

from . import kernels

#: Class-0 prior mass and the taper range of the remaining classes.
ALPHA_CLASS0 = 2.0
ALPHA_TAIL_RANGE = (0.5, 0.1)

#: Default per-lead-time temperature schedule endpoints.
SCHEDULE_RANGE = (0.5, 1.25)

#: Planted-corruption defaults: pixels whose top-two undistorted-logit gap
#: falls below the threshold get sharpened by tau_bad (overconfident).
PLANTED_TAU_BAD = 0.25
PLANTED_GAP_THRESHOLD = 2.0

#: Prior used by planted-corruption scenarios (see planted_alpha).
PLANTED_ALPHA_CLASS0 = 0.10
PLANTED_ALPHA_TAIL_RANGE = (0.03, 0.006)

_MIN_PROB = 1e-12


def default_alpha(n_classes: int) -> tuple[float, ...]:
    """Dirichlet concentration: 2.0 for class 0, geometric taper 0.5 -> 0.1."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    tail = np.geomspace(ALPHA_TAIL_RANGE[0], ALPHA_TAIL_RANGE[1], n_classes - 1)
    return (ALPHA_CLASS0, *map(float, tail))


def planted_alpha(n_classes: int) -> tuple[float, ...]:
    """Near-deterministic prior used for planted-corruption scenarios.

    With the default prior, per-pixel class distributions are diffuse and
    every pixel is a partly random outcome, which caps how well any
    classifier can detect mispredictions. Planted-corruption scenarios exist
    to make misprediction detection learnable, so they use a much spikier
    prior: most pixels are near-certain, mispredictions concentrate on the
    triggered close calls, and they stay a minority class.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    tail = np.geomspace(PLANTED_ALPHA_TAIL_RANGE[0], PLANTED_ALPHA_TAIL_RANGE[1], n_classes - 1)
    return (PLANTED_ALPHA_CLASS0, *map(float, tail))


@dataclass(frozen=True)
class Distortion:
    """How logits are distorted relative to the calibrated z = log q.

    mode "none": tau = 1 everywhere. mode "global": one tau for all pixels.
    mode "schedule": tau depends on the sample's lead time. mode "planted":
    tau_bad only where the corruption trigger fires, 1 elsewhere.
    """

    mode: str = "none"
    tau: float = 1.0
    schedule: tuple[float, ...] = ()
    tau_bad: float = PLANTED_TAU_BAD
    gap_threshold: float = PLANTED_GAP_THRESHOLD

    def __post_init__(self) -> None:
        if self.mode not in ("none", "global", "schedule", "planted"):
            raise ValueError(f"unknown distortion mode {self.mode!r}")
        if self.tau <= 0 or self.tau_bad <= 0 or any(t <= 0 for t in self.schedule):
            raise ValueError("temperatures must be positive")


@dataclass(frozen=True)
class SynthScenario:
    """Generative recipe with known ground-truth calibration behavior."""

    n_samples: int
    height: int = 16
    width: int = 16
    n_classes: int = 12
    n_lead_times: int = 6
    alpha: tuple[float, ...] = ()
    distortion: Distortion = field(default_factory=Distortion)
    sharpness_log_range: float = 0.6
    logit_shift_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_samples < 1 or self.height < 1 or self.width < 1:
            raise ValueError("n_samples, height, width must be positive")
        if self.n_classes < 2 or self.n_lead_times < 1:
            raise ValueError("need n_classes >= 2 and n_lead_times >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.alpha and len(self.alpha) != self.n_classes:
            raise ValueError(f"alpha must have {self.n_classes} entries")

    def resolved_alpha(self) -> np.ndarray:
        if self.alpha:
            return np.asarray(self.alpha, dtype=np.float64)
        if self.distortion.mode == "planted":
            return np.asarray(planted_alpha(self.n_classes), dtype=np.float64)
        return np.asarray(default_alpha(self.n_classes), dtype=np.float64)

    def resolved_schedule(self) -> np.ndarray:
        if self.distortion.schedule:
            if len(self.distortion.schedule) != self.n_lead_times:
                raise ValueError(
                    f"schedule needs {self.n_lead_times} entries, got "
                    f"{len(self.distortion.schedule)}"
                )
            return np.asarray(self.distortion.schedule, dtype=np.float64)
        return np.linspace(SCHEDULE_RANGE[0], SCHEDULE_RANGE[1], self.n_lead_times)


def planted_corruption_trigger(logits: np.ndarray, gap_threshold: float) -> np.ndarray:
    """True where the top-two logit gap along the last axis is below the threshold."""
    part = np.partition(logits, logits.shape[-1] - 2, axis=-1)
    gap = part[..., -1] - part[..., -2]
    return gap < gap_threshold


def generate(scenario: SynthScenario) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Produce (logits [N,K,H,W] f32, labels [N,H,W] i64, lead_times [N] i64).

    Labels are drawn from the true per-pixel distribution before any
    distortion, so they are identical across distortion modes of the same
    (scenario geometry, seed).
    """
    sc = scenario
    n, k = sc.n_samples, sc.n_classes
    n_pix = sc.height * sc.width
    alpha = sc.resolved_alpha()

    # slot layout per pixel: K gamma draws, sharpness, two shift normals, label
    u = kernels.pixel_uniforms(sc.seed, n, n_pix, k + 4)
    p = _true_distributions_from_uniforms(u, alpha, sc.sharpness_log_range)

    cdf = np.cumsum(p, axis=-1)
    labels_flat = (cdf > u[:, :, k + 3 : k + 4]).argmax(axis=-1).astype(np.int64)

    # Box-Muller: per-pixel scalar logit offset (softmax gauge)
    shift = sc.logit_shift_sigma * np.sqrt(-2.0 * np.log1p(-u[:, :, k + 1])) * np.cos(
        2.0 * np.pi * u[:, :, k + 2]
    )

    lead_times = (np.arange(n, dtype=np.int64) % sc.n_lead_times).astype(np.int64)
    z0 = np.log(p)

    d = sc.distortion
    if d.mode == "none":
        z = z0
    elif d.mode == "global":
        z = z0 / d.tau
    elif d.mode == "schedule":
        tau_per_sample = sc.resolved_schedule()[lead_times]
        z = z0 / tau_per_sample[:, None, None]
    else:  # planted
        fired = planted_corruption_trigger(z0, d.gap_threshold)
        tau = np.where(fired, d.tau_bad, 1.0)
        z = z0 / tau[:, :, None]

    z = z + shift[:, :, None]
    logits = z.reshape(n, sc.height, sc.width, k).transpose(0, 3, 1, 2)
    logits = np.ascontiguousarray(logits, dtype=np.float32)
    labels = labels_flat.reshape(n, sc.height, sc.width)
    return logits, labels, lead_times


def _true_distributions_from_uniforms(
    u: np.ndarray, alpha: np.ndarray, sharpness_log_range: float
) -> np.ndarray:
    k = alpha.size
    gammas = gammaincinv(alpha[None, None, :], u[:, :, :k])
    q = np.clip(gammas, _MIN_PROB, None)
    q /= q.sum(axis=-1, keepdims=True)
    s = np.exp((2.0 * u[:, :, k] - 1.0) * sharpness_log_range)
    # q is floored, so p stays strictly positive; its smallest entries scale
    # with s and therefore carry no fixed marker of the distortion.
    p = q ** s[:, :, None]
    p /= p.sum(axis=-1, keepdims=True)
    return p


def true_distributions(scenario: SynthScenario) -> np.ndarray:
    """The per-pixel ground-truth distributions as [N, K, H, W] float64."""
    sc = scenario
    u = kernels.pixel_uniforms(sc.seed, sc.n_samples, sc.height * sc.width, sc.n_classes + 4)
    p = _true_distributions_from_uniforms(u, sc.resolved_alpha(), sc.sharpness_log_range)
    return p.reshape(sc.n_samples, sc.height, sc.width, sc.n_classes).transpose(0, 3, 1, 2)


def scenario_to_dict(scenario: SynthScenario) -> dict:
    d = asdict(scenario)
    d["alpha"] = list(scenario.resolved_alpha())
    d["distortion"] = asdict(scenario.distortion)
    d["distortion"]["schedule"] = list(d["distortion"]["schedule"])
    return d


def scenario_from_dict(d: dict) -> SynthScenario:
    dd = dict(d["distortion"])
    dd["schedule"] = tuple(dd.get("schedule", ()))
    return SynthScenario(
        n_samples=d["n_samples"],
        height=d["height"],
        width=d["width"],
        n_classes=d["n_classes"],
        n_lead_times=d["n_lead_times"],
        alpha=tuple(d.get("alpha", ())),
        distortion=Distortion(**dd),
        seed=d["seed"],
    )


def parse_distortion(text: str) -> Distortion:
    """Parse the CLI distortion syntax.

    ``none`` | ``temp:TAU`` | ``schedule`` | ``schedule:T0,T1,...`` |
    ``planted`` | ``planted:TAU_BAD`` | ``planted:TAU_BAD,GAP``.
    """
    head, _, rest = text.partition(":")
    if head == "none":
        if rest:
            raise ValueError("'none' takes no parameters")
        return Distortion("none")
    if head == "temp":
        return Distortion("global", tau=float(rest))
    if head == "schedule":
        sched = tuple(float(v) for v in rest.split(",")) if rest else ()
        return Distortion("schedule", schedule=sched)
    if head == "planted":
        if not rest:
            return Distortion("planted")
        parts = [float(v) for v in rest.split(",")]
        if len(parts) == 1:
            return Distortion("planted", tau_bad=parts[0])
        if len(parts) == 2:
            return Distortion("planted", tau_bad=parts[0], gap_threshold=parts[1])
        raise ValueError("planted takes at most tau_bad,gap_threshold")
    raise ValueError(f"unknown distortion {text!r}")

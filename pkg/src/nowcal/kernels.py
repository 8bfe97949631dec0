"""Hot numeric kernels, each with a numba JIT path and a pure-numpy fallback.

The backend is chosen once at import time from the ``NOWCAL_BACKEND``
environment variable:

* ``NOWCAL_BACKEND=numpy``  -- force the pure-numpy implementations
  (numba is not even imported).
* ``NOWCAL_BACKEND=numba``  -- require numba; raise if unavailable.
* unset                     -- use numba when importable, numpy otherwise.

Both paths are deterministic. Integer-only kernels (``pixel_uniforms``)
produce bit-identical output on either backend; floating-point reductions
agree to ~1e-9 (different summation order). ``benchmarks/compare_backends.py``
times the two paths side by side.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_VAR = "NOWCAL_BACKEND"

_env_choice = os.environ.get(_ENV_VAR, "").strip().lower()
if _env_choice not in ("", "numpy", "numba"):
    raise RuntimeError(f"{_ENV_VAR} must be 'numpy' or 'numba', got {_env_choice!r}")

NUMBA_AVAILABLE = False
if _env_choice != "numpy":
    try:
        from numba import njit

        NUMBA_AVAILABLE = True
    except ImportError:
        if _env_choice == "numba":
            raise RuntimeError(f"{_ENV_VAR}=numba but numba is not importable")

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"


# ---------------------------------------------------------------------------
# Counter-based uniform generator
# ---------------------------------------------------------------------------
# splitmix64-style finalizer applied to a key built from (seed, sample, pixel,
# slot). Every draw owns its key, so generation order can never change the
# output. Constants are the usual splitmix64 multipliers plus two odd salts.

_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_SALT_SAMPLE = 0xD1342543DE82EF95
_SALT_PIXEL = 0xAF251AF3B0F025B5
_SALT_SLOT = 0x9E3779B97F4A7C15
_U64 = np.uint64
_INV_2_53 = 1.0 / (1 << 53)


def _mix64_numpy(h: np.ndarray) -> np.ndarray:
    h = (h ^ (h >> _U64(30))) * _U64(_M1)
    h = (h ^ (h >> _U64(27))) * _U64(_M2)
    return h ^ (h >> _U64(31))


def pixel_uniforms_numpy(seed: int, n_samples: int, n_pixels: int, n_slots: int) -> np.ndarray:
    """Uniforms in [0, 1) keyed by (seed, sample, pixel, slot), shape [S, P, U]."""
    with np.errstate(over="ignore"):
        root = _mix64_numpy(_U64(seed & 0xFFFFFFFFFFFFFFFF) ^ _U64(_SALT_SLOT))
        samples = np.arange(n_samples, dtype=np.uint64)
        pixels = np.arange(n_pixels, dtype=np.uint64)
        slots = np.arange(n_slots, dtype=np.uint64)
        hs = _mix64_numpy(root ^ (samples * _U64(_SALT_SAMPLE)))
        hp = _mix64_numpy(hs[:, None] ^ (pixels[None, :] * _U64(_SALT_PIXEL)))
        hu = _mix64_numpy(hp[:, :, None] ^ (slots[None, None, :] * _U64(_SALT_SLOT)))
    return (hu >> _U64(11)).astype(np.float64) * _INV_2_53


def conv2d_forward_numpy(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size 2-D convolution, kernel 1x1 or 3x3 with zero padding.

    x: [N, C, H, W], w: [O, C, k, k], b: [O] -> [N, O, H, W].
    """
    n, c, h, wd = x.shape
    k = w.shape[2]
    if k == 1:
        y = np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0])
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        y = np.zeros((n, w.shape[0], h, wd), dtype=x.dtype)
        for di in range(3):
            for dj in range(3):
                y += np.einsum("nchw,oc->nohw", xp[:, :, di : di + h, dj : dj + wd], w[:, :, di, dj])
    return y + b[None, :, None, None]


def conv2d_input_grad_numpy(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. its input. g: [N, O, H, W] -> [N, C, H, W]."""
    # Correlating the output grad with the flipped, channel-swapped kernel is
    # again a same-size convolution.
    wt = np.ascontiguousarray(np.transpose(w[:, :, ::-1, ::-1], (1, 0, 2, 3)))
    zero = np.zeros(wt.shape[0], dtype=g.dtype)
    return conv2d_forward_numpy(g, wt, zero)


def conv2d_weight_grad_numpy(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. the kernel. -> [O, C, k, k]."""
    n, c, h, wd = x.shape
    o = g.shape[1]
    if k == 1:
        return np.einsum("nohw,nchw->oc", g, x)[:, :, None, None]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dw = np.empty((o, c, 3, 3), dtype=g.dtype)
    for di in range(3):
        for dj in range(3):
            dw[:, :, di, dj] = np.einsum("nohw,nchw->oc", g, xp[:, :, di : di + h, dj : dj + wd])
    return dw


def binned_accumulate_numpy(
    bin_idx: np.ndarray,
    lead_idx: np.ndarray,
    conf: np.ndarray,
    event: np.ndarray,
    n_leads: int,
    n_bins: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-(lead, bin) count / confidence sum / event sum over a pixel stream."""
    flat = lead_idx * n_bins + bin_idx
    size = n_leads * n_bins
    counts = np.bincount(flat, minlength=size).astype(np.int64).reshape(n_leads, n_bins)
    conf_sum = np.bincount(flat, weights=conf, minlength=size).reshape(n_leads, n_bins)
    event_sum = np.bincount(flat, weights=event, minlength=size).reshape(n_leads, n_bins)
    return counts, conf_sum, event_sum


def mean_nll_numpy(logits2d: np.ndarray, labels: np.ndarray, inv_temp: float) -> float:
    """Mean softmax cross-entropy of rows scaled by inv_temp, accumulated in f64."""
    z = logits2d.astype(np.float64) * inv_temp
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return float(np.mean(lse - z[np.arange(z.shape[0]), labels]))


if NUMBA_AVAILABLE:
    from numba import prange

    @njit(cache=True)
    def _mix64_nb(h):
        h = (h ^ (h >> np.uint64(30))) * np.uint64(_M1)
        h = (h ^ (h >> np.uint64(27))) * np.uint64(_M2)
        return h ^ (h >> np.uint64(31))

    @njit(cache=True)
    def _pixel_uniforms_nb(seed, n_samples, n_pixels, n_slots):
        out = np.empty((n_samples, n_pixels, n_slots), dtype=np.float64)
        root = _mix64_nb(np.uint64(seed) ^ np.uint64(_SALT_SLOT))
        for s in range(n_samples):
            hs = _mix64_nb(root ^ (np.uint64(s) * np.uint64(_SALT_SAMPLE)))
            for p in range(n_pixels):
                hp = _mix64_nb(hs ^ (np.uint64(p) * np.uint64(_SALT_PIXEL)))
                for u in range(n_slots):
                    hu = _mix64_nb(hp ^ (np.uint64(u) * np.uint64(_SALT_SLOT)))
                    out[s, p, u] = np.float64(hu >> np.uint64(11)) * _INV_2_53
        return out

    def pixel_uniforms_numba(seed: int, n_samples: int, n_pixels: int, n_slots: int) -> np.ndarray:
        return _pixel_uniforms_nb(seed & 0xFFFFFFFFFFFFFFFF, n_samples, n_pixels, n_slots)

    @njit(cache=True, parallel=True)
    def conv2d_forward_numba(x, w, b):
        n, c, h, wd = x.shape
        o = w.shape[0]
        k = w.shape[2]
        pad = k // 2
        y = np.empty((n, o, h, wd), dtype=x.dtype)
        for ni in prange(n):
            for oi in range(o):
                for i in range(h):
                    for j in range(wd):
                        acc = b[oi]
                        for ci in range(c):
                            for di in range(k):
                                ii = i + di - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for dj in range(k):
                                    jj = j + dj - pad
                                    if jj < 0 or jj >= wd:
                                        continue
                                    acc += w[oi, ci, di, dj] * x[ni, ci, ii, jj]
                        y[ni, oi, i, j] = acc
        return y

    @njit(cache=True, parallel=True)
    def conv2d_input_grad_numba(g, w):
        n, o, h, wd = g.shape
        c = w.shape[1]
        k = w.shape[2]
        pad = k // 2
        dx = np.zeros((n, c, h, wd), dtype=g.dtype)
        for ni in prange(n):
            for oi in range(o):
                for i in range(h):
                    for j in range(wd):
                        gv = g[ni, oi, i, j]
                        for ci in range(c):
                            for di in range(k):
                                ii = i + di - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for dj in range(k):
                                    jj = j + dj - pad
                                    if jj < 0 or jj >= wd:
                                        continue
                                    dx[ni, ci, ii, jj] += w[oi, ci, di, dj] * gv
        return dx

    @njit(cache=True, parallel=True)
    def conv2d_weight_grad_numba(x, g, k):
        n, c, h, wd = x.shape
        o = g.shape[1]
        pad = k // 2
        dw = np.zeros((o, c, k, k), dtype=g.dtype)
        for oi in prange(o):
            for ci in range(c):
                for di in range(k):
                    for dj in range(k):
                        acc = 0.0
                        for ni in range(n):
                            for i in range(h):
                                ii = i + di - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for j in range(wd):
                                    jj = j + dj - pad
                                    if jj < 0 or jj >= wd:
                                        continue
                                    acc += g[ni, oi, i, j] * x[ni, ci, ii, jj]
                        dw[oi, ci, di, dj] = acc
        return dw

    @njit(cache=True)
    def binned_accumulate_numba(bin_idx, lead_idx, conf, event, n_leads, n_bins):
        counts = np.zeros((n_leads, n_bins), dtype=np.int64)
        conf_sum = np.zeros((n_leads, n_bins), dtype=np.float64)
        event_sum = np.zeros((n_leads, n_bins), dtype=np.float64)
        for i in range(bin_idx.shape[0]):
            l = lead_idx[i]
            b = bin_idx[i]
            counts[l, b] += 1
            conf_sum[l, b] += conf[i]
            event_sum[l, b] += event[i]
        return counts, conf_sum, event_sum

    @njit(cache=True)
    def mean_nll_numba(logits2d, labels, inv_temp):
        m_rows, k = logits2d.shape
        total = 0.0
        for i in range(m_rows):
            zmax = -np.inf
            for j in range(k):
                zj = np.float64(logits2d[i, j]) * inv_temp
                if zj > zmax:
                    zmax = zj
            s = 0.0
            for j in range(k):
                s += np.exp(np.float64(logits2d[i, j]) * inv_temp - zmax)
            total += zmax + np.log(s) - np.float64(logits2d[i, labels[i]]) * inv_temp
        return total / m_rows


if BACKEND == "numba":
    pixel_uniforms = pixel_uniforms_numba
    conv2d_forward = conv2d_forward_numba
    conv2d_input_grad = conv2d_input_grad_numba
    conv2d_weight_grad = conv2d_weight_grad_numba
    binned_accumulate = binned_accumulate_numba
    mean_nll = mean_nll_numba
else:
    pixel_uniforms = pixel_uniforms_numpy
    conv2d_forward = conv2d_forward_numpy
    conv2d_input_grad = conv2d_input_grad_numpy
    conv2d_weight_grad = conv2d_weight_grad_numpy
    binned_accumulate = binned_accumulate_numpy
    mean_nll = mean_nll_numpy

"""Minimal reverse-mode training engine for the calibrator networks.

Supports exactly the layer kinds the two calibrator architectures need:
dense, same-size conv2d (1x1 / 3x3), 2x2 average pooling, 2x nearest
upsampling, relu, sigmoid, and per-channel affine conditioning driven by a
learned lead-time embedding. Gradients are hand-written per layer and
checked against central finite differences.

Training runs in float32; ``Network.astype(np.float64)`` produces the
double-precision twin used for gradient checks. Everything is
deterministic given the init seed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import kernels, tensorio

EMBED_DIM = 8


class DivergenceError(Exception):
    """Training produced a NaN loss."""


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Dense:
    """y = x @ w.T + b on row-major feature rows [M, in]."""

    def __init__(self, name: str, w: np.ndarray, b: np.ndarray):
        self.name = name
        self.w = w
        self.b = b

    def params(self):
        return [(f"{self.name}.weight", self.w), (f"{self.name}.bias", self.b)]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.w.shape[1]:
            raise ValueError(f"layer {self.name}: expected [M,{self.w.shape[1]}], got {x.shape}")
        return x @ self.w.T + self.b, x

    def backward(self, g, cache):
        x = cache
        return g @ self.w, {f"{self.name}.weight": g.T @ x, f"{self.name}.bias": g.sum(axis=0)}


class Conv2d:
    """Same-size convolution on [N, C, H, W] with a 1x1 or 3x3 kernel."""

    def __init__(self, name: str, w: np.ndarray, b: np.ndarray):
        self.name = name
        self.w = w
        self.b = b

    def params(self):
        return [(f"{self.name}.weight", self.w), (f"{self.name}.bias", self.b)]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.w.shape[1]:
            raise ValueError(
                f"layer {self.name}: expected [N,{self.w.shape[1]},H,W], got {x.shape}"
            )
        return kernels.conv2d_forward(x, self.w, self.b), x

    def backward(self, g, cache):
        x = cache
        g = np.ascontiguousarray(g)
        k = self.w.shape[2]
        return kernels.conv2d_input_grad(g, self.w), {
            f"{self.name}.weight": kernels.conv2d_weight_grad(x, g, k),
            f"{self.name}.bias": g.sum(axis=(0, 2, 3)),
        }


class AvgPool2:
    """2x2 average pooling; spatial dims must be even."""

    def __init__(self, name: str):
        self.name = name

    def params(self):
        return []

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"layer {self.name}: spatial dims must be even, got {x.shape}")
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), x.shape

    def backward(self, g, cache):
        n, c, h, w = cache
        dx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype)
        return dx, {}


class Upsample2:
    """2x nearest-neighbour upsampling."""

    def __init__(self, name: str):
        self.name = name

    def params(self):
        return []

    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"layer {self.name}: expected 4-d input, got {x.shape}")
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape

    def backward(self, g, cache):
        n, c, h, w = cache
        dx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return dx, {}


class Relu:
    def __init__(self, name: str):
        self.name = name

    def params(self):
        return []

    def forward(self, x):
        return np.maximum(x, 0), x

    def backward(self, g, cache):
        return g * (cache > 0), {}


class Sigmoid:
    def __init__(self, name: str):
        self.name = name

    def params(self):
        return []

    def forward(self, x):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def backward(self, g, cache):
        y = cache
        return g * y * (1.0 - y), {}


class Film:
    """Per-channel affine y = gamma * x + beta driven by a conditioning vector.

    gamma = 1 + e @ w_gamma.T and beta = e @ w_beta.T with zero-initialized
    heads, so the layer is the identity at initialization. Works on [M, C]
    feature rows and [N, C, H, W] feature maps alike.
    """

    def __init__(self, name: str, w_gamma: np.ndarray, w_beta: np.ndarray):
        self.name = name
        self.w_gamma = w_gamma
        self.w_beta = w_beta

    def params(self):
        return [(f"{self.name}.gamma_weight", self.w_gamma), (f"{self.name}.beta_weight", self.w_beta)]

    def forward_cond(self, x, e):
        c = self.w_gamma.shape[0]
        if x.shape[1] != c:
            raise ValueError(f"layer {self.name}: expected {c} channels, got {x.shape}")
        gamma = 1.0 + e @ self.w_gamma.T
        beta = e @ self.w_beta.T
        if x.ndim == 4:
            y = gamma[:, :, None, None] * x + beta[:, :, None, None]
        else:
            y = gamma * x + beta
        return y, (x, e, gamma)

    def backward_cond(self, g, cache):
        x, e, gamma = cache
        if x.ndim == 4:
            dx = gamma[:, :, None, None] * g
            dgamma = (g * x).sum(axis=(2, 3))
            dbeta = g.sum(axis=(2, 3))
        else:
            dx = gamma * g
            dgamma = g * x
            dbeta = g
        grads = {
            f"{self.name}.gamma_weight": dgamma.T @ e,
            f"{self.name}.beta_weight": dbeta.T @ e,
        }
        de = dgamma @ self.w_gamma + dbeta @ self.w_beta
        return dx, grads, de


class Network:
    """A layer stack, optionally conditioned through a lead-time embedding.

    ``lead_times`` at forward time holds one lead index per batch row
    (per sample for conv stacks, per pixel row for dense stacks).
    """

    def __init__(self, layers: list, embedding: np.ndarray | None = None, meta: dict | None = None):
        self.layers = layers
        self.embedding = embedding
        self.meta = dict(meta or {})

    @property
    def conditioned(self) -> bool:
        return self.embedding is not None

    @property
    def dtype(self):
        for _, p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        if self.embedding is not None:
            out.append(("lead_embedding", self.embedding))
        return out

    def n_parameters(self) -> int:
        return sum(int(p.size) for _, p in self.parameters())

    def astype(self, dtype) -> "Network":
        """Deep copy with every parameter cast to dtype."""
        import copy

        twin = copy.deepcopy(self)
        for layer in twin.layers:
            for attr, val in vars(layer).items():
                if isinstance(val, np.ndarray):
                    setattr(layer, attr, val.astype(dtype))
        if twin.embedding is not None:
            twin.embedding = twin.embedding.astype(dtype)
        return twin

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            if name not in values:
                raise KeyError(f"missing parameter {name}")
            src = values[name]
            if src.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {src.shape} != {p.shape}")
            p[...] = src

    def forward(self, x, lead_times=None):
        y, _ = self.forward_with_caches(x, lead_times)
        return y

    def forward_with_caches(self, x, lead_times=None):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        e = None
        if self.conditioned:
            if lead_times is None:
                raise ValueError("conditioned network requires lead_times")
            e = self.embedding[np.asarray(lead_times, dtype=np.int64)]
        caches = []
        for layer in self.layers:
            if isinstance(layer, Film):
                x, cache = layer.forward_cond(x, e)
            else:
                x, cache = layer.forward(x)
            caches.append(cache)
        return x, (caches, lead_times)

    def backward(self, g_out, ctx) -> dict[str, np.ndarray]:
        """Reverse pass; returns gradients keyed like parameters()."""
        caches, lead_times = ctx
        grads: dict[str, np.ndarray] = {}
        de_total = None
        g = np.ascontiguousarray(g_out, dtype=self.dtype)
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            if isinstance(layer, Film):
                g, layer_grads, de = layer.backward_cond(g, cache)
                de_total = de if de_total is None else de_total + de
            else:
                g, layer_grads = layer.backward(g, cache)
            grads.update(layer_grads)
        if self.conditioned:
            demb = np.zeros_like(self.embedding)
            if de_total is not None:
                np.add.at(demb, np.asarray(lead_times, dtype=np.int64), de_total)
            grads["lead_embedding"] = demb
        return grads


def build_lts_network(
    n_classes: int,
    n_lead_times: int,
    conditioned: bool,
    seed: int,
    zero_head: bool = True,
) -> Network:
    """Hierarchical convolutional temperature regressor.

    conv3x3(K->8) -> pool -> conv3x3(8->8) -> pool -> conv3x3(8->8) ->
    2x upsample twice -> conv1x1(8->1), with conditioning after the two
    interior convs. Spatial dims must be divisible by 4. The trunk is drawn
    first so the conditioned and unconditioned variants share identical
    trunk weights for the same seed. With ``zero_head`` the output map
    starts at exactly 0 (temperature 1: the identity calibrator).
    """
    rng = np.random.default_rng(seed)
    ch = 8
    conv1 = Conv2d("conv1", _fan_in_uniform(rng, (ch, n_classes, 3, 3), n_classes * 9), np.zeros(ch, np.float32))
    conv2 = Conv2d("conv2", _fan_in_uniform(rng, (ch, ch, 3, 3), ch * 9), np.zeros(ch, np.float32))
    conv3 = Conv2d("conv3", _fan_in_uniform(rng, (ch, ch, 3, 3), ch * 9), np.zeros(ch, np.float32))
    if zero_head:
        head_w = np.zeros((1, ch, 1, 1), np.float32)
    else:
        head_w = _fan_in_uniform(rng, (1, ch, 1, 1), ch)
    head = Conv2d("head", head_w, np.zeros(1, np.float32))

    layers: list = [conv1, Relu("relu1"), AvgPool2("pool1"), conv2]
    embedding = None
    if conditioned:
        embedding = _fan_in_uniform(rng, (n_lead_times, EMBED_DIM), EMBED_DIM)
        layers.append(Film("film1", np.zeros((ch, EMBED_DIM), np.float32), np.zeros((ch, EMBED_DIM), np.float32)))
    layers += [Relu("relu2"), AvgPool2("pool2"), conv3]
    if conditioned:
        layers.append(Film("film2", np.zeros((ch, EMBED_DIM), np.float32), np.zeros((ch, EMBED_DIM), np.float32)))
    layers += [Relu("relu3"), Upsample2("up1"), Upsample2("up2"), head]

    meta = {
        "arch": "lts",
        "n_classes": n_classes,
        "n_lead_times": n_lead_times,
        "conditioned": conditioned,
        "seed": seed,
        "zero_head": zero_head,
    }
    return Network(layers, embedding, meta)


def build_ss_classifier(
    n_classes: int,
    n_lead_times: int,
    seed: int,
    zero_head: bool = True,
) -> Network:
    """Per-pixel misprediction classifier: 3-layer MLP on the logit vector.

    dense(K->64) -> cond -> relu -> dense(64->32) -> cond -> relu ->
    dense(32->1) -> sigmoid, conditioned on lead time at both hidden layers.
    """
    rng = np.random.default_rng(seed)
    h1, h2 = 64, 32
    d1 = Dense("dense1", _fan_in_uniform(rng, (h1, n_classes), n_classes), np.zeros(h1, np.float32))
    d2 = Dense("dense2", _fan_in_uniform(rng, (h2, h1), h1), np.zeros(h2, np.float32))
    if zero_head:
        d3_w = np.zeros((1, h2), np.float32)
    else:
        d3_w = _fan_in_uniform(rng, (1, h2), h2)
    d3 = Dense("dense3", d3_w, np.zeros(1, np.float32))
    embedding = _fan_in_uniform(rng, (n_lead_times, EMBED_DIM), EMBED_DIM)
    layers = [
        d1,
        Film("film1", np.zeros((h1, EMBED_DIM), np.float32), np.zeros((h1, EMBED_DIM), np.float32)),
        Relu("relu1"),
        d2,
        Film("film2", np.zeros((h2, EMBED_DIM), np.float32), np.zeros((h2, EMBED_DIM), np.float32)),
        Relu("relu2"),
        d3,
        Sigmoid("sigmoid"),
    ]
    meta = {
        "arch": "ss-classifier",
        "n_classes": n_classes,
        "n_lead_times": n_lead_times,
        "conditioned": True,
        "seed": seed,
        "zero_head": zero_head,
    }
    return Network(layers, embedding, meta)


_BUILDERS = {"lts": build_lts_network, "ss-classifier": build_ss_classifier}


def build_from_meta(meta: dict) -> Network:
    arch = meta["arch"]
    if arch == "lts":
        return build_lts_network(
            meta["n_classes"], meta["n_lead_times"], meta["conditioned"], meta["seed"], meta["zero_head"]
        )
    if arch == "ss-classifier":
        return build_ss_classifier(
            meta["n_classes"], meta["n_lead_times"], meta["seed"], meta["zero_head"]
        )
    raise ValueError(f"unknown network arch {arch!r}")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows; returns (loss, dloss/dlogits)."""
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    m = z.shape[0]
    rows = np.arange(m)
    loss = float(-np.mean(np.log(p[rows, labels])))
    dz = p
    dz[rows, labels] -= 1.0
    return loss, (dz / m).astype(logits.dtype)


def binary_cross_entropy(
    p: np.ndarray, targets: np.ndarray, weights: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Weighted mean BCE on probabilities; returns (loss, dloss/dp)."""
    eps = 1e-7
    pc = np.clip(p.astype(np.float64), eps, 1.0 - eps)
    y = targets.astype(np.float64)
    ll = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    if weights is None:
        w = np.ones_like(pc)
    else:
        w = weights.astype(np.float64)
    wsum = w.sum()
    loss = float((w * ll).sum() / wsum)
    dp = (w * (pc - y) / (pc * (1.0 - pc)) / wsum).astype(p.dtype)
    return loss, dp


def loss_and_gradients(
    network: Network,
    inputs: np.ndarray,
    targets: np.ndarray,
    loss_kind: str,
    lead_times: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward + loss + reverse pass for the two standard loss kinds."""
    out, ctx = network.forward_with_caches(inputs, lead_times)
    if np.isnan(out).any():
        raise DivergenceError("NaN in forward pass")
    if loss_kind == "softmax-cross-entropy":
        loss, dout = softmax_cross_entropy(out, targets)
    elif loss_kind == "binary-cross-entropy":
        squeezed = out.ndim == 2 and out.shape[1] == 1
        flat = out[:, 0] if squeezed else out
        loss, dflat = binary_cross_entropy(flat, targets, weights)
        dout = dflat[:, None] if squeezed else dflat
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return loss, network.backward(dout, ctx)


# ---------------------------------------------------------------------------
# Optimizer: adaptive moments with bias correction
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def optimizer_step(state: AdamState, params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
    """One in-place adaptive-moment update with bias correction."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    scale = state.lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for name, p in params:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g, dtype=np.float64)
        p -= (scale * m / (np.sqrt(v) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def relu_signs(network: Network, inputs: np.ndarray, lead_times=None) -> np.ndarray:
    """Concatenated sign pattern of every relu input (the active-set mask)."""
    _, (caches, _) = network.forward_with_caches(inputs, lead_times)
    masks = [
        cache > 0
        for layer, cache in zip(network.layers, caches)
        if isinstance(layer, Relu)
    ]
    if not masks:
        return np.zeros(0, dtype=bool)
    return np.concatenate([m.ravel() for m in masks])


def finite_difference_check(
    network: Network,
    loss_fn,
    mask_fn=None,
    rng: np.random.Generator | None = None,
    max_per_param: int = 12,
    step: float = 1e-3,
) -> dict:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(net)`` must return ``(loss, grads)``; the check runs on a
    double-precision twin of the network. A random subset of up to
    ``max_per_param`` entries per parameter tensor is perturbed.

    Central differences are only a valid derivative estimate where the loss
    is smooth, so when ``mask_fn(net)`` is given (the relu active-set
    pattern, see :func:`relu_signs`) the step is halved per coordinate until
    the perturbed evaluations stay inside the base point's linear region.
    Returns a report with the max relative error over checked entries.
    """
    rng = rng or np.random.default_rng(0)
    net = network.astype(np.float64)
    _, grads = loss_fn(net)
    base_mask = mask_fn(net) if mask_fn is not None else None
    max_rel = 0.0
    worst = None
    n_checked = 0
    for name, p in net.parameters():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            h = step
            for _ in range(16):
                flat[i] = orig + h
                crossed = base_mask is not None and not np.array_equal(mask_fn(net), base_mask)
                if not crossed:
                    flat[i] = orig - h
                    crossed = not np.array_equal(mask_fn(net), base_mask) if base_mask is not None else False
                if not crossed:
                    break
                h *= 0.5
            flat[i] = orig + h
            lp, _ = loss_fn(net)
            flat[i] = orig - h
            lm, _ = loss_fn(net)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            analytic = float(grads[name].reshape(-1)[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (name, int(i), analytic, numeric)
    return {"max_rel_err": max_rel, "n_checked": n_checked, "worst": worst}


# ---------------------------------------------------------------------------
# Weight serialization: manifest + one FCT1 file per parameter
# ---------------------------------------------------------------------------

def save_network(network: Network, dir_path: str | Path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in network.parameters():
        fname = name.replace("/", "_") + ".fct1"
        tensorio.write_tensor(np.ascontiguousarray(p), d / fname)
        entries.append({"name": name, "file": fname, "shape": list(p.shape)})
    manifest = {
        "format": "nowcal-network-v1",
        "meta": network.meta,
        "parameters": entries,
    }
    with open(d / "network.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_network(dir_path: str | Path) -> Network:
    d = Path(dir_path)
    try:
        with open(d / "network.json") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot load network manifest from {d}: {exc}") from exc
    if manifest.get("format") != "nowcal-network-v1":
        raise ValueError(f"unsupported network format {manifest.get('format')!r}")
    net = build_from_meta(manifest["meta"])
    values = {}
    for entry in manifest["parameters"]:
        path = d / entry["file"]
        if not path.exists():
            raise ValueError(f"missing parameter file {path}")
        values[entry["name"]] = tensorio.read_tensor(path)
    net.set_parameters(values)
    return net

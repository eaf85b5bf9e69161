"""Patch classifier predicting the perception outcome class, with MC-dropout uncertainty.

The network is a small conv stack followed by fully connected layers; dropout
sits in front of the first two fc layers. Dropout masks are explicit inputs so
every stochastic pass is reproducible: masks come from numpy generators keyed
by (seed, patch key), never from shared state.

Tensor primitives (conv, pooling, matmul, autograd) come from torch; the
wiring, masks, loss weighting, sampling and file format live here.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .io import atomic_path, atomic_write_text
from .labelgen import CLASSES, PATCH_SIZE, OutcomeClass

torch.set_num_threads(1)

N_CLASSES = 4
WEIGHTS_MAGIC = b"IVOANET1"
WEIGHTS_VERSION = 1


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int = 5
    stride: int = 1
    pool: int = 2

    def __post_init__(self) -> None:
        if min(self.out_channels, self.kernel, self.stride, self.pool) < 1:
            raise ValueError("conv layer sizes must be >= 1")


DEFAULT_CONV = (ConvLayer(8), ConvLayer(16), ConvLayer(32))


@dataclass(frozen=True)
class NetworkSpec:
    conv: tuple[ConvLayer, ...] = DEFAULT_CONV
    fc: tuple[int, ...] = (128, 64, N_CLASSES)
    p_drop: float = 0.5
    input_size: int = PATCH_SIZE
    in_channels: int = 1
    dropout_before: tuple[int, ...] = (0, 1)

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv", tuple(c if isinstance(c, ConvLayer) else ConvLayer(*c) for c in self.conv))
        object.__setattr__(self, "fc", tuple(int(w) for w in self.fc))
        object.__setattr__(self, "dropout_before", tuple(self.dropout_before))
        if len(self.fc) < 2 or self.fc[-1] != N_CLASSES:
            raise ValueError(f"need at least two fc layers ending in width {N_CLASSES}")
        if any(w < 1 for w in self.fc):
            raise ValueError("fc widths must be >= 1")
        if self.dropout_before != (0, 1):
            raise ValueError("dropout sits before the first two fc layers")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must be in [0, 1)")
        if self.feature_shape()[1] < 1:
            raise ValueError("conv stack shrinks the input below one pixel")

    def feature_shape(self) -> tuple[int, int]:
        """(channels, side) after the conv stack (valid convolutions, floor pooling)."""
        side, ch = self.input_size, self.in_channels
        for c in self.conv:
            side = (side - c.kernel) // c.stride + 1
            side //= c.pool
            ch = c.out_channels
            if side < 1:
                return ch, 0
        return ch, side

    @property
    def feature_dim(self) -> int:
        ch, side = self.feature_shape()
        return ch * side * side

    @property
    def embedding_dim(self) -> int:
        return self.fc[1]

    @property
    def dropout_widths(self) -> tuple[int, int]:
        return self.feature_dim, self.fc[0]

    def to_dict(self) -> dict:
        return {"conv": [[c.out_channels, c.kernel, c.stride, c.pool] for c in self.conv],
                "fc": list(self.fc), "p_drop": self.p_drop, "input_size": self.input_size,
                "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(tuple(ConvLayer(*c) for c in d["conv"]), tuple(d["fc"]), float(d["p_drop"]),
                   int(d.get("input_size", PATCH_SIZE)), int(d.get("in_channels", 1)))

    @classmethod
    def alexnet_like(cls, p_drop: float = 0.5) -> NetworkSpec:
        """Five conv layers and three fc layers; embedding width 256."""
        conv = (ConvLayer(32, 5, 1, 2), ConvLayer(64, 5, 1, 2), ConvLayer(96, 3, 1, 1),
                ConvLayer(96, 3, 1, 1), ConvLayer(64, 3, 1, 2))
        return cls(conv, (512, 256, N_CLASSES), p_drop)


@dataclass
class Network:
    """Spec plus parameters, ordered conv (W, b) pairs then fc (W, b) pairs."""

    spec: NetworkSpec
    params: list[torch.Tensor]
    seed: int = 0

    def __post_init__(self) -> None:
        shapes = param_shapes(self.spec)
        if len(shapes) != len(self.params):
            raise ValueError("parameter count does not match the spec")
        for (name, shape), p in zip(shapes, self.params):
            if tuple(p.shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tuple(p.shape)}")

    @property
    def dtype(self):
        return self.params[0].dtype

    def copy(self) -> Network:
        return Network(self.spec, [p.detach().clone() for p in self.params], self.seed)

    def to(self, dtype) -> Network:
        return Network(self.spec, [p.detach().to(dtype) for p in self.params], self.seed)


def param_shapes(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    ch = spec.in_channels
    for i, c in enumerate(spec.conv):
        shapes.append((f"conv{i}.weight", (c.out_channels, ch, c.kernel, c.kernel)))
        shapes.append((f"conv{i}.bias", (c.out_channels,)))
        ch = c.out_channels
    width = spec.feature_dim
    for i, w in enumerate(spec.fc):
        shapes.append((f"fc{i}.weight", (w, width)))
        shapes.append((f"fc{i}.bias", (w,)))
        width = w
    return shapes


def init_network(spec: NetworkSpec, seed: int, dtype=torch.float32) -> Network:
    """He-normal weights, zero biases, drawn from a seeded numpy generator."""
    rng = np.random.default_rng([seed, 0x1E7])
    params = []
    for name, shape in param_shapes(spec):
        if name.endswith("bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        params.append(torch.tensor(arr, dtype=dtype))
    return Network(spec, params, seed)


def zero_network(spec: NetworkSpec) -> Network:
    return Network(spec, [torch.zeros(s, dtype=torch.float32) for _, s in param_shapes(spec)])


# ---------------------------------------------------------------- forward

def _to_unit(arr: np.ndarray) -> np.ndarray:
    """uint8 patches are stored as 0..255; the network sees [0, 1]."""
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    return arr


def _as_input(patches, spec: NetworkSpec, dtype) -> torch.Tensor:
    x = torch.as_tensor(_to_unit(np.asarray(patches)), dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    n = spec.input_size
    if x.ndim != 4 or tuple(x.shape[1:]) != (spec.in_channels, n, n):
        raise ValueError(f"expected patches of shape ({spec.in_channels}, {n}, {n}), got {tuple(x.shape[1:])}")
    return x


def conv_features(net: Network, x: torch.Tensor) -> torch.Tensor:
    """Flattened output of the conv stack; x is (N, C, H, W)."""
    k = 0
    for c in net.spec.conv:
        x = F.conv2d(x, net.params[k], net.params[k + 1], stride=c.stride)
        # pool then ReLU: identical values to ReLU then pool (they commute), less ReLU work
        if c.pool > 1:
            x = F.max_pool2d(x, c.pool)
        x = F.relu(x)
        k += 2
    return x.flatten(1)


def _fc_params(net: Network):
    k = 2 * len(net.spec.conv)
    return [(net.params[k + 2 * i], net.params[k + 2 * i + 1]) for i in range(len(net.spec.fc))]


def fc_head(net: Network, feats: torch.Tensor, masks=None, want_embedding: bool = False):
    """Logits from conv features. masks = (m0, m1) keep-masks for the two dropout sites or None.

    Kept units are scaled by 1 / (1 - p_drop) (inverted dropout), so with
    p_drop = 0 or masks=None the head is deterministic.
    """
    scale = 1.0 / (1.0 - net.spec.p_drop)
    h = feats
    embedding = None
    for i, (W, b) in enumerate(_fc_params(net)):
        if masks is not None and i < 2:
            h = h * masks[i] * scale
        h = F.linear(h, W, b)
        if i < len(net.spec.fc) - 1:
            h = F.relu(h)
        if i == 1:
            embedding = h
    return (h, embedding) if want_embedding else h


def forward(net: Network, patch, masks=None) -> np.ndarray:
    """Class probabilities (TP, FP, FN, TN) for one patch or a stack of patches."""
    single = np.ndim(patch) == 2
    x = _as_input(patch, net.spec, net.dtype)
    if masks is not None:
        masks = tuple(torch.as_tensor(np.asarray(m), dtype=net.dtype).reshape(x.shape[0], -1) for m in masks)
    rows = []
    with torch.no_grad():
        # one patch at a time: float rounding then never depends on what else is in the batch
        for i in range(x.shape[0]):
            m = None if masks is None else tuple(t[i:i + 1] for t in masks)
            rows.append(fc_head(net, conv_features(net, x[i:i + 1]), m))
    probs = softmax(torch.cat(rows).double().numpy())
    return probs[0] if single else probs


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- MC dropout

@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    variance: np.ndarray
    uncertainty: float

    @property
    def label(self) -> OutcomeClass:
        return CLASSES[int(np.argmax(self.mean))]

    @property
    def confidence(self) -> float:
        return float(np.max(self.mean))


def patch_rng(seed: int, key) -> np.random.Generator:
    """Independent stream for one patch, derived from the run seed and a patch key."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in key)]))


def dropout_masks(spec: NetworkSpec, passes: int, rng: np.random.Generator):
    d0, d1 = spec.dropout_widths
    p = spec.p_drop
    return (rng.random((passes, d0)) >= p, rng.random((passes, d1)) >= p)


def _mc_from_features(net: Network, feat: torch.Tensor, passes: int, rng) -> Prediction:
    if net.spec.p_drop == 0.0:
        # every pass is the deterministic forward; averaging copies would only add rounding
        with torch.no_grad():
            probs = softmax(fc_head(net, feat).double().numpy())[0]
        return Prediction(probs, np.zeros(N_CLASSES), 0.0)
    m0, m1 = dropout_masks(net.spec, passes, rng)
    masks = (torch.as_tensor(m0, dtype=net.dtype), torch.as_tensor(m1, dtype=net.dtype))
    with torch.no_grad():
        logits = fc_head(net, feat.expand(passes, -1), masks)
    probs = softmax(logits.double().numpy())
    mean = probs.mean(axis=0)
    var = probs.var(axis=0, ddof=1) if passes > 1 else np.zeros(N_CLASSES)
    return Prediction(mean, var, float(var.mean()))


def predict_mc(net: Network, patch, passes: int = 20, rng_seed: int = 0, key=()) -> Prediction:
    """T stochastic passes with fresh dropout masks; mean, per-class sample variance, mean variance."""
    if passes < 1:
        raise ValueError("need at least one pass")
    x = _as_input(patch, net.spec, net.dtype)
    with torch.no_grad():
        feat = conv_features(net, x)
    return _mc_from_features(net, feat, passes, patch_rng(rng_seed, key))


def predict_many(net: Network, patches, keys, passes: int = 20, seed: int = 0) -> list[Prediction]:
    """predict_mc over many patches; each result depends only on (net, patch, passes, seed, key)."""
    if passes < 1:
        raise ValueError("need at least one pass")
    if len(patches) != len(keys):
        raise ValueError("one key per patch")
    return [predict_mc(net, p, passes, seed, k) for p, k in zip(patches, keys)]


# ---------------------------------------------------------------- training

SCHEDULES = ("constant", "cosine")


def step_lr(cfg: TrainConfig, step: int, total: int) -> float:
    """Learning rate for update `step` of `total`; cosine decays from lr towards 0 over the run."""
    if cfg.schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 5
    batch: int = 64
    seed: int = 0
    weight_decay: float = 0.0
    class_weights: tuple[float, ...] | None = None
    schedule: str = "constant"

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.epochs < 1 or self.batch < 1:
            raise ValueError("lr must be positive, epochs and batch >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.class_weights is not None and len(self.class_weights) != N_CLASSES:
            raise ValueError(f"class_weights needs {N_CLASSES} entries")


def inverse_frequency_weights(labels: np.ndarray, lo: float = 1.0, hi: float = 100.0) -> np.ndarray:
    """w_c = n_max / n_c clamped to [lo, hi]; the most frequent class gets weight 1."""
    counts = np.bincount(np.asarray(labels, int), minlength=N_CLASSES).astype(float)
    if np.any(counts == 0):
        missing = [CLASSES[i].value for i in np.nonzero(counts == 0)[0]]
        raise ValueError(f"classes {missing} absent from the training set; pass explicit class_weights")
    return np.clip(counts.max() / counts, lo, hi)


def weighted_loss(net: Network, x: torch.Tensor, y: torch.Tensor, weights: torch.Tensor, masks=None) -> torch.Tensor:
    """Class-weighted mean cross-entropy: sum_i w_yi * CE_i / sum_i w_yi."""
    logits = fc_head(net, conv_features(net, x), masks)
    logp = F.log_softmax(logits, dim=1)
    w = weights[y]
    return -(w * logp.gather(1, y[:, None])[:, 0]).sum() / w.sum()


@dataclass
class TrainResult:
    net: Network
    history: list[float] = field(default_factory=list)
    class_weights: tuple[float, ...] = ()


def train(net: Network, patches, labels, cfg: TrainConfig = TrainConfig(), log=None) -> TrainResult:
    """Mini-batch SGD with momentum on the class-weighted cross-entropy, dropout active.

    `patches` is (N, H, W) uint8 or float in [0, 1]; `labels` holds class indices.
    Returns a trained copy; the input network is not modified.
    """
    patches = np.asarray(patches)
    labels = np.asarray(labels, dtype=np.int64)
    if len(patches) == 0:
        raise ValueError("empty training set")
    if len(patches) != len(labels):
        raise ValueError("patches and labels differ in length")
    weights = np.asarray(cfg.class_weights, float) if cfg.class_weights is not None else inverse_frequency_weights(labels)
    out = net.copy()
    params = [p.requires_grad_(True) for p in out.params]
    velocity = [torch.zeros_like(p) for p in params]
    w_t = torch.as_tensor(weights, dtype=out.dtype)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    history = []
    n = len(patches)
    per_epoch = -(-n // cfg.batch)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, s in enumerate(range(0, n, cfg.batch)):
            idx = np.sort(order[s:s + cfg.batch])
            x = _as_input(patches[idx], out.spec, out.dtype)
            y = torch.as_tensor(labels[idx])
            m0, m1 = dropout_masks(out.spec, len(idx), rng)
            masks = (torch.as_tensor(m0, dtype=out.dtype), torch.as_tensor(m1, dtype=out.dtype))
            loss = weighted_loss(out, x, y, w_t, masks)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = torch.autograd.grad(loss, params)
            lr = step_lr(cfg, epoch * per_epoch + b, cfg.epochs * per_epoch)
            with torch.no_grad():
                for p, g, v in zip(params, grads, velocity):
                    if cfg.weight_decay:
                        g = g + cfg.weight_decay * p
                    v.mul_(cfg.momentum).add_(g)
                    p.sub_(lr * v)
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(total / count)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.4f}")
    out.params = [p.detach() for p in params]
    return TrainResult(out, history, tuple(float(w) for w in weights))


def activation_pattern(net: Network, x: torch.Tensor, masks=None) -> torch.Tensor:
    """Which side of every kink the forward pass is on: ReLU signs and max-pool winners."""
    parts = []
    k = 0
    with torch.no_grad():
        for c in net.spec.conv:
            x = F.conv2d(x, net.params[k], net.params[k + 1], stride=c.stride)
            if c.pool > 1:
                x, idx = F.max_pool2d(x, c.pool, return_indices=True)
                parts.append(idx.flatten())
            parts.append((x > 0).flatten())
            x = F.relu(x)
            k += 2
        h = x.flatten(1)
        scale = 1.0 / (1.0 - net.spec.p_drop)
        for i, (W, b) in enumerate(_fc_params(net)[:-1]):
            if masks is not None and i < 2:
                h = h * masks[i] * scale
            h = F.linear(h, W, b)
            parts.append((h > 0).flatten())
            h = F.relu(h)
    return torch.cat([p.to(torch.int64) for p in parts])


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int


def gradient_check(spec: NetworkSpec, seed: int, n_samples: int = 3, n_checks: int = 60,
                   h: float = 1e-4) -> GradCheck:
    """Max relative error between autograd and central differences on a float64 copy.

    Dropout masks are drawn once and held fixed so the loss is a deterministic
    function of the parameters. Biases are randomised so no pre-activation sits
    exactly on a ReLU kink (zero-initialised biases do when a whole row is
    dropped). A coordinate whose +-h step moves any unit across a kink (ReLU
    sign or max-pool winner changes) is not differentiable on that interval;
    it is skipped and another coordinate is drawn.
    """
    net = init_network(spec, seed, dtype=torch.float64)
    rng = np.random.default_rng([seed, 0x6C])
    for (name, _), p in zip(param_shapes(spec), net.params):
        if name.endswith("bias"):
            p.copy_(torch.as_tensor(rng.normal(0.0, 0.1, p.shape)))
    x = torch.as_tensor(rng.random((n_samples, spec.in_channels, spec.input_size, spec.input_size)))
    y = torch.as_tensor(rng.integers(0, N_CLASSES, n_samples))
    w = torch.as_tensor(rng.uniform(1.0, 3.0, N_CLASSES))
    m0, m1 = dropout_masks(spec, n_samples, rng)
    masks = (torch.as_tensor(m0, dtype=torch.float64), torch.as_tensor(m1, dtype=torch.float64))
    params = [p.requires_grad_(True) for p in net.params]
    grads = torch.autograd.grad(weighted_loss(net, x, y, w, masks), params)
    base = activation_pattern(net, x, masks)
    worst, checked, skipped = 0.0, 0, 0
    with torch.no_grad():
        while checked < n_checks and skipped < 50 * n_checks:
            i = int(rng.integers(len(params)))
            flat = params[i].view(-1)
            j = int(rng.integers(flat.numel()))
            orig = float(flat[j])
            flat[j] = orig + h
            up = float(weighted_loss(net, x, y, w, masks))
            smooth = torch.equal(activation_pattern(net, x, masks), base)
            flat[j] = orig - h
            down = float(weighted_loss(net, x, y, w, masks))
            smooth = smooth and torch.equal(activation_pattern(net, x, masks), base)
            flat[j] = orig
            if not smooth:
                skipped += 1
                continue
            numeric = (up - down) / (2 * h)
            analytic = float(grads[i].view(-1)[j])
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / denom)
            checked += 1
    return GradCheck(worst, checked, skipped)


# ---------------------------------------------------------------- heatmaps

def heatmap_shape(height: int, width: int, patch: int = PATCH_SIZE, stride: int = 20) -> tuple[int, int]:
    if height < patch or width < patch:
        raise ValueError(f"image {width}x{height} is smaller than one {patch}x{patch} patch")
    return (height - patch) // stride + 1, (width - patch) // stride + 1


def slice_patches(image: np.ndarray, patch: int = PATCH_SIZE, stride: int = 20):
    """Row-major list of (patch, row, col); patch (r, c) covers [c*stride, c*stride+patch) x [r*stride, ...)."""
    rows, cols = heatmap_shape(image.shape[0], image.shape[1], patch, stride)
    return [(image[r * stride:r * stride + patch, c * stride:c * stride + patch], r, c)
            for r in range(rows) for c in range(cols)]


@dataclass
class Heatmap:
    mean: np.ndarray         # (rows, cols, 4)
    variance: np.ndarray     # (rows, cols, 4)
    uncertainty: np.ndarray  # (rows, cols)
    patch: int = PATCH_SIZE
    stride: int = 20
    image_shape: tuple[int, int] = (0, 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.uncertainty.shape

    def prediction(self, r: int, c: int) -> Prediction:
        return Prediction(self.mean[r, c], self.variance[r, c], float(self.uncertainty[r, c]))


def build_heatmap(net: Network, image: np.ndarray, passes: int = 20, seed: int = 0,
                  patch: int = PATCH_SIZE, stride: int = 20, order=None) -> Heatmap:
    """MC prediction for every slice; masks for slice (r, c) come from (seed, r, c).

    `order` optionally permutes the evaluation order (results do not depend on it).
    """
    slices = slice_patches(image, patch, stride)
    rows, cols = heatmap_shape(image.shape[0], image.shape[1], patch, stride)
    mean = np.zeros((rows, cols, N_CLASSES))
    var = np.zeros((rows, cols, N_CLASSES))
    unc = np.zeros((rows, cols))
    idx = list(range(len(slices))) if order is None else list(order)
    preds = predict_many(net, [slices[i][0] for i in idx], [(slices[i][1], slices[i][2]) for i in idx], passes, seed)
    for i, pred in zip(idx, preds):
        _, r, c = slices[i]
        mean[r, c], var[r, c], unc[r, c] = pred.mean, pred.variance, pred.uncertainty
    return Heatmap(mean, var, unc, patch, stride, tuple(image.shape[:2]))


def _box_mean(a: np.ndarray, kernel: int) -> np.ndarray:
    """Mean over the in-bounds part of each kernel x kernel neighbourhood (first two axes)."""
    from scipy.ndimage import uniform_filter

    size = (kernel, kernel) + (1,) * (a.ndim - 2)
    ones = np.ones(a.shape[:2] + (1,) * (a.ndim - 2))
    num = uniform_filter(a, size=size, mode="constant", cval=0.0)
    den = uniform_filter(ones, size=size[:2] + (1,) * (a.ndim - 2), mode="constant", cval=0.0)
    return num / den


def mean_filter(hm: Heatmap, kernel: int = 3) -> Heatmap:
    """Per-class box filter over the grid, renormalised; variances and uncertainty filtered alike."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 1")
    if kernel == 1:
        return Heatmap(hm.mean.copy(), hm.variance.copy(), hm.uncertainty.copy(), hm.patch, hm.stride, hm.image_shape)
    mean = _box_mean(hm.mean, kernel)
    mean = mean / mean.sum(axis=-1, keepdims=True)
    return Heatmap(mean, _box_mean(hm.variance, kernel), _box_mean(hm.uncertainty, kernel),
                   hm.patch, hm.stride, hm.image_shape)


ABSTAIN = "Abstain"


def decide_cells(hm: Heatmap, u_max: float) -> np.ndarray:
    """Per cell: argmax class where uncertainty < u_max, else ABSTAIN; ties go to the earlier of TP, FP, FN, TN."""
    if u_max < 0:
        raise ValueError("u_max must be non-negative")
    best = np.argmax(hm.mean, axis=-1)
    out = np.empty(hm.shape, dtype=object)
    for (r, c), b in np.ndenumerate(best):
        out[r, c] = CLASSES[b] if hm.uncertainty[r, c] < u_max else ABSTAIN
    return out


def heatmap_csv(hm: Heatmap) -> str:
    lines = ["row,col,p_tp,p_fp,p_fn,p_tn,uncertainty"]
    rows, cols = hm.shape
    for r in range(rows):
        for c in range(cols):
            m = hm.mean[r, c]
            lines.append(f"{r},{c},{m[0]:.6f},{m[1]:.6f},{m[2]:.6f},{m[3]:.6f},{hm.uncertainty[r, c]:.8f}")
    return "\n".join(lines) + "\n"


def write_heatmap(out_dir, stem: str, hm: Heatmap) -> None:
    """<stem>.csv plus one 8-bit PGM per class (<stem>_tp.pgm, ...)."""
    from .worldsim import write_pgm

    out = Path(out_dir)
    atomic_write_text(out / f"{stem}.csv", heatmap_csv(hm))
    for i, cls in enumerate(CLASSES):
        with atomic_path(out / f"{stem}_{cls.value.lower()}.pgm") as tmp:
            write_pgm(tmp, hm.mean[:, :, i])


# ---------------------------------------------------------------- persistence

def save_network(net: Network, path) -> None:
    """Magic, LE uint32 header length, JSON header, then LE float32 tensors in order."""
    shapes = param_shapes(net.spec)
    header = {"format_version": WEIGHTS_VERSION, "spec": net.spec.to_dict(), "seed": net.seed,
              "tensors": [{"name": n, "shape": list(s)} for n, s in shapes]}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(p.detach().to(torch.float32).numpy().astype("<f4").tobytes() for p in net.params)
    with atomic_path(path) as tmp:
        Path(tmp).write_bytes(WEIGHTS_MAGIC + struct.pack("<I", len(head)) + head + blob)


def load_network(path) -> Network:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing weights file {path}")
    raw = path.read_bytes()
    if raw[:8] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    if header.get("format_version") != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    spec = NetworkSpec.from_dict(header["spec"])
    offset = 12 + n
    params = []
    for name, shape in param_shapes(spec):
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params.append(torch.tensor(arr.astype(np.float32)))
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing tensor data")
    return Network(spec, params, int(header.get("seed", 0)))

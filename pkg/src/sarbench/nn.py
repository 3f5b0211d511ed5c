"""Self-contained differentiable micro-CNN on numpy arrays.

Tensors are plain dense row-major ndarrays, float32 by default with a
float64 mode for finite-difference gradient checks.  The layer set is
fixed: 3x3 convolutions, per-channel batch normalization with running
averages, ReLU, optional identity skips, global average pooling, feature
dropout, and a linear head.  Backpropagation is hand-rolled for exactly
this graph.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

__all__ = [
    "ModelConfig",
    "LossConfig",
    "OneCycleSchedule",
    "Model",
    "softmax",
    "forward",
    "loss_and_gradients",
    "input_gradient",
    "sgd_step",
    "one_cycle_at",
    "mixup_batch",
    "save_model",
    "load_model",
]

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1
_CKPT_MAGIC = b"SARM"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the micro-CNN; capacity scales via ``width_multiplier``."""

    input_hw: tuple[int, int] = (32, 32)
    n_classes: int = 10
    stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    skip_connections: bool = True
    dropout_rate: float = 0.4
    norm: bool = True
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.n_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if not self.stages:
            raise ValidationError("at least one conv stage required")
        if self.width_multiplier <= 0:
            raise ValidationError("width multiplier must be positive")

    def stage_channels(self) -> list[int]:
        return [max(1, int(round(c * self.width_multiplier))) for c, _ in self.stages]

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "n_classes": self.n_classes,
            "stages": [list(s) for s in self.stages],
            "skip_connections": self.skip_connections,
            "dropout_rate": self.dropout_rate,
            "norm": self.norm,
            "width_multiplier": self.width_multiplier,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(
            input_hw=tuple(doc["input_hw"]),
            n_classes=doc["n_classes"],
            stages=tuple(tuple(s) for s in doc["stages"]),
            skip_connections=doc["skip_connections"],
            dropout_rate=doc["dropout_rate"],
            norm=doc["norm"],
            width_multiplier=doc.get("width_multiplier", 1.0),
        )


@dataclass(frozen=True)
class LossConfig:
    """Loss kind plus the magnitudes of the §-style baseline regularizers."""

    kind: str = "cross_entropy"  # or "cosine"
    label_smoothing_alpha: float = 0.0
    gaussian_input_noise_sigma: float = 0.0
    mixup_alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cross_entropy", "cosine"):
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.label_smoothing_alpha < 1.0:
            raise ValidationError("label smoothing alpha must be in [0, 1)")
        if self.gaussian_input_noise_sigma < 0:
            raise ValidationError("gaussian noise sigma must be >= 0")
        if self.mixup_alpha < 0:
            raise ValidationError("mixup alpha must be >= 0 (0 disables)")


# ---------------------------------------------------------------------------
# layers


def _im2col(x, stride):
    """3x3 same-padding im2col: (N,C,H,W) -> (C*9, N*Ho*Wo), one big GEMM operand."""
    N, C, H, W = x.shape
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, 3, 3, N, Ho, Wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(C * 9, N * Ho * Wo), Ho, Wo


def _col2im(dcols, x_shape, stride):
    N, C, H, W = x_shape
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    d6 = dcols.reshape(C, 3, 3, N, Ho, Wo)
    dxp = np.zeros((C, N, H + 2, W + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += d6[:, i, j]
    return np.ascontiguousarray(dxp[:, :, 1 : 1 + H, 1 : 1 + W].transpose(1, 0, 2, 3))


def _conv_forward(x, w, b, stride):
    cols, Ho, Wo = _im2col(x, stride)
    co = w.shape[0]
    out = np.matmul(w.reshape(co, -1), cols)
    if b is not None:
        out += b[:, None]
    out = out.reshape(co, x.shape[0], Ho, Wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _conv_backward(dout, cols, x_shape, w, stride, with_bias):
    co = dout.shape[1]
    d2 = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(co, -1)
    dw = np.matmul(d2, cols.T).reshape(w.shape)
    db = d2.sum(axis=1) if with_bias else None
    dcols = np.matmul(w.reshape(co, -1).T, d2)
    return dw, db, _col2im(dcols, x_shape, stride)


def _bn_forward(x, gamma, beta, rmean, rvar, train_mode):
    if train_mode:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        rmean *= 1.0 - _BN_MOMENTUM
        rmean += _BN_MOMENTUM * mean
        rvar *= 1.0 - _BN_MOMENTUM
        rvar += _BN_MOMENTUM * var
    else:
        mean, var = rmean, rvar
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv, train_mode)


def _bn_backward(dout, cache, gamma):
    xhat, inv, train_mode = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not train_mode:
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (inv[None, :, None, None] / m) * (
        m * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
    )
    return dx, dgamma, dbeta


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically stable."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# model


class Model:
    """The micro-CNN: parameter tensors, BN buffers, and velocity buffers."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)

        c_in = 1
        for i, ((_, _), c_out) in enumerate(zip(config.stages, config.stage_channels())):
            self._add_conv(rng, f"stage{i}.conv", c_in, c_out)
            if config.norm:
                self._add_bn(f"stage{i}.bn", c_out)
            if config.skip_connections:
                self._add_conv(rng, f"stage{i}.conv2", c_out, c_out)
                if config.norm:
                    self._add_bn(f"stage{i}.bn2", c_out)
            c_in = c_out

        bound = 1.0 / math.sqrt(c_in)
        self.params["head.w"] = rng.uniform(-bound, bound, size=(c_in, config.n_classes)).astype(self.dtype)
        self.params["head.b"] = np.zeros(config.n_classes, dtype=self.dtype)
        self.velocities = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _add_conv(self, rng, name, c_in, c_out):
        bound = 1.0 / math.sqrt(c_in * 9)
        self.params[f"{name}.w"] = rng.uniform(
            -bound, bound, size=(c_out, c_in, 3, 3)
        ).astype(self.dtype)
        # Bias is redundant (and has an identically zero gradient) when the
        # conv feeds a batch norm; BN beta provides the offset instead.
        if not self.config.norm:
            self.params[f"{name}.b"] = np.zeros(c_out, dtype=self.dtype)

    def _add_bn(self, name, c):
        self.params[f"{name}.gamma"] = np.ones(c, dtype=self.dtype)
        self.params[f"{name}.beta"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def state_names(self) -> list[str]:
        return list(self.params) + list(self.buffers)

    def _check_batch(self, batch):
        H, W = self.config.input_hw
        if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (H, W):
            raise ValidationError(
                f"batch shape {batch.shape} does not match (N, 1, {H}, {W})"
            )
        return np.ascontiguousarray(batch, dtype=self.dtype)

    def _forward_cached(self, batch, train_mode, rng):
        x = self._check_batch(batch)
        cfg = self.config
        caches = []
        for i in range(len(cfg.stages)):
            stride = cfg.stages[i][1]
            w = self.params[f"stage{i}.conv.w"]
            b = self.params.get(f"stage{i}.conv.b")
            x_shape = x.shape
            x, cols = _conv_forward(x, w, b, stride)
            bn_cache = None
            if cfg.norm:
                x, bn_cache = _bn_forward(
                    x,
                    self.params[f"stage{i}.bn.gamma"],
                    self.params[f"stage{i}.bn.beta"],
                    self.buffers[f"stage{i}.bn.running_mean"],
                    self.buffers[f"stage{i}.bn.running_var"],
                    train_mode,
                )
            relu_mask = x > 0
            x = x * relu_mask
            skip_cache = None
            if cfg.skip_connections:
                w2 = self.params[f"stage{i}.conv2.w"]
                b2 = self.params.get(f"stage{i}.conv2.b")
                y, cols2 = _conv_forward(x, w2, b2, 1)
                bn2_cache = None
                if cfg.norm:
                    y, bn2_cache = _bn_forward(
                        y,
                        self.params[f"stage{i}.bn2.gamma"],
                        self.params[f"stage{i}.bn2.beta"],
                        self.buffers[f"stage{i}.bn2.running_mean"],
                        self.buffers[f"stage{i}.bn2.running_var"],
                        train_mode,
                    )
                z = x + y
                relu2_mask = z > 0
                skip_cache = (cols2, x.shape, bn2_cache, relu2_mask)
                x = z * relu2_mask
            caches.append((x_shape, cols, bn_cache, relu_mask, skip_cache, stride))

        spatial = x.shape[2] * x.shape[3]
        feat = x.mean(axis=(2, 3))
        drop_mask = None
        if train_mode and cfg.dropout_rate > 0.0:
            if rng is None:
                raise ValidationError("train-mode forward with dropout needs an rng")
            keep = 1.0 - cfg.dropout_rate
            drop_mask = (rng.random(feat.shape) < keep).astype(self.dtype) / self.dtype.type(keep)
            feat = feat * drop_mask
        logits = feat @ self.params["head.w"] + self.params["head.b"]
        caches.append((x.shape, spatial, feat, drop_mask))
        return logits, caches

    def forward(self, batch, train_mode: bool = False, rng=None) -> np.ndarray:
        """Logits of shape (N, K); deterministic when ``train_mode`` is off."""
        logits, _ = self._forward_cached(batch, train_mode, rng)
        return logits

    def _backward(self, caches, dlogits):
        cfg = self.config
        grads = {}
        x_shape, spatial, feat, drop_mask = caches[-1]
        grads["head.w"] = feat.T @ dlogits
        grads["head.b"] = dlogits.sum(axis=0)
        dfeat = dlogits @ self.params["head.w"].T
        if drop_mask is not None:
            dfeat = dfeat * drop_mask
        dx = np.broadcast_to(
            (dfeat / spatial)[:, :, None, None], x_shape
        ).astype(dfeat.dtype)

        for i in reversed(range(len(cfg.stages))):
            x_in_shape, cols, bn_cache, relu_mask, skip_cache, stride = caches[i]
            if skip_cache is not None:
                cols2, mid_shape, bn2_cache, relu2_mask = skip_cache
                dz = dx * relu2_mask
                dy = dz
                if bn2_cache is not None:
                    dy, dg2, db2 = _bn_backward(dy, bn2_cache, self.params[f"stage{i}.bn2.gamma"])
                    grads[f"stage{i}.bn2.gamma"] = dg2
                    grads[f"stage{i}.bn2.beta"] = db2
                has_b2 = f"stage{i}.conv2.b" in self.params
                dw2, dbias2, dmid = _conv_backward(
                    dy, cols2, mid_shape, self.params[f"stage{i}.conv2.w"], 1, has_b2
                )
                grads[f"stage{i}.conv2.w"] = dw2
                if has_b2:
                    grads[f"stage{i}.conv2.b"] = dbias2
                dx = dz + dmid
            dx = dx * relu_mask
            if bn_cache is not None:
                dx, dg, db = _bn_backward(dx, bn_cache, self.params[f"stage{i}.bn.gamma"])
                grads[f"stage{i}.bn.gamma"] = dg
                grads[f"stage{i}.bn.beta"] = db
            has_b = f"stage{i}.conv.b" in self.params
            dw, dbias, dx = _conv_backward(
                dx, cols, x_in_shape, self.params[f"stage{i}.conv.w"], stride, has_b
            )
            grads[f"stage{i}.conv.w"] = dw
            if has_b:
                grads[f"stage{i}.conv.b"] = dbias
        return grads, dx


def forward(model: Model, batch, train_mode: bool = False, rng=None) -> np.ndarray:
    return model.forward(batch, train_mode=train_mode, rng=rng)


def _check_targets(targets, n_classes):
    t = np.asarray(targets)
    if t.ndim != 2 or t.shape[1] != n_classes:
        raise ValidationError(f"targets shape {t.shape} does not match class count {n_classes}")
    if np.any(t < -1e-9) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-5):
        raise ValidationError("targets must be probability vectors (rows summing to 1)")
    return t


def _loss_and_dlogits(logits, targets, kind):
    n = logits.shape[0]
    if kind == "cross_entropy":
        logp = _log_softmax(logits)
        loss = float(-(targets * logp).sum() / n)
        dlogits = (softmax(logits) - targets) / n
        return loss, dlogits
    # cosine: 1 - <p, t> / (|p| |t|) with p = softmax(logits)
    p = softmax(logits)
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    tn = np.linalg.norm(targets, axis=1, keepdims=True)
    s = (p * targets).sum(axis=1, keepdims=True)
    loss = float(np.mean(1.0 - s / (pn * tn)))
    dp = (s * p / (pn**2) - targets) / (pn * tn) / n
    dlogits = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    return loss, dlogits


def _smoothed(targets, alpha, k):
    if alpha == 0.0:
        return targets
    return (1.0 - alpha) * targets + alpha / k


def loss_and_gradients(
    model: Model,
    batch,
    target_distributions,
    loss_config: LossConfig,
    train_mode: bool = True,
    rng=None,
):
    """Loss scalar plus gradients for every parameter.

    Label smoothing is applied to the targets before the loss; targets must
    already be probability vectors.
    """
    targets = _check_targets(target_distributions, model.n_classes).astype(model.dtype)
    targets = _smoothed(targets, loss_config.label_smoothing_alpha, model.n_classes)
    logits, caches = model._forward_cached(batch, train_mode, rng)
    loss, dlogits = _loss_and_dlogits(logits, targets, loss_config.kind)
    grads, _ = model._backward(caches, dlogits.astype(model.dtype))
    return loss, grads


def input_gradient(
    model: Model,
    batch,
    target_distributions,
    loss_config: LossConfig,
    train_mode: bool = False,
    rng=None,
) -> np.ndarray:
    """Gradient of the loss with respect to the input batch (same shape)."""
    targets = _check_targets(target_distributions, model.n_classes).astype(model.dtype)
    targets = _smoothed(targets, loss_config.label_smoothing_alpha, model.n_classes)
    logits, caches = model._forward_cached(batch, train_mode, rng)
    _, dlogits = _loss_and_dlogits(logits, targets, loss_config.kind)
    _, dx = model._backward(caches, dlogits.astype(model.dtype))
    return dx


def sgd_step(model: Model, gradients: dict, lr: float, momentum: float,
             weight_decay: float = 1e-4) -> None:
    """One Nesterov SGD update, in place.

    v <- mu v - lr (g + wd w);  w <- w + mu v - lr (g + wd w), with the
    freshly updated v.
    """
    for name, w in model.params.items():
        g = gradients[name]
        if g.shape != w.shape:
            raise ValidationError(f"gradient shape mismatch for {name}")
        g_eff = g + weight_decay * w
        v = model.velocities[name]
        v *= momentum
        v -= lr * g_eff
        w += momentum * v - lr * g_eff


@dataclass(frozen=True)
class OneCycleSchedule:
    """Learning rate and momentum trajectory: warm up, then anneal."""

    total_steps: int
    lr_max: float
    lr_div: float = 10.0
    lr_final_div: float = 100.0
    momentum_max: float = 0.95
    momentum_min: float = 0.85
    peak_fraction: float = 0.3

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ValidationError("lr_max must be positive")
        if not 0.0 < self.peak_fraction < 1.0:
            raise ValidationError("peak fraction must be in (0, 1)")
        if self.total_steps < 3:
            raise ValidationError("schedule needs at least 3 steps")

    @property
    def peak_step(self) -> int:
        return int(np.clip(round(self.peak_fraction * (self.total_steps - 1)), 1,
                           self.total_steps - 2))


def _cos_interp(a: float, b: float, t: float) -> float:
    return a + (b - a) * 0.5 * (1.0 - math.cos(math.pi * t))


def one_cycle_at(schedule: OneCycleSchedule, step: int) -> tuple[float, float]:
    """(lr, momentum) at ``step``; endpoints and peak are reproduced exactly.

    The learning rate rises from lr_max/lr_div to lr_max over the warmup
    phase and anneals to lr_max/lr_final_div; momentum runs in anti-phase.
    """
    if not 0 <= step < schedule.total_steps:
        raise ValidationError(f"step {step} outside [0, {schedule.total_steps})")
    lr0 = schedule.lr_max / schedule.lr_div
    lr_end = schedule.lr_max / schedule.lr_final_div
    peak = schedule.peak_step
    if step == 0:
        return lr0, schedule.momentum_max
    if step == peak:
        return schedule.lr_max, schedule.momentum_min
    if step == schedule.total_steps - 1:
        return lr_end, schedule.momentum_max
    if step < peak:
        t = step / peak
        return (
            _cos_interp(lr0, schedule.lr_max, t),
            _cos_interp(schedule.momentum_max, schedule.momentum_min, t),
        )
    t = (step - peak) / (schedule.total_steps - 1 - peak)
    return (
        _cos_interp(schedule.lr_max, lr_end, t),
        _cos_interp(schedule.momentum_min, schedule.momentum_max, t),
    )


def mixup_batch(batch1, targets1, batch2, targets2, alpha: float, rng, lam=None):
    """Convex combinations of two batches and their label distributions.

    ``lam`` overrides the per-pair Beta(alpha, alpha) draw (used by tests
    and disabled-path plumbing).
    """
    if batch1.shape != batch2.shape or targets1.shape != targets2.shape:
        raise ValidationError("mixup inputs must have matching shapes")
    n = batch1.shape[0]
    if lam is None:
        if alpha <= 0:
            raise ValidationError("mixup alpha must be > 0")
        lam = rng.beta(alpha, alpha, size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=batch1.dtype), (n,))
    lam_x = lam.reshape((n,) + (1,) * (batch1.ndim - 1))
    lam_t = lam.reshape(n, 1)
    x = lam_x * batch1 + (1.0 - lam_x) * batch2
    t = lam_t * targets1 + (1.0 - lam_t) * targets2
    return x, t


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: Model, path) -> None:
    """Write a SARM checkpoint; tensors are stored float32 little-endian."""
    path = Path(path)
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        names = model.state_names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = model.params.get(name)
            if arr is None:
                arr = model.buffers[name]
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> Model:
    """Rebuild a Model from a SARM checkpoint, bit-exact for float32 models."""
    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise ValidationError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 8)
    config = ModelConfig.from_dict(json.loads(blob[12 : 12 + cfg_len].decode("utf-8")))
    off = 12 + cfg_len
    (n_tensors,) = struct.unpack_from("<I", blob, off)
    off += 4

    model = Model(config, seed=0, dtype=np.float32)
    names = model.state_names()
    if n_tensors != len(names):
        raise ValidationError(f"{path}: tensor count {n_tensors} does not match config")
    for name in names:
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
        target = model.params if name in model.params else model.buffers
        if target[name].shape != arr.shape:
            raise ValidationError(f"{path}: shape mismatch for {name}")
        target[name] = arr
    model.velocities = {k: np.zeros_like(v) for k, v in model.params.items()}
    return model

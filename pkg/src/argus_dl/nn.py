"""Small image classifiers with hand-written forward and backward passes.

Two architectures are supported:

* ``mlp``: flatten -> dense(hidden) -> ReLU -> dense(K)
* ``conv1``: 3x3 conv (stride 1, no padding) -> ReLU -> 2x2 max-pool -> dense(K)

Everything runs in float64 on numpy arrays. Inputs are ``(C, H, W)`` images or
``(B, C, H, W)`` batches; batched losses are means over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(ArithmeticError):
    """Raised when a public operation produces NaN or Inf."""


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


@dataclass(frozen=True)
class Arch:
    kind: str  # "mlp" | "conv1"
    in_shape: tuple[int, int, int]
    n_classes: int
    hidden: int = 128
    channels: int = 8

    def __post_init__(self):
        if self.kind not in ("mlp", "conv1"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        c, h, w = self.in_shape
        if self.kind == "conv1" and (h < 4 or w < 4):
            raise ValueError("conv1 needs inputs of at least 4x4")

    @property
    def pooled_shape(self) -> tuple[int, int, int]:
        _, h, w = self.in_shape
        return (self.channels, (h - 2) // 2, (w - 2) // 2)

    def layer_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        c, h, w = self.in_shape
        if self.kind == "mlp":
            return [((self.hidden, c * h * w), (self.hidden,)),
                    ((self.n_classes, self.hidden), (self.n_classes,))]
        f, ph, pw = self.pooled_shape
        return [((f, c, 3, 3), (f,)),
                ((self.n_classes, f * ph * pw), (self.n_classes,))]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(ws)) + int(np.prod(bs)) for ws, bs in self.layer_shapes())


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Ordered ``(weights, bias)`` pairs plus the architecture they belong to.

    Supports ``+``, ``-`` and scalar ``*``/``/`` so that gossip averaging can be
    written directly on models.
    """

    arch: Arch
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        shapes = self.arch.layer_shapes()
        if len(shapes) != len(self.layers):
            raise ValueError("layer count does not match architecture")
        for (ws, bs), (w, b) in zip(shapes, self.layers):
            if w.shape != ws or b.shape != bs:
                raise ValueError(f"layer shape {w.shape}/{b.shape} != {ws}/{bs}")

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for wb in self.layers for a in wb])

    @classmethod
    def unflatten(cls, arch: Arch, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {vec.shape}")
        layers, pos = [], 0
        for ws, bs in arch.layer_shapes():
            nw, nb = int(np.prod(ws)), int(np.prod(bs))
            w = vec[pos:pos + nw].reshape(ws).copy()
            pos += nw
            b = vec[pos:pos + nb].reshape(bs).copy()
            pos += nb
            layers.append((w, b))
        return cls(arch, tuple(layers))

    def _binary(self, other: "ModelParams", op) -> "ModelParams":
        if not isinstance(other, ModelParams):
            return NotImplemented
        if other.arch != self.arch:
            raise ValueError("architecture mismatch")
        return ModelParams(self.arch, tuple(
            (op(w1, w2), op(b1, b2)) for (w1, b1), (w2, b2) in zip(self.layers, other.layers)))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, s: float) -> "ModelParams":
        return ModelParams(self.arch, tuple((w * s, b * s) for w, b in self.layers))

    __rmul__ = __mul__

    def __truediv__(self, s: float) -> "ModelParams":
        return self * (1.0 / s)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(w * w) + np.sum(b * b) for w, b in self.layers)))

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        return self.arch == other.arch and np.allclose(
            self.flatten(), other.flatten(), rtol=0.0, atol=atol)

    def zeros_like(self) -> "ModelParams":
        return self * 0.0


@dataclass(frozen=True, eq=False)
class GradBundle:
    param_grads: ModelParams
    input_grad: np.ndarray


def init_model(arch: Arch, rng: np.random.Generator) -> ModelParams:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    layers = []
    for ws, bs in arch.layer_shapes():
        fan_in = int(np.prod(ws[1:]))
        bound = np.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, size=ws), np.zeros(bs)))
    return ModelParams(arch, tuple(layers))


def mean_model(models: Sequence[ModelParams]) -> ModelParams:
    if not models:
        raise ValueError("cannot average an empty list of models")
    arch = models[0].arch
    if any(m.arch != arch for m in models):
        raise ValueError("architecture mismatch")
    vec = np.mean([m.flatten() for m in models], axis=0)
    return ModelParams.unflatten(arch, vec)


# --------------------------------------------------------------------------
# forward / backward


def _as_batch(arch: Arch, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == arch.in_shape:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == arch.in_shape:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match {arch.in_shape}")


def _forward(model: ModelParams, xb: np.ndarray):
    arch = model.arch
    b = xb.shape[0]
    if arch.kind == "mlp":
        (w1, b1), (w2, b2) = model.layers
        flat = xb.reshape(b, -1)
        pre = flat @ w1.T + b1
        hid = np.maximum(pre, 0.0)
        logits = hid @ w2.T + b2
        return logits, (flat, pre, hid)
    (wc, bc), (wd, bd) = model.layers
    _, c, h, w = xb.shape
    ho, wo = h - 2, w - 2
    f, ph, pw = arch.pooled_shape
    # im2col: (B*Ho*Wo, C*9), column order matches wc.reshape(F, C*9)
    cols = sliding_window_view(xb, (3, 3), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(b * ho * wo, c * 9)
    conv = (cols @ wc.reshape(f, -1).T + bc).reshape(b, ho, wo, f)  # channel-last
    act = np.maximum(conv, 0.0)
    # 2x2 max-pool over the four block positions in row-major order
    quads = [act[:, di:2 * ph:2, dj:2 * pw:2] for di in (0, 1) for dj in (0, 1)]
    pooled = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    flat = pooled.transpose(0, 3, 1, 2).reshape(b, -1)
    logits = flat @ wd.T + bd
    return logits, (cols, conv, quads, pooled, flat)


def _backward(model: ModelParams, xb: np.ndarray, cache, dlogits: np.ndarray,
              need_params: bool = True):
    """Backpropagate ``dlogits`` (B, K); returns (param grads or None, input grads)."""
    arch = model.arch
    b = xb.shape[0]
    if arch.kind == "mlp":
        (w1, _), (w2, _) = model.layers
        flat, pre, hid = cache
        dhid = (dlogits @ w2) * (pre > 0)
        dx = (dhid @ w1).reshape(xb.shape)
        if not need_params:
            return None, dx
        gw2 = dlogits.T @ hid
        gb2 = dlogits.sum(axis=0)
        gw1 = dhid.T @ flat
        gb1 = dhid.sum(axis=0)
        return ModelParams(arch, ((gw1, gb1), (gw2, gb2))), dx
    (wc, _), (wd, _) = model.layers
    cols, conv, quads, pooled, flat = cache
    f, ph, pw = arch.pooled_shape
    dpool = (dlogits @ wd).reshape(b, f, ph, pw).transpose(0, 2, 3, 1)
    # route to the first maximal position; positive pre-activations only
    dconv = np.zeros_like(conv)
    taken = np.zeros(pooled.shape, dtype=bool)
    for q, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        hit = (quads[q] == pooled) & ~taken
        taken |= hit
        dconv[:, di:2 * ph:2, dj:2 * pw:2] = np.where(hit, dpool, 0.0)
    dconv *= conv > 0
    ho, wo = conv.shape[1], conv.shape[2]
    c = xb.shape[1]
    dflat = dconv.reshape(-1, f)
    dcols = (dflat @ wc.reshape(f, -1)).reshape(b, ho, wo, c, 3, 3)
    dx = np.zeros((b, ho + 2, wo + 2, c))
    for i in range(3):
        for j in range(3):
            dx[:, i:i + ho, j:j + wo] += dcols[..., i, j]
    dx = dx.transpose(0, 3, 1, 2)
    if not need_params:
        return None, dx
    gwd = dlogits.T @ flat
    gbd = dlogits.sum(axis=0)
    gwc = (dflat.T @ cols).reshape(wc.shape)
    gbc = dflat.sum(axis=0)
    return ModelParams(arch, ((gwc, gbc), (gwd, gbd))), dx


def forward(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Raw class scores: shape ``(K,)`` for one image, ``(B, K)`` for a batch."""
    xb, single = _as_batch(model.arch, x)
    logits, _ = _forward(model, xb)
    _check_finite(logits, "logits")
    return logits[0] if single else logits


def predict(model: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, x), axis=-1)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_ce(logits: np.ndarray, label) -> float:
    """Cross-entropy ``-log softmax(logits)[label]``, averaged over a batch."""
    logits = np.asarray(logits, dtype=np.float64)
    lb = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(label))
    k = lb.shape[1]
    if labels.shape[0] != lb.shape[0]:
        raise ValueError("one label per row of logits required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = _log_softmax(lb)
    return float(-np.mean(logp[np.arange(lb.shape[0]), labels]))


def backward(model: ModelParams, x: np.ndarray, label) -> GradBundle:
    """Exact gradients of the (batch-mean) cross-entropy loss."""
    xb, single = _as_batch(model.arch, x)
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape[0] != xb.shape[0]:
        raise ValueError("one label per input required")
    k = model.arch.n_classes
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    logits, cache = _forward(model, xb)
    probs = np.exp(_log_softmax(logits))
    dlogits = probs
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)
    grads, dx = _backward(model, xb, cache, dlogits)
    _check_finite(grads.flatten(), "parameter gradients")
    return GradBundle(grads, _check_finite(dx[0] if single else dx, "input gradient"))


def logit_diff_input_grad(model: ModelParams, x: np.ndarray, y: int, z: int) -> np.ndarray:
    """Gradient of ``logits[y] - logits[z]`` with respect to the input(s)."""
    if y == z:
        raise ValueError("y and z must differ")
    k = model.arch.n_classes
    if not (0 <= y < k and 0 <= z < k):
        raise ValueError("class index out of range")
    xb, single = _as_batch(model.arch, x)
    _, cache = _forward(model, xb)
    dlogits = np.zeros((xb.shape[0], k))
    dlogits[:, y] = 1.0
    dlogits[:, z] = -1.0
    _, dx = _backward(model, xb, cache, dlogits, need_params=False)
    return _check_finite(dx[0] if single else dx, "input gradient")


def input_jacobian(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Per-sample gradients of every logit: shape ``(B, K, C, H, W)``."""
    xb, _ = _as_batch(model.arch, x)
    b, k = xb.shape[0], model.arch.n_classes
    rep = np.repeat(xb, k, axis=0)
    _, cache = _forward(model, rep)
    dlogits = np.tile(np.eye(k), (b, 1))
    _, dx = _backward(model, rep, cache, dlogits, need_params=False)
    return dx.reshape((b, k) + model.arch.in_shape)


def input_loss_grad(model: ModelParams, xb: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample input gradients of the (unaveraged) cross-entropy loss."""
    xb, _ = _as_batch(model.arch, xb)
    logits, cache = _forward(model, xb)
    dlogits = np.exp(_log_softmax(logits))
    dlogits[np.arange(len(labels)), labels] -= 1.0
    _, dx = _backward(model, xb, cache, dlogits, need_params=False)
    return dx


def sgd_step(model: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if grads.arch != model.arch:
        raise ValueError("gradient shape mismatch")
    out = model - grads * lr
    _check_finite(out.flatten(), "parameters")
    return out

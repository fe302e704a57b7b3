"""Minimal trainable network substrate: dense, conv2d and relu layers with
explicit backpropagation, softmax cross-entropy, SGD and gradient checking.

All training arithmetic is float64. Layers cache their forward context so a
backward pass can run without recomputation; :class:`Network` owns the layer
stack plus the feature-extractor/classifier split used by the distillation
code. The functional kernels (``dense_forward`` etc.) are shared with the
quantization-aware student, which substitutes its own effective weights.
"""

from __future__ import annotations

import base64
import json

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input/parameter shapes do not line up; message names the layer."""


class NonFiniteGradientError(ValueError):
    """An SGD step saw a NaN or infinite gradient and was rejected."""


class Tensor:
    """Shape-tagged float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data, shape=None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            if int(np.prod(shape)) != arr.size:
                raise ShapeError(f"cannot view {arr.size} values as shape {tuple(shape)}")
            arr = arr.reshape(shape)
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def add_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Batch:
    """A batch of inputs plus integer class labels."""

    def __init__(self, inputs, labels):
        self.inputs = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ShapeError("labels must be a flat sequence of class indices")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"batch size mismatch: {self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )
        if np.any(self.labels < 0):
            raise ValueError("class indices must be nonnegative")

    def __len__(self) -> int:
        return self.labels.shape[0]


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Symmetric uniform init scaled by fan-in."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Functional kernels. Each forward returns (output, ctx); the matching
# backward consumes ctx and returns (dx, dw, db). The quantized student calls
# these directly with substituted effective weights.
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    """y = x_flat @ w.T + b with x flattened row-major to [B, in_features]."""
    xb = x.reshape(x.shape[0], -1)
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"dense expects {w.shape[1]} input features, got {xb.shape[1]}")
    y = xb @ w.T
    if b is not None:
        y = y + b
    return y, (xb, x.shape, w)


def dense_backward(dy: np.ndarray, ctx):
    xb, xshape, w = ctx
    dx = (dy @ w).reshape(xshape)
    dw = dy.T @ xb
    db = dy.sum(axis=0)
    return dx, dw, db


def _im2col(x: np.ndarray, k: int):
    b, c, h, wd = x.shape
    oh, ow = h - k + 1, wd - k + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d kernel {k} larger than input {h}x{wd}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # [B, C, OH, OW, k, k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k * k)
    return np.ascontiguousarray(cols), (oh, ow)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    """Valid-padding stride-1 convolution; w is [OC, C, k, k]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W] input, got shape {x.shape}")
    oc, c, k, _ = w.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d expects {c} input channels, got {x.shape[1]}")
    cols, (oh, ow) = _im2col(x, k)
    wr = w.reshape(oc, c * k * k)
    y = cols @ wr.T  # [B, OH*OW, OC]
    if b is not None:
        y = y + b
    y = y.transpose(0, 2, 1).reshape(x.shape[0], oc, oh, ow)
    return y, (cols, x.shape, w, oh, ow)


def conv2d_backward(dy: np.ndarray, ctx):
    cols, xshape, w, oh, ow = ctx
    bsz = xshape[0]
    oc, c, k, _ = w.shape
    dyr = dy.reshape(bsz, oc, oh * ow).transpose(0, 2, 1)  # [B, OH*OW, OC]
    wr = w.reshape(oc, c * k * k)
    dw = np.einsum("bpo,bpi->oi", dyr, cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dcols = (dyr @ wr).reshape(bsz, oh, ow, c, k, k)
    dx = np.zeros(xshape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + oh, j : j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x


def relu_backward(dy: np.ndarray, ctx):
    return dy * (ctx > 0.0)


# ---------------------------------------------------------------------------
# Layers and the network container.
# ---------------------------------------------------------------------------

class Layer:
    kind = "base"

    def params(self) -> list[Tensor]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, *, bias=True, rng=None, weights=None):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        if weights is not None:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (self.out_features, self.in_features):
                raise ShapeError(f"dense weights must be [{out_features}, {in_features}]")
        else:
            rng = rng if rng is not None else np.random.default_rng()
            w = init_uniform(rng, (self.out_features, self.in_features), self.in_features)
        self.weights = Tensor(w)
        self.bias = Tensor(np.zeros(self.out_features)) if bias else None
        self._ctx = None

    def params(self):
        return [self.weights] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        y, self._ctx = dense_forward(x, self.weights.data, None if self.bias is None else self.bias.data)
        return y

    def backward(self, dy):
        if self._ctx is None:
            raise RuntimeError("dense backward called before forward")
        dx, dw, db = dense_backward(dy, self._ctx)
        self.weights.add_grad(dw)
        if self.bias is not None:
            self.bias.add_grad(db)
        return dx


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, *, bias=True, rng=None, weights=None):
        k = int(kernel_size)
        if k % 2 != 1:
            raise ShapeError(f"conv2d kernel size must be odd, got {k}")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = k
        shape = (self.out_channels, self.in_channels, k, k)
        if weights is not None:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != shape:
                raise ShapeError(f"conv2d weights must be {shape}")
        else:
            rng = rng if rng is not None else np.random.default_rng()
            w = init_uniform(rng, shape, self.in_channels * k * k)
        self.weights = Tensor(w)
        self.bias = Tensor(np.zeros(self.out_channels)) if bias else None
        self._ctx = None

    def params(self):
        return [self.weights] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        y, self._ctx = conv2d_forward(x, self.weights.data, None if self.bias is None else self.bias.data)
        return y

    def backward(self, dy):
        if self._ctx is None:
            raise RuntimeError("conv2d backward called before forward")
        dx, dw, db = conv2d_backward(dy, self._ctx)
        self.weights.add_grad(dw)
        if self.bias is not None:
            self.bias.add_grad(db)
        return dx


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._ctx = None

    def forward(self, x):
        y, self._ctx = relu_forward(x)
        return y

    def backward(self, dy):
        if self._ctx is None:
            raise RuntimeError("relu backward called before forward")
        return relu_backward(dy, self._ctx)


class Network:
    """Ordered layer stack split into a feature extractor and a classifier.

    ``feature_cut`` is the index of the first classifier layer; the features
    returned by :meth:`forward` are the (flattened) output of the layer just
    before it.
    """

    def __init__(self, layers: list[Layer], feature_cut: int):
        if not 0 < feature_cut < len(layers):
            raise ValueError(f"feature_cut must lie strictly inside the stack, got {feature_cut}")
        self.layers = list(layers)
        self.feature_cut = int(feature_cut)
        self._forward_done = False

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: np.ndarray):
        """Run the stack; returns (logits, features[B, F])."""
        x = np.asarray(x, dtype=np.float64)
        features = None
        feature_shape = None
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            if i == self.feature_cut - 1:
                feature_shape = x.shape
                features = x.reshape(x.shape[0], -1)
        self._feature_shape = feature_shape
        self._forward_done = True
        return x, features

    def backward(self, dlogits: np.ndarray, dfeatures: np.ndarray | None = None) -> np.ndarray:
        """Backpropagate; returns the gradient w.r.t. the network input.

        ``dfeatures`` (shape [B, F]) is injected at the feature-cut point,
        letting a critic pull on the feature extractor.
        """
        if not self._forward_done:
            raise RuntimeError("backward called before forward; no cached activations")
        dy = np.asarray(dlogits, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            if dfeatures is not None and i == self.feature_cut - 1:
                dy = dy + np.asarray(dfeatures, dtype=np.float64).reshape(self._feature_shape)
            dy = self.layers[i].backward(dy)
        return dy

    def input_gradient(self, batch: "Batch") -> np.ndarray:
        """Gradient of the cross-entropy loss w.r.t. the batch inputs."""
        logits, _ = self.forward(batch.inputs.data)
        _, dlogits = cross_entropy(logits, batch.labels)
        self.zero_grad()
        return self.backward(dlogits)


def forward_pass(net: Network, batch: Batch):
    """Convenience wrapper returning (logits, features) for a batch."""
    return net.forward(batch.inputs.data)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy; returns (loss, dloss/dlogits)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if np.any(labels >= c):
        raise ValueError(f"label out of range: max {labels.max()} >= {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=1, keepdims=True)
    loss = float(-np.mean(np.log(probs[np.arange(b), labels])))
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return loss, dlogits


def backward_pass(net: Network, batch: Batch, loss_kind: str = "cross_entropy"):
    """Forward + loss + backward; populates .grad on every parameter.

    Returns (loss, input_gradient).
    """
    if loss_kind != "cross_entropy":
        raise ValueError(f"unsupported loss kind: {loss_kind}")
    logits, _ = net.forward(batch.inputs.data)
    loss, dlogits = cross_entropy(logits, batch.labels)
    dx = net.backward(dlogits)
    return loss, dx


def sgd_update(params: list[Tensor], grads: list[np.ndarray], lr: float) -> None:
    """In-place p <- p - lr * g; rejects non-finite gradients before touching p."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for i, g in enumerate(grads):
        if g is None:
            raise NonFiniteGradientError(f"parameter {i} has no gradient")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i}; step rejected")
    for p, g in zip(params, grads):
        p.data -= lr * np.asarray(g)


def apply_sgd(net: Network, lr: float) -> None:
    params = net.parameters()
    sgd_update(params, [p.grad for p in params], lr)


def grad_check(model, batch: Batch, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients
    of the cross-entropy loss over every parameter element.

    ``model`` is any object with forward/backward/parameters/zero_grad in
    the :class:`Network` shape (the quantization-aware student qualifies).
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    model.zero_grad()
    logits, _ = model.forward(batch.inputs.data)
    _, dlogits = cross_entropy(logits, batch.labels)
    model.backward(dlogits)
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp, _ = cross_entropy(model.forward(batch.inputs.data)[0], batch.labels)
            flat[idx] = orig - eps
            lm, _ = cross_entropy(model.forward(batch.inputs.data)[0], batch.labels)
            flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            denom = max(abs(aflat[idx]), abs(fd), 1e-12)
            worst = max(worst, abs(aflat[idx] - fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint serialization. Arrays are stored as little-endian float64 bytes
# (base64) so a load round-trips bitwise.
# ---------------------------------------------------------------------------

def _encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "dtype": "<f8",
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(rec: dict) -> np.ndarray:
    raw = base64.b64decode(rec["data"])
    arr = np.frombuffer(raw, dtype=rec["dtype"]).astype(np.float64, copy=True)
    return arr.reshape(rec["shape"])


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            rec = {
                "kind": "dense",
                "in_features": layer.in_features,
                "out_features": layer.out_features,
                "weights": _encode_array(layer.weights.data),
                "bias": _encode_array(layer.bias.data) if layer.bias is not None else None,
            }
        elif isinstance(layer, Conv2d):
            rec = {
                "kind": "conv2d",
                "in_channels": layer.in_channels,
                "out_channels": layer.out_channels,
                "kernel_size": layer.kernel_size,
                "weights": _encode_array(layer.weights.data),
                "bias": _encode_array(layer.bias.data) if layer.bias is not None else None,
            }
        elif isinstance(layer, ReLU):
            rec = {"kind": "relu"}
        else:
            raise ValueError(f"cannot serialize layer kind {layer.kind}")
        layers.append(rec)
    return {"version": CHECKPOINT_VERSION, "feature_cut": net.feature_cut, "layers": layers}


def network_from_dict(doc: dict) -> Network:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {doc.get('version')}")
    layers: list[Layer] = []
    for rec in doc["layers"]:
        kind = rec["kind"]
        if kind == "dense":
            layer = Dense(
                rec["in_features"],
                rec["out_features"],
                bias=rec["bias"] is not None,
                weights=_decode_array(rec["weights"]),
            )
            if rec["bias"] is not None:
                layer.bias = Tensor(_decode_array(rec["bias"]))
        elif kind == "conv2d":
            layer = Conv2d(
                rec["in_channels"],
                rec["out_channels"],
                rec["kernel_size"],
                bias=rec["bias"] is not None,
                weights=_decode_array(rec["weights"]),
            )
            if rec["bias"] is not None:
                layer.bias = Tensor(_decode_array(rec["bias"]))
        elif kind == "relu":
            layer = ReLU()
        else:
            raise ValueError(f"unknown layer kind in checkpoint: {kind}")
        layers.append(layer)
    return Network(layers, doc["feature_cut"])


def network_bytes(net: Network) -> bytes:
    """Canonical byte serialization, used for immutability/determinism checks."""
    return json.dumps(network_to_dict(net), sort_keys=True).encode("ascii")


def save_checkpoint(net: Network, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(network_to_dict(net), fh, sort_keys=True)


def load_checkpoint(path) -> Network:
    with open(path, "r", encoding="ascii") as fh:
        return network_from_dict(json.load(fh))

"""Quantization-aware student network.

Each weighted layer keeps a *latent* float tensor (the teacher's weights,
standardized) plus a frozen output scale. The forward pass substitutes
effective weights built from the latent tensor:

- ``"quant"`` mode uses the dequantized 2-bit codes times the scale. This is
  the function the integer engine reproduces bit-for-bit.
- ``"surrogate"`` mode keeps latent values inside the straight-through
  window unchanged and quantizes only the tails, so the training forward
  agrees with the straight-through gradient mask.

Activations after each relu are clipped to [0, 1] and snapped to the
three-level grid {0, q, 1} of the producing layer (softly in surrogate
mode). Logits are never quantized.
"""

from __future__ import annotations

import json

import numpy as np

from . import nn
from .nn import Batch, Network, ShapeError, Tensor
from .quantizer import (
    CutoffSchedule,
    QuantDictionary,
    build_dictionary,
    dictionary_for_exponents,
    quantize_activations,
    quantize_tensor,
    select_balance_bias,
    surrogate_activations,
    surrogate_weights,
)
from .tdist import DEFAULT_DOF, DOF_MAX, MIN_ELEMENTS, WeightStats, standardize_weights

MODES = ("quant", "surrogate")


class _StudentWeighted:
    """Shared machinery for dense/conv student layers."""

    kind = "weighted"

    def __init__(self, latent: np.ndarray, scale: float, bias: np.ndarray | None,
                 qdict: QuantDictionary, schedule: CutoffSchedule, stats: WeightStats | None):
        if scale <= 0 or not np.isfinite(scale):
            raise ValueError(f"output scale must be positive, got {scale}")
        self.latent = Tensor(latent)
        self.scale = float(scale)
        self.bias = Tensor(bias) if bias is not None else None
        self.qdict = qdict
        self.schedule = schedule
        self.stats = stats
        self._ctx = None
        self._mask = None

    def params(self) -> list[Tensor]:
        return [self.latent] + ([self.bias] if self.bias is not None else [])

    def effective_weights(self, mode: str, cutoff: float) -> np.ndarray:
        lat = self.latent.data
        if mode == "quant":
            bias = select_balance_bias(lat, self.qdict)
            _, deq = quantize_tensor(lat, self.qdict, bias)
            self._mask = None
            return deq * self.scale
        ws = surrogate_weights(lat, self.qdict, cutoff)
        self._mask = np.abs(lat) <= cutoff
        return ws * self.scale

    def _kernel_forward(self, x, w, b):  # pragma: no cover - abstract
        raise NotImplementedError

    def _kernel_backward(self, dy, ctx):  # pragma: no cover - abstract
        raise NotImplementedError

    def forward(self, x: np.ndarray, mode: str, cutoff: float) -> np.ndarray:
        w = self.effective_weights(mode, cutoff)
        y, self._ctx = self._kernel_forward(x, w, None if self.bias is None else self.bias.data)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._ctx is None:
            raise RuntimeError("backward called before forward")
        if self._mask is None:
            raise RuntimeError("gradients are only defined in surrogate mode")
        dx, dw, db = self._kernel_backward(dy, self._ctx)
        self.latent.add_grad(dw * self.scale * self._mask)
        if self.bias is not None:
            self.bias.add_grad(db)
        return dx

    def quantized_codes(self) -> tuple[np.ndarray, np.ndarray]:
        """Codes plus dequantized levels under the balance-biased rule."""
        lat = self.latent.data
        bias = select_balance_bias(lat, self.qdict)
        return quantize_tensor(lat, self.qdict, bias)


class StudentDense(_StudentWeighted):
    kind = "dense"

    def _kernel_forward(self, x, w, b):
        return nn.dense_forward(x, w, b)

    def _kernel_backward(self, dy, ctx):
        return nn.dense_backward(dy, ctx)


class StudentConv2d(_StudentWeighted):
    kind = "conv2d"

    def _kernel_forward(self, x, w, b):
        return nn.conv2d_forward(x, w, b)

    def _kernel_backward(self, dy, ctx):
        return nn.conv2d_backward(dy, ctx)


class StudentReLUQuant:
    """Relu fused with activation quantization onto {0, q, 1}.

    Uses the dictionary of the weighted layer that produced its input. In
    surrogate mode values at or below the cutoff pass through untouched and
    the straight-through mask zeroes gradients above it.
    """

    kind = "relu_quant"

    def __init__(self, qdict: QuantDictionary, schedule: CutoffSchedule):
        self.qdict = qdict
        self.schedule = schedule
        self._pre = None
        self._mask = None

    def params(self) -> list[Tensor]:
        return []

    def forward(self, x: np.ndarray, mode: str, cutoff: float) -> np.ndarray:
        r = np.maximum(x, 0.0)
        self._pre = x
        if mode == "quant":
            self._mask = None
            _, vals = quantize_activations(r, self.qdict)
            return vals
        self._mask = r <= cutoff
        return surrogate_activations(r, self.qdict, cutoff)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._pre is None:
            raise RuntimeError("backward called before forward")
        if self._mask is None:
            raise RuntimeError("gradients are only defined in surrogate mode")
        return dy * self._mask * (self._pre > 0.0)


StudentLayer = _StudentWeighted | StudentReLUQuant


class QuantizedStudent:
    """Stack of student layers with a step counter driving the cutoff.

    Layer indices mirror the source network one-for-one (relu layers become
    fused relu+quant nodes), so ``feature_cut`` carries over unchanged.
    """

    def __init__(self, layers: list[StudentLayer], feature_cut: int):
        if not 0 < feature_cut < len(layers):
            raise ValueError(f"feature_cut must lie strictly inside the stack, got {feature_cut}")
        self.layers = layers
        self.feature_cut = int(feature_cut)
        self.step = 0
        self._forward_done = False

    # -- construction -------------------------------------------------------

    @classmethod
    def from_network(
        cls,
        net: Network,
        *,
        dof: float | str = DEFAULT_DOF,
        n_max: float = DOF_MAX,
        c0: float = 3.0,
        warmup_steps: int = 150,
    ) -> "QuantizedStudent":
        """Build a student from a trained float network.

        Weights are standardized per layer; the sample std becomes the frozen
        output scale and the mean is dropped (training re-absorbs it).
        ``dof`` is either a fixed degrees-of-freedom value or ``"auto"`` to
        fit each layer by kurtosis matching; layers too small to fit fall
        back to the default.
        """
        if isinstance(dof, str) and dof != "auto":
            raise ValueError(f"dof must be a number or 'auto', got {dof!r}")
        layers: list[StudentLayer] = []
        last_weighted: _StudentWeighted | None = None
        for i, layer in enumerate(net.layers):
            if isinstance(layer, (nn.Dense, nn.Conv2d)):
                w = layer.weights.data
                if dof == "auto" and w.size >= MIN_ELEMENTS:
                    latent, stats = standardize_weights(w, n_max)
                    layer_dof = stats.dof
                else:
                    mean = float(w.mean())
                    std = float(w.std(ddof=1)) if w.size > 1 else 0.0
                    if std == 0.0:
                        raise ValueError(f"layer {i}: cannot standardize a constant tensor")
                    latent = (w - mean) / std
                    layer_dof = float(dof) if dof != "auto" else DEFAULT_DOF
                    stats = None
                qdict = build_dictionary(layer_dof)
                sched = CutoffSchedule(c0=c0, warmup_steps=warmup_steps, terminal=qdict.q)
                scale = float(w.std(ddof=1))
                bias = layer.bias.data.copy() if layer.bias is not None else None
                klass = StudentDense if isinstance(layer, nn.Dense) else StudentConv2d
                last_weighted = klass(latent, scale, bias, qdict, sched, stats)
                layers.append(last_weighted)
            elif isinstance(layer, nn.ReLU):
                if last_weighted is None:
                    raise ValueError(f"layer {i}: relu before any weighted layer")
                layers.append(StudentReLUQuant(last_weighted.qdict, last_weighted.schedule))
            else:
                raise ValueError(f"layer {i}: cannot quantize layer kind {layer.kind}")
        return cls(layers, net.feature_cut)

    # -- training surface ----------------------------------------------------

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def advance(self, steps: int = 1) -> None:
        if steps < 0:
            raise ValueError("cannot rewind the schedule")
        self.step += steps

    def sgd_step(self, lr: float) -> None:
        """One SGD step with the latent learning rate corrected per layer.

        Effective weights are ``scale * q(latent)``, so the latent gradient
        carries a factor of ``scale`` and a plain step would move the
        effective weights by ``lr * scale**2`` times their gradient. Dividing
        the latent step by ``scale**2`` restores weight-space step length;
        without it, small-scale layers train arbitrarily slowly and a
        random-initialized student never leaves its starting codes.
        """
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        for layer in self.layers:
            if not isinstance(layer, _StudentWeighted):
                continue
            if layer.latent.grad is not None:
                layer.latent.data -= (lr / layer.scale**2) * layer.latent.grad
            if layer.bias is not None and layer.bias.grad is not None:
                layer.bias.data -= lr * layer.bias.grad

    def cutoff_for(self, layer: StudentLayer) -> float:
        return layer.schedule.value(self.step)

    def forward(self, x: np.ndarray, mode: str = "surrogate"):
        """Run the stack; returns (logits, features[B, F])."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        features = None
        self._feature_shape = None
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, mode, self.cutoff_for(layer))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            if i == self.feature_cut - 1:
                self._feature_shape = x.shape
                features = x.reshape(x.shape[0], -1)
        self._forward_done = True
        return x, features

    def backward(self, dlogits: np.ndarray, dfeatures: np.ndarray | None = None) -> np.ndarray:
        if not self._forward_done:
            raise RuntimeError("backward called before forward; no cached activations")
        dy = np.asarray(dlogits, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            if dfeatures is not None and i == self.feature_cut - 1:
                dy = dy + np.asarray(dfeatures, dtype=np.float64).reshape(self._feature_shape)
            dy = self.layers[i].backward(dy)
        return dy

    def input_gradient(self, batch: Batch) -> np.ndarray:
        """Gradient of the cross-entropy loss w.r.t. the batch inputs,
        computed through the surrogate graph."""
        logits, _ = self.forward(batch.inputs.data, mode="surrogate")
        _, dlogits = nn.cross_entropy(logits, batch.labels)
        self.zero_grad()
        return self.backward(dlogits)

    # -- reporting -----------------------------------------------------------

    def weighted_layers(self) -> list[_StudentWeighted]:
        return [l for l in self.layers if isinstance(l, _StudentWeighted)]

    def to_bytes(self) -> bytes:
        """Canonical bytes of all latent state, for determinism checks."""
        parts = []
        for layer in self.layers:
            if isinstance(layer, _StudentWeighted):
                parts.append(np.ascontiguousarray(layer.latent.data, dtype="<f8").tobytes())
                if layer.bias is not None:
                    parts.append(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
        return b"".join(parts)


# ---------------------------------------------------------------------------
# Checkpointing. Latents round-trip bitwise like plain network checkpoints.
# ---------------------------------------------------------------------------

STUDENT_CHECKPOINT_VERSION = 1


def student_to_dict(student: QuantizedStudent) -> dict:
    layers = []
    for layer in student.layers:
        if isinstance(layer, _StudentWeighted):
            layers.append({
                "kind": layer.kind,
                "latent": nn._encode_array(layer.latent.data),
                "bias": nn._encode_array(layer.bias.data) if layer.bias is not None else None,
                "scale": layer.scale,
                "shift_exponents": list(layer.qdict.shift_exponents),
                "schedule": {
                    "c0": layer.schedule.c0,
                    "warmup_steps": layer.schedule.warmup_steps,
                    "terminal": layer.schedule.terminal,
                },
            })
        else:
            layers.append({"kind": "relu_quant"})
    return {
        "version": STUDENT_CHECKPOINT_VERSION,
        "feature_cut": student.feature_cut,
        "step": student.step,
        "layers": layers,
    }


def student_from_dict(doc: dict) -> QuantizedStudent:
    if doc.get("version") != STUDENT_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported student checkpoint version: {doc.get('version')}")
    layers: list[StudentLayer] = []
    last: _StudentWeighted | None = None
    for rec in doc["layers"]:
        if rec["kind"] in ("dense", "conv2d"):
            qdict = dictionary_for_exponents(*rec["shift_exponents"])
            sched = CutoffSchedule(**rec["schedule"])
            klass = StudentDense if rec["kind"] == "dense" else StudentConv2d
            last = klass(
                nn._decode_array(rec["latent"]),
                rec["scale"],
                nn._decode_array(rec["bias"]) if rec["bias"] is not None else None,
                qdict,
                sched,
                None,
            )
            layers.append(last)
        elif rec["kind"] == "relu_quant":
            if last is None:
                raise ValueError("relu before any weighted layer in checkpoint")
            layers.append(StudentReLUQuant(last.qdict, last.schedule))
        else:
            raise ValueError(f"unknown layer kind in student checkpoint: {rec['kind']}")
    student = QuantizedStudent(layers, doc["feature_cut"])
    student.step = int(doc["step"])
    return student


def save_student(student: QuantizedStudent, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(student_to_dict(student), fh, sort_keys=True)


def load_student(path) -> QuantizedStudent:
    with open(path, "r", encoding="ascii") as fh:
        return student_from_dict(json.load(fh))

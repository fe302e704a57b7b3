"""Multiplier-free integer inference.

Activations live on a fixed-point grid with ``frac_bits`` fractional bits.
Each weight application is a shift-add: outer levels (+-1) pass the
activation through with a sign, inner levels (+-q, q = s/8) add two
right-shifted copies. Accumulation happens three bits wider than the
activation grid so the two shifts are always exact, which makes the whole
integer path bit-identical to a float reference that multiplies by the
dequantized dictionary levels at the same rounding points. Every product
and partial sum is a dyadic rational far below 2**53, so the float
reference incurs no rounding either; the equality is exact, not
approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ShapeError
from .quantizer import (
    CODE_NEG_INNER,
    CODE_NEG_OUTER,
    CODE_POS_INNER,
    CODE_POS_OUTER,
    QuantDictionary,
)
from .student import QuantizedStudent, StudentDense, StudentReLUQuant, _StudentWeighted

ACC_HEADROOM_BITS = 3  # widening factor: 2^3 = 8 = denominator of q
# Accumulators must stay below 2^53: that keeps them exact in int64 AND
# exactly representable as float64, which the route-equality proof needs.
ACC_GUARD_BITS = 53
MIN_FRAC_BITS = 3  # activation levels {0, q, 1} need q * 2^fb integral


class EngineOverflowError(OverflowError):
    """A layer's worst-case accumulator would not fit in int64."""


# ---------------------------------------------------------------------------
# Code packing: four 2-bit codes per byte, least significant bits first.
# ---------------------------------------------------------------------------

def pack_codes(codes: np.ndarray) -> bytes:
    c = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if c.size and c.max() > 3:
        raise ValueError("codes must be 2-bit values in 0..3")
    pad = (-c.size) % 4
    if pad:
        c = np.concatenate([c, np.zeros(pad, dtype=np.uint8)])
    quads = c.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(blob: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(blob, dtype=np.uint8)
    if count > 4 * raw.size:
        raise ValueError(f"cannot unpack {count} codes from {raw.size} bytes")
    out = np.empty(4 * raw.size, dtype=np.uint8)
    out[0::4] = raw & 3
    out[1::4] = (raw >> 2) & 3
    out[2::4] = (raw >> 4) & 3
    out[3::4] = (raw >> 6) & 3
    return out[:count]


# ---------------------------------------------------------------------------
# Fixed-point values.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedPointTensor:
    """Integer tensor interpreted as data * 2**-frac_bits."""

    data: np.ndarray
    frac_bits: int

    def __post_init__(self):
        if self.frac_bits < MIN_FRAC_BITS:
            raise ValueError(f"frac_bits must be >= {MIN_FRAC_BITS}, got {self.frac_bits}")
        if self.data.dtype != np.int64:
            raise TypeError(f"fixed-point data must be int64, got {self.data.dtype}")

    @classmethod
    def from_real(cls, values: np.ndarray, frac_bits: int) -> "FixedPointTensor":
        v = np.asarray(values, dtype=np.float64)
        scaled = np.rint(v * float(2 ** frac_bits))
        if scaled.size and np.abs(scaled).max() >= 2.0 ** ACC_GUARD_BITS:
            raise EngineOverflowError("values do not fit on the fixed-point grid")
        return cls(scaled.astype(np.int64), frac_bits)

    def to_real(self) -> np.ndarray:
        return self.data.astype(np.float64) * (2.0 ** -self.frac_bits)


# ---------------------------------------------------------------------------
# Scalar shift-add primitive. The vectorized layer kernel below is the same
# arithmetic as an integer matmul; a property test pins their equality.
# ---------------------------------------------------------------------------

def shiftadd_multiply(code: int, act: int, qdict: QuantDictionary) -> int:
    """One weight application on a widened integer activation.

    ``act`` must already carry the 3 headroom bits (a multiple of 8 when it
    entered the layer on the activation grid); shifts then lose nothing.
    Outer codes pass the activation with a sign, inner codes sum two
    right shifts of its magnitude.
    """
    code = int(code)
    act = int(act)
    if code == CODE_POS_OUTER:
        return act
    if code == CODE_NEG_OUTER:
        return -act
    a, b = qdict.shift_exponents
    mag = abs(act)
    inner = (mag >> -a) + (mag >> -b)
    sign = 1 if act >= 0 else -1
    if code == CODE_POS_INNER:
        return sign * inner
    if code == CODE_NEG_INNER:
        return -sign * inner
    raise ValueError(f"invalid 2-bit code: {code}")


def _code_multipliers(qdict: QuantDictionary) -> np.ndarray:
    """Per-code integer multipliers at the widened scale: level * 8."""
    return np.array([-8, -qdict.s, qdict.s, 8], dtype=np.int64)


# ---------------------------------------------------------------------------
# Layer records.
# ---------------------------------------------------------------------------

@dataclass
class QuantizedLayer:
    """A dense or conv layer frozen to 2-bit codes plus scale and bias."""

    kind: str  # "dense" | "conv2d"
    codes: np.ndarray  # uint8, [out, in] or [OC, C, k, k]
    qdict: QuantDictionary
    out_scale: float
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind: {self.kind}")
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        if self.kind == "dense" and self.codes.ndim != 2:
            raise ShapeError("dense codes must be [out, in]")
        if self.kind == "conv2d" and self.codes.ndim != 4:
            raise ShapeError("conv2d codes must be [OC, C, k, k]")
        if self.codes.size and self.codes.max() > 3:
            raise ValueError("codes must be 2-bit values in 0..3")
        if self.out_scale <= 0 or not np.isfinite(self.out_scale):
            raise ValueError(f"out_scale must be positive, got {self.out_scale}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)

    def level_weights(self) -> np.ndarray:
        """Dequantized dictionary levels, the float-reference weights."""
        return np.array(self.qdict.levels)[self.codes]

    def packed(self) -> bytes:
        return pack_codes(self.codes)


@dataclass
class ReluQuantStep:
    """Relu followed by snapping onto the {0, q, 1} activation grid."""

    qdict: QuantDictionary


def encode_layer(
    level_weights: np.ndarray,
    qdict: QuantDictionary,
    out_scale: float,
    bias: np.ndarray | None,
    kind: str,
) -> QuantizedLayer:
    """Codes from an exactly level-valued weight tensor.

    Any entry that is not one of the four dictionary levels is an error;
    encoding is only defined for already-quantized tensors.
    """
    w = np.asarray(level_weights, dtype=np.float64)
    codes = np.full(w.shape, 255, dtype=np.uint8)
    for code, level in enumerate(qdict.levels):
        codes[w == level] = code
    if np.any(codes == 255):
        bad = w[codes == 255].reshape(-1)[0]
        raise ValueError(f"weight value {bad!r} is not a dictionary level of q={qdict.q}")
    return QuantizedLayer(kind=kind, codes=codes, qdict=qdict, out_scale=out_scale, bias=bias)


# ---------------------------------------------------------------------------
# Forward kernels. Both routes share every rounding point; they differ only
# in how the weight products are computed.
# ---------------------------------------------------------------------------

def _check_accumulator(n_terms: int, max_abs_act: int) -> None:
    worst = n_terms * 8 * max(max_abs_act, 1)
    if worst >= 2 ** ACC_GUARD_BITS:
        raise EngineOverflowError(
            f"worst-case accumulator {worst} exceeds 2^{ACC_GUARD_BITS}; "
            "reduce frac_bits or the layer fan-in"
        )


def _dense_acts(acts: FixedPointTensor) -> np.ndarray:
    return acts.data.reshape(acts.data.shape[0], -1)


def shiftadd_dense(acts: FixedPointTensor, layer: QuantizedLayer) -> tuple[np.ndarray, FixedPointTensor]:
    """Integer dense layer; returns (float outputs, requantized outputs)."""
    x = _dense_acts(acts)
    if x.shape[1] != layer.codes.shape[1]:
        raise ShapeError(f"dense expects {layer.codes.shape[1]} inputs, got {x.shape[1]}")
    _check_accumulator(x.shape[1], int(np.abs(x).max(initial=0)))
    mult = _code_multipliers(layer.qdict)[layer.codes]  # [out, in]
    acc = x @ mult.T  # widened by 8 = 2^3
    return _affine_round(acc, layer, acts.frac_bits)


def shiftadd_conv2d(acts: FixedPointTensor, layer: QuantizedLayer) -> tuple[np.ndarray, FixedPointTensor]:
    x = acts.data
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W] input, got shape {x.shape}")
    oc, c, k, _ = layer.codes.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d expects {c} input channels, got {x.shape[1]}")
    _check_accumulator(c * k * k, int(np.abs(x).max(initial=0)))
    cols, (oh, ow) = _im2col_int(x, k)
    mult = _code_multipliers(layer.qdict)[layer.codes].reshape(oc, c * k * k)
    acc = cols @ mult.T  # [B, OH*OW, OC]
    acc = acc.transpose(0, 2, 1).reshape(x.shape[0], oc, oh, ow)
    return _affine_round(acc, layer, acts.frac_bits)


def _im2col_int(x: np.ndarray, k: int):
    b, c, h, wd = x.shape
    oh, ow = h - k + 1, wd - k + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d kernel {k} larger than input {h}x{wd}")
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k * k)
    return np.ascontiguousarray(cols), (oh, ow)


def _affine_round(acc: np.ndarray, layer: QuantizedLayer, frac_bits: int):
    """Shared epilogue: descale the widened accumulator, apply the float
    scale and bias, and round back onto the activation grid."""
    pre = acc.astype(np.float64) * (2.0 ** -(frac_bits + ACC_HEADROOM_BITS))
    y = layer.out_scale * pre
    if layer.bias is not None:
        y = y + _bias_view(layer, y.ndim)
    out = np.rint(y * float(2 ** frac_bits)).astype(np.int64)
    return y, FixedPointTensor(out, frac_bits)


def _bias_view(layer: QuantizedLayer, ndim: int) -> np.ndarray:
    if layer.kind == "conv2d":
        return layer.bias.reshape(1, -1, 1, 1)
    return layer.bias


def reference_dense(acts: FixedPointTensor, layer: QuantizedLayer):
    """Float route: same rounding points, products via dequantized levels."""
    x = _dense_acts(acts).astype(np.float64) * (2.0 ** -acts.frac_bits)
    y = layer.out_scale * (x @ layer.level_weights().T)
    if layer.bias is not None:
        y = y + layer.bias
    out = np.rint(y * float(2 ** acts.frac_bits)).astype(np.int64)
    return y, FixedPointTensor(out, acts.frac_bits)


def reference_conv2d(acts: FixedPointTensor, layer: QuantizedLayer):
    x = acts.data.astype(np.float64) * (2.0 ** -acts.frac_bits)
    oc, c, k, _ = layer.codes.shape
    cols, (oh, ow) = _im2col_int(x, k)
    y = cols @ layer.level_weights().reshape(oc, c * k * k).T
    y = y.transpose(0, 2, 1).reshape(x.shape[0], oc, oh, ow)
    y = layer.out_scale * y
    if layer.bias is not None:
        y = y + _bias_view(layer, y.ndim)
    out = np.rint(y * float(2 ** acts.frac_bits)).astype(np.int64)
    return y, FixedPointTensor(out, acts.frac_bits)


def relu_quant_int(acts: FixedPointTensor, qdict: QuantDictionary) -> FixedPointTensor:
    """Integer relu + activation snap. Thresholds q/2 and (q+1)/2 become the
    exact integer comparisons 16a >= s * 2^fb and 16a >= (s+8) * 2^fb."""
    fb = acts.frac_bits
    a = np.maximum(acts.data, 0)
    t_inner = qdict.s << fb
    t_outer = (qdict.s + 8) << fb
    a16 = a << 4
    out = np.zeros_like(a)
    out[a16 >= t_inner] = qdict.s << (fb - ACC_HEADROOM_BITS)
    out[a16 >= t_outer] = 1 << fb
    return FixedPointTensor(out, fb)


# ---------------------------------------------------------------------------
# The inference network.
# ---------------------------------------------------------------------------

InferenceStep = QuantizedLayer | ReluQuantStep


@dataclass
class LayerTrace:
    """Per-step integer outputs, for route-equality checks."""

    kind: str
    out_int: np.ndarray


@dataclass
class InferenceResult:
    logits: np.ndarray
    trace: list[LayerTrace] = field(default_factory=list)

    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


class InferenceNet:
    """Pipeline of quantized layers and relu+snap steps on the integer grid."""

    def __init__(self, steps: list[InferenceStep], frac_bits: int,
                 quantize_activations: bool = True):
        if frac_bits < MIN_FRAC_BITS:
            raise ValueError(f"frac_bits must be >= {MIN_FRAC_BITS}, got {frac_bits}")
        if not steps or not isinstance(steps[-1], QuantizedLayer):
            raise ValueError("pipeline must end with a weighted layer producing logits")
        self.steps = list(steps)
        self.frac_bits = int(frac_bits)
        self.quantize_activations = bool(quantize_activations)

    def _run(self, inputs: np.ndarray, route: str) -> InferenceResult:
        x = np.clip(np.asarray(inputs, dtype=np.float64), 0.0, 1.0)
        acts = FixedPointTensor.from_real(x, self.frac_bits)
        trace: list[LayerTrace] = []
        y = None
        for step in self.steps:
            if isinstance(step, QuantizedLayer):
                if route == "shiftadd":
                    fn = shiftadd_dense if step.kind == "dense" else shiftadd_conv2d
                else:
                    fn = reference_dense if step.kind == "dense" else reference_conv2d
                y, acts = fn(acts, step)
                trace.append(LayerTrace(step.kind, acts.data.copy()))
            else:
                fb = acts.frac_bits
                if self.quantize_activations:
                    acts = relu_quant_int(acts, step.qdict)
                else:
                    acts = FixedPointTensor(np.maximum(acts.data, 0), fb)
                trace.append(LayerTrace("relu_quant", acts.data.copy()))
        assert y is not None
        return InferenceResult(logits=y.reshape(y.shape[0], -1), trace=trace)

    def run_inference(self, inputs: np.ndarray) -> InferenceResult:
        """Integer shift-add route."""
        return self._run(inputs, "shiftadd")

    def run_reference(self, inputs: np.ndarray) -> InferenceResult:
        """Float route over dequantized levels at the same rounding points."""
        return self._run(inputs, "reference")


def quantize_network_for_inference(student: QuantizedStudent, frac_bits: int = 8) -> InferenceNet:
    """Freeze a trained student into an integer pipeline."""
    steps: list[InferenceStep] = []
    for layer in student.layers:
        if isinstance(layer, _StudentWeighted):
            codes, _ = layer.quantized_codes()
            kind = "dense" if isinstance(layer, StudentDense) else "conv2d"
            bias = layer.bias.data.copy() if layer.bias is not None else None
            steps.append(QuantizedLayer(kind=kind, codes=codes, qdict=layer.qdict,
                                        out_scale=layer.scale, bias=bias))
        elif isinstance(layer, StudentReLUQuant):
            steps.append(ReluQuantStep(qdict=layer.qdict))
        else:
            raise ValueError(f"cannot freeze layer kind {layer.kind}")
    return InferenceNet(steps, frac_bits=frac_bits)


# ---------------------------------------------------------------------------
# Cost model. A shift-add application is modeled at a quarter of a MAC.
# ---------------------------------------------------------------------------

SHIFTADD_MAC_FRACTION = 0.25


@dataclass(frozen=True)
class LayerCost:
    kind: str
    macs_fp: int
    shiftadd_ops: int


@dataclass(frozen=True)
class CostReport:
    macs_fp: int
    shiftadd_ops: int
    fp_macs_remaining: int
    modeled_speedup: float
    per_layer: tuple[LayerCost, ...]

    def to_dict(self) -> dict:
        return {
            "macs_fp": self.macs_fp,
            "shiftadd_ops": self.shiftadd_ops,
            "fp_macs_remaining": self.fp_macs_remaining,
            "modeled_speedup": self.modeled_speedup,
            "per_layer": [
                {"kind": c.kind, "macs_fp": c.macs_fp, "shiftadd_ops": c.shiftadd_ops}
                for c in self.per_layer
            ],
        }


def cost_report(net: "InferenceNet | list[InferenceStep]",
                input_shape: tuple[int, ...]) -> CostReport:
    """Per-sample operation counts and the modeled speedup over a float net
    of identical topology.

    Dense layers cost out*in MACs; valid conv layers cost OH*OW*OC*C*k*k.
    Every weight application in a quantized layer is one shift-add op at a
    quarter MAC. A pipeline with no weighted work reports a speedup of 1.
    """
    steps = net.steps if isinstance(net, InferenceNet) else list(net)
    shape = tuple(int(d) for d in input_shape)
    per_layer: list[LayerCost] = []
    for step in steps:
        if not isinstance(step, QuantizedLayer):
            continue
        if step.kind == "dense":
            out_f, in_f = step.codes.shape
            flat = int(np.prod(shape))
            if flat != in_f:
                raise ShapeError(f"dense expects {in_f} inputs, got shape {shape}")
            macs = out_f * in_f
            shape = (out_f,)
        else:
            oc, c, k, _ = step.codes.shape
            if len(shape) != 3 or shape[0] != c:
                raise ShapeError(f"conv2d expects [C={c}, H, W] input, got {shape}")
            oh, ow = shape[1] - k + 1, shape[2] - k + 1
            if oh <= 0 or ow <= 0:
                raise ShapeError(f"conv2d kernel {k} larger than input {shape[1:]}")
            macs = oh * ow * oc * c * k * k
            shape = (oc, oh, ow)
        per_layer.append(LayerCost(kind=step.kind, macs_fp=macs, shiftadd_ops=macs))
    total_macs = sum(c.macs_fp for c in per_layer)
    total_sa = sum(c.shiftadd_ops for c in per_layer)
    fp_remaining = 0
    denom = SHIFTADD_MAC_FRACTION * total_sa + fp_remaining
    speedup = total_macs / denom if denom > 0 else 1.0
    return CostReport(
        macs_fp=total_macs,
        shiftadd_ops=total_sa,
        fp_macs_remaining=fp_remaining,
        modeled_speedup=speedup,
        per_layer=tuple(per_layer),
    )

"""2-bit shift-add quantization: dictionary construction from the weight
distribution's inflection point, sign-balanced code assignment, and the
straight-through training rules.

The dictionary is {-1, -q, +q, +1} with q = s/8 and s a sum of two powers
of two, so every level is applied with shifts and adds only. The inner
level q is chosen as the feasible value nearest the fitted density's
inflection point. Code assignment can be biased so the positive/negative
code populations stay near 50/50, keeping the sign-bit entropy near its
ln 2 maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tdist import inflection_points

# Feasible inner levels: q = 2^a + 2^b with a, b in {-3, -2, -1} (a = b
# allowed), listed as (q, s = 8q, (a, b)) with a >= b. Duplicate sums such
# as 2^-2 + 2^-2 = 2^-1 + (nothing) do not arise; the five sums below are
# exactly the distinct values.
FEASIBLE_Q: tuple[tuple[float, int, tuple[int, int]], ...] = (
    (0.25, 2, (-3, -3)),
    (0.375, 3, (-2, -3)),
    (0.5, 4, (-2, -2)),
    (0.625, 5, (-1, -3)),
    (0.75, 6, (-1, -2)),
)

CODE_NEG_OUTER = 0  # -1
CODE_NEG_INNER = 1  # -q
CODE_POS_INNER = 2  # +q
CODE_POS_OUTER = 3  # +1


@dataclass(frozen=True)
class QuantDictionary:
    """The four-level dictionary and its shift-add decomposition of q."""

    q: float
    s: int
    shift_exponents: tuple[int, int]
    levels: tuple[float, float, float, float] = field(init=False)

    def __post_init__(self):
        a, b = self.shift_exponents
        if a < b:
            raise ValueError(f"shift exponents must satisfy a >= b, got {self.shift_exponents}")
        if not (-3 <= b <= a <= -1):
            raise ValueError(f"shift exponents must lie in [-3, -1], got {self.shift_exponents}")
        if abs(2.0 ** a + 2.0 ** b - self.q) > 1e-12:
            raise ValueError(f"q={self.q} is not 2^{a} + 2^{b}")
        if self.s != round(self.q * 8):
            raise ValueError(f"s={self.s} is not 8q for q={self.q}")
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"inner level must lie in (0, 1), got {self.q}")
        object.__setattr__(self, "levels", (-1.0, -self.q, self.q, 1.0))

    @property
    def code_table(self) -> dict[int, float]:
        return {
            CODE_NEG_OUTER: -1.0,
            CODE_NEG_INNER: -self.q,
            CODE_POS_INNER: self.q,
            CODE_POS_OUTER: 1.0,
        }


def build_dictionary(n: float) -> QuantDictionary:
    """Dictionary whose inner level is the feasible q nearest the positive
    inflection point of the t density with n degrees of freedom.

    Equidistant candidates resolve toward the larger q (the coarser outer
    spacing costs more than the finer inner spacing saves).
    """
    _, x2 = inflection_points(n)
    best = None
    for q, s, exps in FEASIBLE_Q:
        d = abs(q - x2)
        # Strictly-better or tie-toward-larger-q; FEASIBLE_Q is ascending.
        if best is None or d <= best[0] + 1e-15:
            best = (d, q, s, exps)
    assert best is not None
    return QuantDictionary(q=best[1], s=best[2], shift_exponents=best[3])


def dictionary_for_exponents(a: int, b: int) -> QuantDictionary:
    """Dictionary from explicit shift exponents (a >= b)."""
    q = 2.0 ** a + 2.0 ** b
    return QuantDictionary(q=q, s=round(q * 8), shift_exponents=(a, b))


# ---------------------------------------------------------------------------
# Sign balance.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignBalance:
    """Fraction of positive codes and the entropy of that Bernoulli split."""

    p: float
    entropy: float


def binary_entropy(p: float) -> float:
    """H(p) = -p ln p - (1-p) ln(1-p) in nats, with 0 ln 0 := 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {p}")
    h = 0.0
    if p > 0.0:
        h -= p * np.log(p)
    if p < 1.0:
        h -= (1.0 - p) * np.log1p(-p)
    return float(h)


def sign_balance(codes: np.ndarray) -> SignBalance:
    """Balance of the positive-code population {+q, +1} among all codes."""
    c = np.asarray(codes)
    if c.size == 0:
        raise ValueError("cannot measure balance of zero codes")
    p = float(np.count_nonzero(c >= CODE_POS_INNER) / c.size)
    return SignBalance(p=p, entropy=binary_entropy(p))


# ---------------------------------------------------------------------------
# Quantization.
# ---------------------------------------------------------------------------

def quantize_tensor(
    w: np.ndarray,
    qdict: QuantDictionary,
    balance_bias: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Map a real tensor to codes plus its dequantized (level-valued) twin.

    Values are clipped to [-1, 1] first. The sign split happens at
    ``balance_bias``: values at or above it go to the positive side,
    values below to the negative side. Within a side the nearest of the
    two same-sign levels wins; the midpoint tie goes to the outer level on
    the positive side and to the inner level on the negative side, so a
    symmetric input cannot lose probability mass from the positive codes.
    With bias 0 an exact 0 maps to +q.
    """
    q = qdict.q
    x = np.clip(np.asarray(w, dtype=np.float64), -1.0, 1.0)
    pos = x >= balance_bias
    mid = (1.0 + q) / 2.0
    codes = np.empty(x.shape, dtype=np.uint8)
    codes[pos] = np.where(x[pos] >= mid, CODE_POS_OUTER, CODE_POS_INNER)
    codes[~pos] = np.where(x[~pos] < -mid, CODE_NEG_OUTER, CODE_NEG_INNER)
    levels = np.array(qdict.levels)
    return codes, levels[codes]


def _entropy_of_split(p: np.ndarray) -> np.ndarray:
    h = np.zeros_like(p)
    lo = p > 0.0
    hi = p < 1.0
    h[lo] -= p[lo] * np.log(p[lo])
    h[hi] -= (1.0 - p[hi]) * np.log1p(-p[hi])
    return h


def select_balance_bias(w: np.ndarray, qdict: QuantDictionary) -> float:
    """Bias maximizing the sign-split entropy, restricted to [-q/2, q/2] so
    no value can cross more than one level boundary.

    Every achievable split inside the window is a candidate (the element
    values themselves plus the window edges and zero), so the choice never
    yields a worse balance than the unbiased split. Entropy ties resolve to
    the bias closest to zero, then to the larger one.
    """
    x = np.clip(np.asarray(w, dtype=np.float64).reshape(-1), -1.0, 1.0)
    if x.size == 0:
        raise ValueError("cannot pick a bias for an empty tensor")
    half = qdict.q / 2.0
    xsorted = np.sort(x)
    cands = np.unique(np.clip(
        np.concatenate([xsorted, [-half, 0.0, half]]), -half, half))
    # p(t) = fraction of values on the positive side of the split at t
    first_ge = np.searchsorted(xsorted, cands, side="left")
    p = (x.size - first_ge) / x.size
    ent = _entropy_of_split(p)
    order = np.lexsort((cands, -np.abs(cands), ent))
    return float(cands[order[-1]])


def entropy_objective(w: np.ndarray, qdict: QuantDictionary, lambda_h: float = 0.0) -> float:
    """Sum of squared quantization error minus lambda_h times sign entropy.

    The error term uses unbiased nearest-level assignment, so with
    lambda_h = 0 this is exactly the squared distance to the closest
    dictionary level after clipping.
    """
    if lambda_h < 0:
        raise ValueError("lambda_h must be nonnegative")
    codes, deq = quantize_tensor(w, qdict, balance_bias=0.0)
    x = np.clip(np.asarray(w, dtype=np.float64), -1.0, 1.0)
    err = float(np.sum((x - deq) ** 2))
    if lambda_h == 0.0:
        return err
    return err - lambda_h * sign_balance(codes).entropy


# Activations are nonnegative after relu; they get the one-sided dictionary
# {0, q, 1} written with the same code numbering (1 -> 0, 2 -> q, 3 -> 1).
ACT_CODE_ZERO = 1
ACT_CODE_INNER = 2
ACT_CODE_OUTER = 3


def quantize_activations(a: np.ndarray, qdict: QuantDictionary) -> tuple[np.ndarray, np.ndarray]:
    """Clip to [0, 1] and snap to {0, q, 1}; midpoint ties go upward."""
    q = qdict.q
    x = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    codes = np.full(x.shape, ACT_CODE_ZERO, dtype=np.uint8)
    codes[x >= q / 2.0] = ACT_CODE_INNER
    codes[x >= (q + 1.0) / 2.0] = ACT_CODE_OUTER
    values = np.zeros(x.shape)
    values[codes == ACT_CODE_INNER] = q
    values[codes == ACT_CODE_OUTER] = 1.0
    return codes, values


# ---------------------------------------------------------------------------
# Straight-through training rules.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CutoffSchedule:
    """Two-phase linear schedule for the straight-through window.

    The cutoff relaxes from ``c0`` down to 1 over ``warmup_steps`` steps,
    then from 1 down to ``terminal`` (the dictionary's q) over the same
    number again, and stays there.
    """

    c0: float
    warmup_steps: int
    terminal: float

    def __post_init__(self):
        if self.c0 < 1.0:
            raise ValueError(f"initial cutoff must be >= 1, got {self.c0}")
        if self.warmup_steps <= 0:
            raise ValueError(f"warmup_steps must be positive, got {self.warmup_steps}")
        if not 0.0 < self.terminal <= 1.0:
            raise ValueError(f"terminal cutoff must lie in (0, 1], got {self.terminal}")

    def value(self, step: int) -> float:
        return cutoff_schedule_value(self, step)


def cutoff_schedule_value(sched: CutoffSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be nonnegative")
    w = sched.warmup_steps
    if step <= w:
        return sched.c0 + (1.0 - sched.c0) * (step / w)
    if step <= 2 * w:
        return 1.0 + (sched.terminal - 1.0) * ((step - w) / w)
    return sched.terminal


def ste_backward(upstream: np.ndarray, latent: np.ndarray, cutoff: float) -> np.ndarray:
    """Straight-through gradient: pass where |latent| <= cutoff, else zero.

    The window boundary is inclusive on both sides.
    """
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    upstream = np.asarray(upstream, dtype=np.float64)
    latent = np.asarray(latent, dtype=np.float64)
    if upstream.shape != latent.shape:
        raise ValueError(f"shape mismatch: upstream {upstream.shape} vs latent {latent.shape}")
    return upstream * (np.abs(latent) <= cutoff)


def surrogate_weights(latent: np.ndarray, qdict: QuantDictionary, cutoff: float) -> np.ndarray:
    """Training-time soft weights: identity inside the window, quantized
    outside, so the forward pass agrees with ``ste_backward``'s window."""
    latent = np.asarray(latent, dtype=np.float64)
    _, deq = quantize_tensor(latent, qdict, balance_bias=0.0)
    return np.where(np.abs(latent) <= cutoff, latent, deq)


def surrogate_activations(acts: np.ndarray, qdict: QuantDictionary, cutoff: float) -> np.ndarray:
    """Activation analogue: identity inside [0, cutoff], snapped outside."""
    acts = np.asarray(acts, dtype=np.float64)
    _, snapped = quantize_activations(acts, qdict)
    return np.where(acts <= cutoff, acts, snapped)

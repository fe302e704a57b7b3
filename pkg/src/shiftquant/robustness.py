"""Robustness machinery: spectral-norm regularization of the weighted
layers (keeps their worst-case amplification down so input perturbations
stay non-sensitive) and the single-step sign attack used for evaluation.

The spectral norm comes from power iteration with a persistent left vector,
so one cheap iteration per training step converges across steps. Conv
kernels are treated as the [OC, C*k*k] matrix of their im2col operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Batch

POWER_ITERS_DEFAULT = 50


@dataclass(frozen=True)
class AttackConfig:
    """Sign-attack budget and the valid input range."""

    epsilon: float
    input_low: float = 0.0
    input_high: float = 1.0

    def __post_init__(self):
        if self.input_low >= self.input_high:
            raise ValueError(f"empty input range [{self.input_low}, {self.input_high}]")
        if not 0.0 <= self.epsilon <= self.input_high - self.input_low:
            raise ValueError(
                f"epsilon must lie in [0, {self.input_high - self.input_low}], got {self.epsilon}"
            )


class SpectralState:
    """Persistent left singular vector estimate for one weight matrix."""

    def __init__(self, rows: int, rng: np.random.Generator | None = None):
        if rows <= 0:
            raise ValueError("matrix must have at least one row")
        rng = rng if rng is not None else np.random.default_rng(0)
        u = rng.standard_normal(rows)
        self.u = u / np.linalg.norm(u)
        self.iters_run = 0


def _as_matrix(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        return w
    if w.ndim == 4:
        return w.reshape(w.shape[0], -1)
    raise ValueError(f"expected a dense [out, in] or conv [OC, C, k, k] tensor, got ndim={w.ndim}")


def spectral_norm(
    w: np.ndarray,
    state: SpectralState | None = None,
    iters: int = POWER_ITERS_DEFAULT,
    tol: float | None = None,
) -> tuple[float, SpectralState]:
    """Largest singular value by warm-started power iteration.

    With ``tol`` set, iteration continues past ``iters`` until successive
    sigma estimates agree to that relative tolerance (hard cap 20000), for
    oracle-grade convergence. A zero matrix reports norm 0.
    """
    m = _as_matrix(w)
    if state is None:
        state = SpectralState(m.shape[0])
    if state.u.shape[0] != m.shape[0]:
        raise ValueError(f"state dimension {state.u.shape[0]} != matrix rows {m.shape[0]}")
    if iters < 1:
        raise ValueError("need at least one iteration")
    u = state.u
    sigma = 0.0
    prev = np.inf
    max_iters = 20000 if tol is not None else iters
    for it in range(max_iters):
        v = m.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            state.u = u
            state.iters_run += it + 1
            return 0.0, state
        v = v / nv
        u_new = m @ v
        sigma = float(np.linalg.norm(u_new))
        if sigma == 0.0:
            state.u = u
            state.iters_run += it + 1
            return 0.0, state
        u = u_new / sigma
        done_floor = it + 1 >= iters
        if tol is not None and done_floor and abs(sigma - prev) <= tol * max(sigma, 1e-30):
            break
        if tol is None and done_floor:
            break
        prev = sigma
    state.u = u
    state.iters_run += it + 1
    return sigma, state


def spectral_penalty_grad(
    w: np.ndarray,
    state: SpectralState | None = None,
    iters: int = POWER_ITERS_DEFAULT,
) -> tuple[float, np.ndarray, SpectralState]:
    """Sigma and the gradient of sigma^2, which is 2 sigma u v^T.

    The returned gradient has the shape of ``w`` (conv tensors come back
    folded). A zero matrix has zero gradient.
    """
    w = np.asarray(w, dtype=np.float64)
    m = _as_matrix(w)
    sigma, state = spectral_norm(m, state, iters)
    if sigma == 0.0:
        return 0.0, np.zeros_like(w), state
    u = state.u
    v = m.T @ u
    nv = np.linalg.norm(v)
    v = v / nv if nv > 0 else v
    grad = (2.0 * sigma) * np.outer(u, v)
    return sigma, grad.reshape(w.shape), state


def ns_perturbation_loss(
    task_loss: float,
    weight_tensors: list[np.ndarray],
    lambda_sn: float,
    states: list[SpectralState | None] | None = None,
    iters: int = POWER_ITERS_DEFAULT,
) -> tuple[float, list[SpectralState | None]]:
    """Task loss plus lambda_sn times the sum of squared spectral norms.

    With lambda_sn == 0 the task loss is returned untouched (bitwise) and
    no iteration runs.
    """
    if lambda_sn < 0:
        raise ValueError("lambda_sn must be nonnegative")
    if states is None:
        states = [None] * len(weight_tensors)
    if len(states) != len(weight_tensors):
        raise ValueError("one spectral state per weight tensor")
    if lambda_sn == 0.0:
        return task_loss, states
    total = 0.0
    new_states: list[SpectralState | None] = []
    for w, st in zip(weight_tensors, states):
        sigma, st = spectral_norm(w, st, iters)
        total += sigma * sigma
        new_states.append(st)
    return task_loss + lambda_sn * total, new_states


def fgsm_attack(model, batch: Batch, cfg: AttackConfig) -> Batch:
    """One-step sign attack: x + epsilon * sign(grad_x loss), clipped.

    ``model`` is anything exposing ``input_gradient(batch) -> ndarray``.
    A zero gradient component steps in the positive direction, so every
    unclipped pixel moves by exactly +-epsilon. epsilon 0 returns the
    inputs unchanged.
    """
    x = batch.inputs.data
    if cfg.epsilon == 0.0:
        return Batch(x.copy(), batch.labels.copy())
    g = np.asarray(model.input_gradient(batch), dtype=np.float64)
    if g.shape != x.shape:
        raise ValueError(f"input gradient shape {g.shape} != input shape {x.shape}")
    step = np.where(g >= 0.0, cfg.epsilon, -cfg.epsilon)
    adv = np.clip(x + step, cfg.input_low, cfg.input_high)
    return Batch(adv, batch.labels.copy())

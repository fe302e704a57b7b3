"""Self-referenced structural distillation.

The full-precision teacher and its quantized student run side by side; a
small critic network scores penultimate feature maps with an energy that
should be low for teacher features and at least a per-sample margin higher
for student features. The margin grows with the actual feature distance,
so badly mismatched students are pushed harder. The student doubles as the
generator: it lowers its own energy, pulling its features toward the
teacher's manifold. A plain feature-matching mode (mean squared error) and
a margin-free critic mode exist for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Batch, Network, ShapeError, Tensor
from .robustness import SpectralState, spectral_penalty_grad
from .student import QuantizedStudent, _StudentWeighted

LEAKY_SLOPE = 0.1

STRUCTURAL_COMPONENTS = ("lsgan", "gan_plain", "sil")


@dataclass(frozen=True)
class FeatureMap:
    """A [B, F] block of flattened penultimate features."""

    values: np.ndarray
    source: str  # "teacher" | "student"

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2:
            raise ShapeError(f"feature maps must be [B, F], got shape {self.values.shape}")
        if self.source not in ("teacher", "student"):
            raise ValueError(f"unknown feature source: {self.source!r}")


@dataclass(frozen=True)
class GanConfig:
    lambda_ls: float = 1.0
    margin_scale: float = 1.0
    beta: float = 0.3
    d_steps: int = 1
    g_steps: int = 1
    lr_d: float = 0.003
    # The hinge is invariant to a common shift of both energies while the
    # mean teacher energy keeps a descent direction at any parameter norm
    # (the score is bilinear in the two layers), so an unconstrained critic
    # runs off to -inf exponentially. Clipping the critic weights enforces
    # the bounded-Lipschitz energy the margin formulation assumes; it lives
    # in the optimizer, not the loss. 0 disables.
    clip_d: float = 0.1
    init_from: str = "random"  # student latent init: "random" | "teacher"

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.lambda_ls < 0 or self.margin_scale < 0:
            raise ValueError("lambda_ls and margin_scale must be nonnegative")
        if self.d_steps < 1 or self.g_steps < 1:
            raise ValueError("d_steps and g_steps must be at least 1")
        if self.lr_d < 0:
            raise ValueError("lr_d must be nonnegative")
        if self.clip_d < 0:
            raise ValueError("clip_d must be nonnegative")
        if self.init_from not in ("teacher", "random"):
            raise ValueError(f"init_from must be 'teacher' or 'random', got {self.init_from!r}")


class Discriminator:
    """Two-layer scalar energy over feature vectors, leaky-relu hidden."""

    def __init__(self, feature_dim: int, rng: np.random.Generator | None = None):
        if feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(16, feature_dim // 4)
        self.feature_dim = int(feature_dim)
        self.hidden = hidden
        self.w1 = Tensor(nn.init_uniform(rng, (hidden, feature_dim), feature_dim))
        self.b1 = Tensor(np.zeros(hidden))
        self.w2 = Tensor(nn.init_uniform(rng, (1, hidden), hidden))
        self.b2 = Tensor(np.zeros(1))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def score(self, feats: np.ndarray) -> np.ndarray:
        """Energies [B] for a feature block [B, F]."""
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ShapeError(f"expected [B, {self.feature_dim}] features, got {x.shape}")
        h = x @ self.w1.data.T + self.b1.data
        z = np.where(h > 0.0, h, LEAKY_SLOPE * h)
        return (z @ self.w2.data.T + self.b2.data).reshape(-1)

    def backward(self, feats: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads for sum_i upstream_i * score_i;
        returns the gradient w.r.t. the features."""
        x = np.asarray(feats, dtype=np.float64)
        u = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
        if u.shape[0] != x.shape[0]:
            raise ShapeError("upstream must have one entry per feature row")
        h = x @ self.w1.data.T + self.b1.data
        z = np.where(h > 0.0, h, LEAKY_SLOPE * h)
        self.w2.add_grad(u.T @ z)
        self.b2.add_grad(u.sum(axis=0))
        dz = u @ self.w2.data
        dh = dz * np.where(h > 0.0, 1.0, LEAKY_SLOPE)
        self.w1.add_grad(dh.T @ x)
        self.b1.add_grad(dh.sum(axis=0))
        return dh @ self.w1.data

    def sgd_step(self, lr: float, clip: float = 0.0) -> None:
        params = self.parameters()
        nn.sgd_update(params, [p.grad for p in params], lr)
        if clip > 0.0:
            for p in params:
                np.clip(p.data, -clip, clip, out=p.data)


# ---------------------------------------------------------------------------
# Loss pieces, defined on scores so the algebra is easy to test in isolation.
# ---------------------------------------------------------------------------

def margin_delta(teacher: FeatureMap, student: FeatureMap, margin_scale: float) -> np.ndarray:
    """Per-sample margin: margin_scale times the mean absolute feature gap."""
    if margin_scale < 0:
        raise ValueError("margin_scale must be nonnegative")
    t, s = teacher.values, student.values
    if t.shape != s.shape:
        raise ShapeError(f"feature shapes differ: teacher {t.shape} vs student {s.shape}")
    return margin_scale * np.mean(np.abs(t - s), axis=1)


def critic_loss(
    scores_t: np.ndarray,
    scores_s: np.ndarray,
    delta: np.ndarray,
    lambda_ls: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Margin hinge over energies: mean_i[ L(t_i) + lambda * hinge_i ] with
    hinge_i = max(0, delta_i + L(t_i) - L(s_i)).

    The hinge is zero exactly when the student's energy clears the teacher's
    by the margin. Returns (loss, dloss/dscores_t, dloss/dscores_s); the
    boundary hinge == 0 uses the zero subgradient.
    """
    if lambda_ls < 0:
        raise ValueError("lambda_ls must be nonnegative")
    lt = np.asarray(scores_t, dtype=np.float64).reshape(-1)
    ls = np.asarray(scores_s, dtype=np.float64).reshape(-1)
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    if not lt.shape == ls.shape == d.shape:
        raise ShapeError("scores and margins must have matching lengths")
    b = lt.shape[0]
    hinge = np.maximum(0.0, d + lt - ls)
    loss = float(np.mean(lt + lambda_ls * hinge))
    active = hinge > 0.0
    dlt = (1.0 + lambda_ls * active) / b
    dls = -(lambda_ls * active) / b
    return loss, dlt, dls


def generator_loss(scores_s: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean student energy; the student lowers it to look like the teacher."""
    ls = np.asarray(scores_s, dtype=np.float64).reshape(-1)
    return float(np.mean(ls)), np.full(ls.shape, 1.0 / ls.shape[0])


def feature_mse(teacher: FeatureMap, student: FeatureMap) -> tuple[float, np.ndarray]:
    """Plain feature matching: mean squared gap and its student gradient."""
    t, s = teacher.values, student.values
    if t.shape != s.shape:
        raise ShapeError(f"feature shapes differ: teacher {t.shape} vs student {s.shape}")
    diff = s - t
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def total_loss(task_loss: float, structural_loss: float, beta: float) -> float:
    """(1 - beta) * task + beta * structural, with exact passthrough at the
    degenerate ends so beta 0/1 reproduce the single-loss runs bitwise."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta == 0.0:
        return task_loss
    if beta == 1.0:
        return structural_loss
    return (1.0 - beta) * task_loss + beta * structural_loss


# ---------------------------------------------------------------------------
# One combined training step.
# ---------------------------------------------------------------------------

def critic_update(disc: Discriminator, teacher: FeatureMap, student: FeatureMap,
                  cfg: GanConfig, *, use_margin: bool) -> float:
    """One critic SGD step on the hinge loss; returns the loss value."""
    delta = margin_delta(teacher, student, cfg.margin_scale if use_margin else 0.0)
    lt = disc.score(teacher.values)
    ls = disc.score(student.values)
    loss, dlt, dls = critic_loss(lt, ls, delta, cfg.lambda_ls)
    if not np.isfinite(loss):
        raise nn.NonFiniteGradientError("critic loss diverged; step aborted")
    disc.zero_grad()
    disc.backward(teacher.values, dlt)
    disc.backward(student.values, dls)
    disc.sgd_step(cfg.lr_d, cfg.clip_d)
    return loss


def structural_term(
    components: tuple[str, ...],
    disc: Discriminator | None,
    teacher: FeatureMap,
    student: FeatureMap,
) -> tuple[float, np.ndarray]:
    """Structural loss and its gradient w.r.t. the student features.

    ``components`` lists the enabled pieces, which stack additively the way
    the ablation rows do: feature matching ("sil") anchors the student to
    the teacher, and a critic term ("gan_plain" or "lsgan", exclusive)
    adds the adversarial energy. The two critic flavors share the same
    generator side; they differ only in how the critic itself is trained.
    """
    for c in components:
        if c not in STRUCTURAL_COMPONENTS:
            raise ValueError(f"unknown structural component {c!r}")
    if "gan_plain" in components and "lsgan" in components:
        raise ValueError("gan_plain and lsgan are exclusive critic flavors")
    loss = 0.0
    grad = np.zeros_like(student.values)
    if "sil" in components:
        mse, dmse = feature_mse(teacher, student)
        loss += mse
        grad += dmse
    if "gan_plain" in components or "lsgan" in components:
        if disc is None:
            raise ValueError("critic components need a discriminator")
        scores = disc.score(student.values)
        gen, dscores = generator_loss(scores)
        dfeats = disc.backward(student.values, dscores)
        disc.zero_grad()  # generator pass must not leave grads on the critic
        loss += gen
        grad += dfeats
    return loss, grad


@dataclass
class StepMetrics:
    task_loss: float
    structural_loss: float
    critic_loss: float
    total_loss: float


def selfref_train_step(
    teacher: Network,
    student: QuantizedStudent,
    disc: Discriminator | None,
    batch: Batch,
    cfg: GanConfig,
    *,
    components: tuple[str, ...] = (),
    lr_g: float,
    lambda_sn: float = 0.0,
    spectral_states: dict[int, SpectralState] | None = None,
) -> StepMetrics:
    """One fine-tuning step of the student against the frozen teacher.

    Runs ``cfg.d_steps`` critic updates (when a critic component is on),
    then ``cfg.g_steps`` student updates on (1-beta) * task + beta *
    structural, where the task part optionally carries the spectral penalty
    scaled by ``lambda_sn``. Empty ``components`` means plain task
    fine-tuning. The teacher is only ever read.
    """
    for c in components:
        if c not in STRUCTURAL_COMPONENTS:
            raise ValueError(f"unknown structural component {c!r}")
    if "gan_plain" in components and "lsgan" in components:
        raise ValueError("gan_plain and lsgan are exclusive critic flavors")
    use_critic = "lsgan" in components or "gan_plain" in components
    beta = cfg.beta if components else 0.0
    if use_critic and disc is None:
        raise ValueError("critic components need a discriminator")
    t_logits, t_feats_raw = teacher.forward(batch.inputs.data)
    teacher_features = FeatureMap(t_feats_raw, "teacher")

    critic_loss_value = 0.0
    if use_critic and beta > 0.0:
        s_logits, s_feats_raw = student.forward(batch.inputs.data, mode="surrogate")
        if s_feats_raw.shape != t_feats_raw.shape:
            raise ShapeError(
                f"feature shapes differ: teacher {t_feats_raw.shape} vs student {s_feats_raw.shape}"
            )
        student_features = FeatureMap(s_feats_raw, "student")
        for _ in range(cfg.d_steps):
            critic_loss_value = critic_update(
                disc, teacher_features, student_features, cfg,
                use_margin=("lsgan" in components),
            )

    task_value = 0.0
    structural_value = 0.0
    for _ in range(cfg.g_steps):
        logits, feats = student.forward(batch.inputs.data, mode="surrogate")
        task_value, dlogits = nn.cross_entropy(logits, batch.labels)
        dfeats = None
        if beta > 0.0:
            student_features = FeatureMap(feats, "student")
            if feats.shape != t_feats_raw.shape:
                raise ShapeError(
                    f"feature shapes differ: teacher {t_feats_raw.shape} vs student {feats.shape}"
                )
            structural_value, dfeats_raw = structural_term(
                components, disc, teacher_features, student_features
            )
            dfeats = beta * dfeats_raw
        student.zero_grad()
        student.backward(dlogits * (1.0 - beta), dfeats)
        if lambda_sn > 0.0:
            _apply_spectral_grads(student, lambda_sn * (1.0 - beta), spectral_states)
        student.sgd_step(lr_g)
        student.advance()

    total = total_loss(task_value, structural_value, beta)
    if not np.isfinite(total):
        raise nn.NonFiniteGradientError("student loss diverged; step aborted")
    return StepMetrics(
        task_loss=task_value,
        structural_loss=structural_value,
        critic_loss=critic_loss_value,
        total_loss=total,
    )


def _apply_spectral_grads(student: QuantizedStudent, coeff: float,
                          states: dict[int, SpectralState] | None) -> None:
    """Add coeff * grad(sigma^2) of each effective weight to the latents,
    one warm-started power iteration per layer per step."""
    for idx, layer in enumerate(student.layers):
        if not isinstance(layer, _StudentWeighted):
            continue
        cutoff = student.cutoff_for(layer)
        w_eff = layer.effective_weights("surrogate", cutoff)
        state = states.get(idx) if states is not None else None
        _, grad, state = spectral_penalty_grad(w_eff, state, iters=1)
        if states is not None:
            states[idx] = state
        mask = np.abs(layer.latent.data) <= cutoff
        layer.latent.add_grad(coeff * grad * layer.scale * mask)

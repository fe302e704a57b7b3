"""Experiment configuration: a typed tree with strict JSON round-tripping.

Unknown keys are rejected so typos fail loudly instead of silently running
defaults. ``to_dict`` then ``from_dict`` reproduces the object exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

ARCHES = ("cnn-small", "mlp")


@dataclass(frozen=True)
class CutoffConfig:
    c0: float = 3.0
    warmup_steps: int = 150

    def validate(self) -> None:
        if self.c0 < 1.0:
            raise ValueError(f"cutoff.c0 must be >= 1, got {self.c0}")
        if self.warmup_steps < 1:
            raise ValueError(f"cutoff.warmup_steps must be positive, got {self.warmup_steps}")


@dataclass(frozen=True)
class GanSection:
    lambda_ls: float = 1.0
    margin_scale: float = 1.0
    beta: float = 0.3
    d_steps: int = 1
    g_steps: int = 1
    lr_d: float = 0.003
    # Fine-tuning student step size. The task phase runs at optimizer.lr,
    # but the structural phase perturbs an already-trained student, so it
    # gets its own, much smaller rate.
    lr_g: float = 0.01
    clip_d: float = 0.1
    init_from: str = "random"

    def validate(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"gan.beta must lie in [0, 1], got {self.beta}")
        if self.lambda_ls < 0 or self.margin_scale < 0:
            raise ValueError("gan.lambda_ls and gan.margin_scale must be nonnegative")
        if self.d_steps < 1 or self.g_steps < 1:
            raise ValueError("gan.d_steps and gan.g_steps must be at least 1")
        if self.lr_d < 0:
            raise ValueError("gan.lr_d must be nonnegative")
        if self.lr_g <= 0:
            raise ValueError("gan.lr_g must be positive")
        if self.clip_d < 0:
            raise ValueError("gan.clip_d must be nonnegative")
        if self.init_from not in ("teacher", "random"):
            raise ValueError(f"gan.init_from must be 'teacher' or 'random', got {self.init_from!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.1
    teacher_epochs: int = 30
    student_epochs: int = 30
    gan_epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"optimizer.lr must be positive, got {self.lr}")
        for name in ("teacher_epochs", "student_epochs", "gan_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"optimizer.{name} must be nonnegative")
        if self.batch_size < 1:
            raise ValueError(f"optimizer.batch_size must be positive, got {self.batch_size}")
        if self.seed < 0:
            raise ValueError(f"optimizer.seed must be nonnegative, got {self.seed}")


@dataclass(frozen=True)
class AblationFlags:
    use_sil: bool = False
    use_gan_plain: bool = False
    use_lsgan: bool = False
    use_npl: bool = False

    def validate(self) -> None:
        if self.use_gan_plain and self.use_lsgan:
            raise ValueError("ablation.use_gan_plain and ablation.use_lsgan are exclusive")

    def structural_components(self) -> tuple[str, ...]:
        """The structural-loss pieces actually trained; the ablation rows
        stack, so feature matching and a critic flavor can be on together."""
        out = []
        if self.use_sil:
            out.append("sil")
        if self.use_gan_plain:
            out.append("gan_plain")
        if self.use_lsgan:
            out.append("lsgan")
        return tuple(out)

    def critic_mode(self) -> str | None:
        if self.use_lsgan:
            return "lsgan"
        if self.use_gan_plain:
            return "gan_plain"
        return None

    def finetune_enabled(self) -> bool:
        return bool(self.use_sil or self.use_gan_plain or self.use_lsgan or self.use_npl)


@dataclass(frozen=True)
class AttackSection:
    epsilons: tuple[float, ...] = (0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0)

    def validate(self) -> None:
        if not self.epsilons:
            raise ValueError("attack.epsilons must not be empty")
        for e in self.epsilons:
            if not 0.0 <= e <= 1.0:
                raise ValueError(f"attack epsilon must lie in [0, 1], got {e}")


@dataclass(frozen=True)
class QuantConfig:
    dof_n: float | str = 3.0
    n_max: float = 100.0
    lambda_h: float = 0.1
    lambda_sn: float = 0.1
    arch: str = "cnn-small"
    frac_bits: int = 8
    cutoff: CutoffConfig = field(default_factory=CutoffConfig)
    gan: GanSection = field(default_factory=GanSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    attack: AttackSection = field(default_factory=AttackSection)

    def validate(self) -> "QuantConfig":
        if isinstance(self.dof_n, str):
            if self.dof_n != "auto":
                raise ValueError(f"dof_n must be a positive number or 'auto', got {self.dof_n!r}")
        elif not self.dof_n > 0:
            raise ValueError(f"dof_n must be positive, got {self.dof_n}")
        if self.n_max <= 1:
            raise ValueError(f"n_max must exceed 1, got {self.n_max}")
        if self.lambda_h < 0 or self.lambda_sn < 0:
            raise ValueError("lambda_h and lambda_sn must be nonnegative")
        if self.arch not in ARCHES:
            raise ValueError(f"arch must be one of {ARCHES}, got {self.arch!r}")
        if self.frac_bits < 3 or self.frac_bits > 24:
            raise ValueError(f"frac_bits must lie in [3, 24], got {self.frac_bits}")
        self.cutoff.validate()
        self.gan.validate()
        self.optimizer.validate()
        self.ablation.validate()
        self.attack.validate()
        return self

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["attack"]["epsilons"] = list(self.attack.epsilons)
        return doc

    def replace(self, **kwargs) -> "QuantConfig":
        return dataclasses.replace(self, **kwargs).validate()


_SECTIONS = {
    "cutoff": CutoffConfig,
    "gan": GanSection,
    "optimizer": OptimizerConfig,
    "ablation": AblationFlags,
    "attack": AttackSection,
}


def _build_section(cls, doc: dict, where: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    if cls is AttackSection and "epsilons" in doc:
        doc = dict(doc, epsilons=tuple(float(e) for e in doc["epsilons"]))
    return cls(**doc)


def config_from_dict(doc: dict) -> QuantConfig:
    allowed = {f.name for f in dataclasses.fields(QuantConfig)}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    return QuantConfig(**kwargs).validate()


def load_config(path) -> QuantConfig:
    with Path(path).open("r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: QuantConfig, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

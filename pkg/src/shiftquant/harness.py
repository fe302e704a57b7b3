"""Experiment orchestration: teacher training, quantization, straight-through
training, structural fine-tuning, evaluation under attack, and reporting.

Every run is a pure function of (config, dataset spec): all randomness comes
from one seed sequence spawned into fixed per-phase streams, so two runs
with the same inputs produce byte-identical reports once wall time is
stripped.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from . import nn
from .config import QuantConfig
from .data import Dataset, load_dataset
from .engine import InferenceNet, cost_report, quantize_network_for_inference
from .nn import Batch, Network
from .quantizer import entropy_objective, sign_balance
from .robustness import AttackConfig, fgsm_attack
from .selfref import Discriminator, GanConfig, selfref_train_step
from .student import QuantizedStudent, _StudentWeighted

REPORT_SCHEMA_VERSION = 1
TRAIN_FRACTION = 0.8


# ---------------------------------------------------------------------------
# Architectures.
# ---------------------------------------------------------------------------

def build_network(arch: str, input_shape: tuple[int, int, int], num_classes: int,
                  rng: np.random.Generator) -> Network:
    """The two reference stacks. Feature maps are the flattened output of
    the last hidden relu."""
    c, h, w = input_shape
    if arch == "cnn-small":
        oh, ow = h - 2, w - 2
        layers = [
            nn.Conv2d(c, 4, 3, rng=rng),
            nn.ReLU(),
            nn.Dense(4 * oh * ow, 32, rng=rng),
            nn.ReLU(),
            nn.Dense(32, num_classes, rng=rng),
        ]
        return Network(layers, feature_cut=4)
    if arch == "mlp":
        layers = [
            nn.Dense(c * h * w, 32, rng=rng),
            nn.ReLU(),
            nn.Dense(32, 16, rng=rng),
            nn.ReLU(),
            nn.Dense(16, num_classes, rng=rng),
        ]
        return Network(layers, feature_cut=4)
    raise ValueError(f"unknown arch: {arch!r}")


def split_dataset(ds: Dataset, train_fraction: float = TRAIN_FRACTION) -> tuple[Dataset, Dataset]:
    n_train = int(round(train_fraction * len(ds)))
    if not 0 < n_train < len(ds):
        raise ValueError(f"cannot split {len(ds)} samples at fraction {train_fraction}")
    idx = np.arange(len(ds))
    return ds.subset(idx[:n_train]), ds.subset(idx[n_train:])


# ---------------------------------------------------------------------------
# Training phases.
# ---------------------------------------------------------------------------

def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_classifier(net: Network, train: Dataset, *, epochs: int, lr: float,
                     batch_size: int, rng: np.random.Generator) -> list[float]:
    """Minibatch SGD on cross-entropy; returns the per-epoch mean loss."""
    curve = []
    for _ in range(epochs):
        losses = []
        for batch in train.batches(batch_size, rng):
            net.zero_grad()
            loss, _ = nn.backward_pass(net, batch)
            nn.apply_sgd(net, lr)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return curve


def ste_train(student: QuantizedStudent, train: Dataset, *, epochs: int, lr: float,
              batch_size: int, rng: np.random.Generator) -> list[float]:
    """Straight-through training on the task loss only; the cutoff schedule
    advances once per optimizer step."""
    curve = []
    for _ in range(epochs):
        losses = []
        for batch in train.batches(batch_size, rng):
            logits, _ = student.forward(batch.inputs.data, mode="surrogate")
            loss, dlogits = nn.cross_entropy(logits, batch.labels)
            if not np.isfinite(loss):
                raise nn.NonFiniteGradientError("student loss diverged; step aborted")
            student.zero_grad()
            student.backward(dlogits)
            student.sgd_step(lr)
            student.advance()
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return curve


def finetune(teacher: Network, student: QuantizedStudent, disc: Discriminator | None,
             train: Dataset, cfg: QuantConfig, rng: np.random.Generator):
    """Structural fine-tuning phase; returns per-epoch mean curves."""
    components = cfg.ablation.structural_components()
    gan_cfg = GanConfig(
        lambda_ls=cfg.gan.lambda_ls,
        margin_scale=cfg.gan.margin_scale,
        beta=cfg.gan.beta,
        d_steps=cfg.gan.d_steps,
        g_steps=cfg.gan.g_steps,
        lr_d=cfg.gan.lr_d,
        clip_d=cfg.gan.clip_d,
        init_from=cfg.gan.init_from,
    )
    lambda_sn = cfg.lambda_sn if cfg.ablation.use_npl else 0.0
    spectral_states: dict = {}
    curves = {"task": [], "discriminator": [], "generator": [], "total": []}
    for _ in range(cfg.optimizer.gan_epochs):
        step_vals = {k: [] for k in curves}
        for batch in train.batches(cfg.optimizer.batch_size, rng):
            metrics = selfref_train_step(
                teacher, student, disc, batch, gan_cfg,
                components=components, lr_g=cfg.gan.lr_g,
                lambda_sn=lambda_sn, spectral_states=spectral_states,
            )
            step_vals["task"].append(metrics.task_loss)
            step_vals["discriminator"].append(metrics.critic_loss)
            step_vals["generator"].append(metrics.structural_loss)
            step_vals["total"].append(metrics.total_loss)
        for k in curves:
            curves[k].append(float(np.mean(step_vals[k])))
    return curves


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------

def evaluate_float(net: Network, ds_or_batch) -> float:
    batch = ds_or_batch.as_batch() if isinstance(ds_or_batch, Dataset) else ds_or_batch
    logits, _ = net.forward(batch.inputs.data)
    return accuracy_from_logits(logits, batch.labels)


def evaluate_engine(inf_net: InferenceNet, ds_or_batch) -> float:
    batch = ds_or_batch.as_batch() if isinstance(ds_or_batch, Dataset) else ds_or_batch
    result = inf_net.run_inference(batch.inputs.data)
    return accuracy_from_logits(result.logits, batch.labels)


def epsilon_key(eps: float) -> str:
    return str(float(eps))


def adversarial_sweep(grad_model, evaluate, test: Dataset, epsilons) -> dict[str, float]:
    """Accuracy under the sign attack for each budget. ``grad_model`` crafts
    the perturbation (must expose input_gradient); ``evaluate`` scores the
    adversarial batch."""
    batch = test.as_batch()
    out = {}
    for eps in epsilons:
        adv = fgsm_attack(grad_model, batch, AttackConfig(epsilon=float(eps)))
        out[epsilon_key(eps)] = evaluate(adv)
    return out


# ---------------------------------------------------------------------------
# Reporting.
# ---------------------------------------------------------------------------

def dictionary_summary(student: QuantizedStudent, lambda_h: float) -> list[dict]:
    rows = []
    for layer in student.layers:
        if not isinstance(layer, _StudentWeighted):
            continue
        codes, _ = layer.quantized_codes()
        bal = sign_balance(codes)
        rows.append({
            "kind": layer.kind,
            "q": layer.qdict.q,
            "s": layer.qdict.s,
            "shift_exponents": list(layer.qdict.shift_exponents),
            "dof": layer.stats.dof if layer.stats is not None else None,
            "scale": layer.scale,
            "balance_p": bal.p,
            "balance_entropy": bal.entropy,
            "entropy_objective": entropy_objective(layer.latent.data, layer.qdict, lambda_h),
        })
    return rows


def weight_histograms(student: QuantizedStudent, bins: int = 24) -> list[dict]:
    rows = []
    edges = np.linspace(-3.0, 3.0, bins + 1)
    for layer in student.layers:
        if not isinstance(layer, _StudentWeighted):
            continue
        counts, _ = np.histogram(layer.latent.data, bins=edges)
        rows.append({
            "kind": layer.kind,
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        })
    return rows


def canonical_report_bytes(report: dict) -> bytes:
    """Report bytes with volatile fields removed, for determinism checks."""
    doc = json.loads(json.dumps(report))
    doc.pop("wall_time_seconds", None)
    return json.dumps(doc, sort_keys=True).encode("ascii")


def emit_report(report: dict, outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "report.json"
    with path.open("w", encoding="ascii") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, series in report.get("loss_curves", {}).items():
        with (outdir / f"curve_{name}.csv").open("w", encoding="ascii", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", name])
            for i, value in enumerate(series):
                writer.writerow([i, value])
    return path


# ---------------------------------------------------------------------------
# The experiment.
# ---------------------------------------------------------------------------

def run_experiment(cfg: QuantConfig, dataset_spec: str = "synthetic:512:0",
                   outdir=None) -> dict:
    """Full pipeline: teacher, dictionaries, straight-through training,
    optional structural fine-tuning, float and integer evaluation under the
    sign attack, and a JSON-serializable report."""
    t0 = time.monotonic()
    cfg.validate()
    ds = load_dataset(dataset_spec)
    train, test = split_dataset(ds)
    input_shape = tuple(int(d) for d in ds.images.shape[1:])

    streams = [np.random.default_rng(s)
               for s in np.random.SeedSequence(cfg.optimizer.seed).spawn(6)]
    r_teacher_init, r_teacher_shuf, r_student_init, r_disc_init, r_ste_shuf, r_gan_shuf = streams

    # Phase 1: full-precision teacher.
    teacher = build_network(cfg.arch, input_shape, ds.num_classes, r_teacher_init)
    teacher_curve = train_classifier(
        teacher, train, epochs=cfg.optimizer.teacher_epochs,
        lr=cfg.optimizer.lr, batch_size=cfg.optimizer.batch_size, rng=r_teacher_shuf,
    )

    # Phase 2: fit the weight distributions and freeze the dictionaries.
    init_net = teacher
    if cfg.gan.init_from == "random":
        init_net = build_network(cfg.arch, input_shape, ds.num_classes, r_student_init)
    student = QuantizedStudent.from_network(
        init_net, dof=cfg.dof_n, n_max=cfg.n_max,
        c0=cfg.cutoff.c0, warmup_steps=cfg.cutoff.warmup_steps,
    )

    # Phase 3: straight-through task training.
    task_curve = ste_train(
        student, train, epochs=cfg.optimizer.student_epochs,
        lr=cfg.optimizer.lr, batch_size=cfg.optimizer.batch_size, rng=r_ste_shuf,
    )

    # Phase 4: structural fine-tuning, only when an ablation flag asks.
    curves = {
        "task": list(task_curve),
        "discriminator": [0.0] * len(task_curve),
        "generator": [0.0] * len(task_curve),
        "total": list(task_curve),
    }
    if cfg.ablation.finetune_enabled():
        disc = None
        if cfg.ablation.critic_mode() is not None:
            _, feats = student.forward(test.images[:1], mode="surrogate")
            disc = Discriminator(feats.shape[1], r_disc_init)
        ft = finetune(teacher, student, disc, train, cfg, r_gan_shuf)
        for k in curves:
            curves[k].extend(ft[k])

    # Phase 5: freeze to the integer engine and evaluate both models.
    inf_net = quantize_network_for_inference(student, cfg.frac_bits)
    cost = cost_report(inf_net, input_shape)
    teacher_adv = adversarial_sweep(
        teacher, lambda b: evaluate_float(teacher, b), test, cfg.attack.epsilons)
    quant_adv = adversarial_sweep(
        student, lambda b: evaluate_engine(inf_net, b), test, cfg.attack.epsilons)

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.optimizer.seed,
        "dataset": {
            "spec": dataset_spec,
            "source": ds.source,
            "n_train": len(train),
            "n_test": len(test),
            "num_classes": ds.num_classes,
            "input_shape": list(input_shape),
        },
        "teacher": {
            "clean_accuracy": evaluate_float(teacher, test),
            "adversarial_accuracy": teacher_adv,
            "loss_curve": teacher_curve,
        },
        "quantized": {
            "clean_accuracy": evaluate_engine(inf_net, test),
            "adversarial_accuracy": quant_adv,
        },
        "dictionaries": dictionary_summary(student, cfg.lambda_h),
        "histograms": weight_histograms(student),
        "cost": cost.to_dict(),
        "loss_curves": curves,
        "wall_time_seconds": time.monotonic() - t0,
    }
    if outdir is not None:
        emit_report(report, outdir)
    return report


def beta_sweep(cfg: QuantConfig, dataset_spec: str = "synthetic:512:0",
               outdir=None, betas=None) -> list[dict]:
    """One full run per mixing weight on a fixed seed; returns the table of
    (beta, clean and adversarial accuracy) rows."""
    if betas is None:
        betas = [round(0.1 * i, 1) for i in range(11)]
    rows = []
    for beta in betas:
        run_cfg = cfg.replace(gan=dataclasses.replace(cfg.gan, beta=float(beta)))
        report = run_experiment(run_cfg, dataset_spec)
        worst_eps = epsilon_key(max(cfg.attack.epsilons))
        rows.append({
            "beta": float(beta),
            "clean_accuracy": report["quantized"]["clean_accuracy"],
            "adversarial_accuracy": report["quantized"]["adversarial_accuracy"][worst_eps],
            "report_bytes": canonical_report_bytes(report).decode("ascii"),
        })
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        with (outdir / "beta_sweep.csv").open("w", encoding="ascii", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["beta", "clean_accuracy", "adversarial_accuracy"])
            for row in rows:
                writer.writerow([row["beta"], row["clean_accuracy"], row["adversarial_accuracy"]])
    return rows


# ---------------------------------------------------------------------------
# Uniform-grid baseline for comparison tables.
# ---------------------------------------------------------------------------

def uniform_symmetric_quantize(w: np.ndarray, bits: int) -> np.ndarray:
    """Nearest-level symmetric uniform quantization at the given width,
    used as the conventional baseline the dictionary approach is measured
    against."""
    if bits < 2:
        raise ValueError("need at least 2 bits")
    w = np.asarray(w, dtype=np.float64)
    scale = np.max(np.abs(w))
    if scale == 0.0:
        return np.zeros_like(w)
    steps = 2 ** (bits - 1) - 1
    return np.clip(np.rint(w / scale * steps), -steps, steps) / steps * scale

"""Multiplier-free 2-bit neural network quantization.

Weights are snapped to the four-level dictionary {-1, -q, +q, +1} where the
inner level q is a sum of two power-of-two shifts chosen from the fitted
heavy-tailed weight distribution, so inference needs no multiplies. Training
uses a windowed straight-through estimator with sign-balanced code
assignment; an optional margin critic distills the full-precision teacher's
feature structure into the student, and a spectral-norm penalty plus a
one-step sign attack cover robustness training and evaluation. An exact
integer engine executes the quantized network with shift-adds only.
"""

from .config import QuantConfig, config_from_dict, load_config, save_config
from .data import Dataset, load_dataset, make_synthetic
from .engine import (
    CostReport,
    EngineOverflowError,
    FixedPointTensor,
    InferenceNet,
    QuantizedLayer,
    cost_report,
    encode_layer,
    pack_codes,
    quantize_network_for_inference,
    shiftadd_multiply,
    unpack_codes,
)
from .harness import beta_sweep, build_network, run_experiment
from .nn import (
    Batch,
    Conv2d,
    Dense,
    Network,
    NonFiniteGradientError,
    ReLU,
    ShapeError,
    Tensor,
    cross_entropy,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .quantizer import (
    CutoffSchedule,
    QuantDictionary,
    SignBalance,
    build_dictionary,
    entropy_objective,
    quantize_activations,
    quantize_tensor,
    select_balance_bias,
    sign_balance,
    ste_backward,
)
from .robustness import (
    AttackConfig,
    SpectralState,
    fgsm_attack,
    ns_perturbation_loss,
    spectral_norm,
    spectral_penalty_grad,
)
from .selfref import (
    Discriminator,
    FeatureMap,
    GanConfig,
    critic_loss,
    feature_mse,
    generator_loss,
    margin_delta,
    selfref_train_step,
    total_loss,
)
from .student import QuantizedStudent, load_student, save_student
from .tdist import (
    WeightStats,
    dof_from_kurtosis,
    estimate_dof,
    inflection_points,
    standardize_weights,
    t_pdf,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "Batch",
    "Conv2d",
    "CostReport",
    "CutoffSchedule",
    "Dataset",
    "Dense",
    "Discriminator",
    "EngineOverflowError",
    "FeatureMap",
    "FixedPointTensor",
    "GanConfig",
    "InferenceNet",
    "Network",
    "NonFiniteGradientError",
    "QuantConfig",
    "QuantDictionary",
    "QuantizedLayer",
    "QuantizedStudent",
    "ReLU",
    "ShapeError",
    "SignBalance",
    "SpectralState",
    "Tensor",
    "WeightStats",
    "beta_sweep",
    "build_dictionary",
    "build_network",
    "config_from_dict",
    "cost_report",
    "critic_loss",
    "cross_entropy",
    "encode_layer",
    "entropy_objective",
    "estimate_dof",
    "feature_mse",
    "fgsm_attack",
    "generator_loss",
    "grad_check",
    "inflection_points",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "load_student",
    "make_synthetic",
    "margin_delta",
    "dof_from_kurtosis",
    "ns_perturbation_loss",
    "pack_codes",
    "quantize_activations",
    "quantize_network_for_inference",
    "quantize_tensor",
    "run_experiment",
    "save_checkpoint",
    "save_config",
    "save_student",
    "select_balance_bias",
    "selfref_train_step",
    "shiftadd_multiply",
    "sign_balance",
    "spectral_norm",
    "spectral_penalty_grad",
    "standardize_weights",
    "ste_backward",
    "t_pdf",
    "total_loss",
    "unpack_codes",
]

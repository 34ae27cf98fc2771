"""Text-guided editing of latents with a toy conditional diffusion model.

Pipeline: DDIM inversion -> per-step null-text optimization -> singular-value
suppression of the negative/EOT prompt rows -> guided denoising with an
attention-map loss on the prompt embedding.  Everything runs on numpy with a
small reverse-mode autodiff tape, on a synthetic benchmark of grating
"events".
"""

__version__ = "0.1.0"

from .tensor import NonFiniteError, Tape, Tensor, backward  # noqa: E402
from .diffusion import NoiseSchedule, build_schedule, inference_schedule, invert_trajectory  # noqa: E402
from .denoiser import Denoiser, DenoiserConfig, TrainConfig, load_checkpoint, save_checkpoint, train  # noqa: E402
from .nulltext import NullTextSet, optimize_null_texts, reconstruct  # noqa: E402
from .promptedit import AttnLossConfig, EditSpec, SuppressionConfig, eot_suppress  # noqa: E402
from .pipeline import EditResult, EditRunConfig, edit, reconstruct_only  # noqa: E402
from .synthbench import make_dataset  # noqa: E402

__all__ = [
    "__version__", "NonFiniteError", "Tape", "Tensor", "backward", "NoiseSchedule", "build_schedule",
    "inference_schedule", "invert_trajectory", "Denoiser", "DenoiserConfig", "TrainConfig",
    "load_checkpoint", "save_checkpoint", "train", "NullTextSet", "optimize_null_texts", "reconstruct",
    "AttnLossConfig", "EditSpec", "SuppressionConfig", "eot_suppress", "EditResult", "EditRunConfig",
    "edit", "reconstruct_only", "make_dataset",
]

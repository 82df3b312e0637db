from .model import Denoiser, DenoiserSpec, Vocabulary, default_vocabulary
from .sampling import sample
from .schedule import NoiseSchedule, forward_diffuse
from .train import Checkpoint, Example, FitConfig, NonFiniteLossError, fit, training_loss

__all__ = [
    "Checkpoint", "Denoiser", "DenoiserSpec", "Example", "FitConfig", "NoiseSchedule", "NonFiniteLossError",
    "Vocabulary", "default_vocabulary", "fit", "forward_diffuse", "sample", "training_loss",
]

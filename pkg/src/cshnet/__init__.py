"""CNN-Swin hybrid generator for information-asymmetric image translation."""
from .errors import ConfigError, InputError, TrainingError
from .generator import Bottleneck, GeneratorConfig, IGCForm, build_generator, count_parameters

__all__ = [
    "Bottleneck",
    "ConfigError",
    "GeneratorConfig",
    "IGCForm",
    "InputError",
    "TrainingError",
    "build_generator",
    "count_parameters",
]

__version__ = "0.1.0"

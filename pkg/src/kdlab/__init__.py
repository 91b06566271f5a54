"""Knowledge distillation on a small numpy autodiff engine.

Modules: :mod:`autodiff` (tape-based reverse mode), :mod:`models` (MLP and
convnet capacity ladders), :mod:`losses`, :mod:`train`, :mod:`data`,
:mod:`orchestrator` (multi-run pipelines and records), :mod:`config`,
:mod:`report`, :mod:`verify` and the ``kdlab`` CLI.
"""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    KDLabError,
    NumericError,
    ParameterError,
    ReportError,
)
from .losses import DistillConfig
from .models import ModelSpec, build
from .train import ScheduleSpec

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "DistillConfig",
    "FormatError",
    "KDLabError",
    "ModelSpec",
    "NumericError",
    "ParameterError",
    "ReportError",
    "ScheduleSpec",
    "build",
]

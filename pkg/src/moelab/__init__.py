"""Desk-scale interpretability lab for mixture-of-experts transformers with planted knowledge."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CapacityError, ConfigError, DatasetError, DegenerateSeriesError, DomainError, EmptyRoutingError,
    FormatError, MoELabError, NumericError, PlantingError, ShapeError, SpecError, TraceError, VocabularyError,
)
from .model import (  # noqa: F401
    NO_INTERVENTION, SHARED, InterventionSpec, ModelConfig, ModelWeights, RoutingMode, forward, init_model,
)
from .moefile import load_model, save_model  # noqa: F401

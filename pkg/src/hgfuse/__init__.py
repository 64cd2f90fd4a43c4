"""Frame/event fusion with hypergraph attention and masked self-distillation, on a small numpy autodiff engine."""

from .config import ModelConfig, load_config, parse_config, serialize_config
from .numerics import ConfigError, ContractError, ShapeError, Tape, Tensor, backward

__version__ = "0.1.0"

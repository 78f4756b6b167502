"""StarPO: trajectory-level policy optimization for multi-turn agents, at toy scale."""

from .config import ExperimentConfig, load_config
from .errors import StarpoError
from .policy import Policy
from .vocab import Vocabulary

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "Policy", "StarpoError", "Vocabulary", "load_config", "__version__"]

from .config import ModelConfig
from .network import SpeechSqlModel, Prepared

__all__ = ["ModelConfig", "SpeechSqlModel", "Prepared"]

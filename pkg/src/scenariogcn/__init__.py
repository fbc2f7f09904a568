"""Per-frame traffic scenario classification with multi-relation graph
convolutions over agents and lane waypoints plus a dilated temporal CNN."""

from .data import SCENARIO_CLASSES, Frame, Sequence, read_jsonl, write_jsonl
from .model import ModelConfig, init_params, load_checkpoint, model_forward, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

"""Dual-mode weight-shared flow model for streaming two-modality generation."""

from .model import Chunk, Condition, DualModeModel, Mode, ModelConfig, StreamContext
from .sampler import SamplerSpec, TimeGrid, generate_stream, generate_streams
from .synthdata import Regime, RegimeKind, StreamSpec, gen_stream, gen_streams
from .trainer import TrainConfig, TrainRegime, init_state, run

__all__ = [
    "Chunk", "Condition", "DualModeModel", "Mode", "ModelConfig", "StreamContext",
    "SamplerSpec", "TimeGrid", "generate_stream", "generate_streams",
    "Regime", "RegimeKind", "StreamSpec", "gen_stream", "gen_streams",
    "TrainConfig", "TrainRegime", "init_state", "run",
]

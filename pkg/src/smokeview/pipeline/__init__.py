from .config import ConfigError, PipelineConfig, load_config, parse_config
from .run import CacheCorruption, RunManifest, StageFailure, ablate, run_pipeline
from .synth import SynthSceneSpec, synth_scene

__all__ = [
    "CacheCorruption", "ConfigError", "PipelineConfig", "RunManifest", "StageFailure", "SynthSceneSpec",
    "ablate", "load_config", "parse_config", "run_pipeline", "synth_scene",
]

from .config import Config, load_config, DEFAULTS
from .metrics import evaluate_ate, evaluate_rpe, evaluate_image, associate_timestamps
from .synth import SceneConfig, SyntheticScene, synthesize, OracleFlowProvider
from .dataset import DatasetManifest
from .pipeline import run_pipeline, PipelineResult

__all__ = [
    "Config", "load_config", "DEFAULTS",
    "evaluate_ate", "evaluate_rpe", "evaluate_image", "associate_timestamps",
    "SceneConfig", "SyntheticScene", "synthesize", "OracleFlowProvider",
    "DatasetManifest", "run_pipeline", "PipelineResult",
]

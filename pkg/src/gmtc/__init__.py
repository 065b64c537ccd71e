"""Speech emotion recognition with a gated multi-scale temporal
convolutional network: MFCC feature extraction, a small numpy training
stack with hand-written gradients, corpus handling, evaluation metrics,
and interpretability analyses, plus the `gmtc` command line tool.
"""

from .errors import DataError, NumericError
from .model import (ModelConfig, checkpoint_load, checkpoint_save,
                    config_text, forward, init_params, param_count,
                    parse_config_text, receptive_field)
from .trainer import TrainConfig, evaluate, run_cv, train
from .metrics import EvalReport, compute_report

__version__ = "0.1.0"

__all__ = [
    "DataError", "NumericError", "ModelConfig", "TrainConfig", "EvalReport",
    "checkpoint_load", "checkpoint_save", "config_text", "parse_config_text",
    "forward", "init_params", "param_count", "receptive_field",
    "train", "evaluate", "run_cv", "compute_report", "__version__",
]

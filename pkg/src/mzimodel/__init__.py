"""Modeling toolkit for a 3x3 thermo-optic MZI mesh.

Fits an analytical physics model to sparse measurements, trains neural
surrogates (optionally transfer-learned from model-generated synthetic data),
and ensembles them to predict dB weight matrices from heater voltages.
"""

from ._kernels import BACKEND, backend_name
from .chip import (VirtualChip, acquire, default_chip, load_am, load_chip,
                   measure, save_am, save_chip)
from .config import load_config
from .data import (Dataset, load_csv, rmse_db, sample_training_subset,
                   save_csv, split)
from .ensemble import (EnsembleModel, fit_weights, percentile_report, predict,
                       run_ensemble_study)
from .errors import (ClipFloorError, ConfigError, DataError, SchemaError,
                     StageError, TrainingError)
from .experiments import grid_search, run_scarcity
from .mesh import (DB_FLOOR, N_INPUTS, N_MZI, N_OUTPUTS, V_MAX,
                   AnalyticalModelParams, MeshTopology, as_voltages,
                   check_weights_db, db_from_linear, default_topology,
                   eval_am, eval_am_batch, grad_am, linear_from_db)
from .network import (Hyperparams, SurrogateNet, forward, init_params,
                      load_net, save_net, train)
from .optimize import (Objective, OptimizeResult, check_gradient, fit_am,
                       minimize)
from .transfer import (TlConfig, TlResult, build_freeze_mask,
                       generate_synthetic, train_tl_nn)

__version__ = "0.1.0"

__all__ = [
    "AnalyticalModelParams", "MeshTopology", "default_topology",
    "eval_am", "eval_am_batch", "grad_am",
    "as_voltages", "check_weights_db", "db_from_linear", "linear_from_db",
    "N_INPUTS", "N_OUTPUTS", "N_MZI", "V_MAX", "DB_FLOOR",
    "BACKEND", "backend_name",
    "VirtualChip", "default_chip", "acquire", "measure",
    "save_chip", "load_chip", "save_am", "load_am",
    "Dataset", "split", "rmse_db", "save_csv", "load_csv",
    "sample_training_subset",
    "Objective", "OptimizeResult", "minimize", "check_gradient", "fit_am",
    "Hyperparams", "SurrogateNet", "init_params", "train", "forward",
    "save_net", "load_net",
    "TlConfig", "TlResult", "build_freeze_mask", "generate_synthetic",
    "train_tl_nn",
    "EnsembleModel", "predict", "fit_weights", "percentile_report",
    "run_ensemble_study",
    "run_scarcity", "grid_search",
    "load_config",
    "ConfigError", "DataError", "SchemaError", "TrainingError", "StageError",
    "ClipFloorError",
    "__version__",
]

"""Run configuration: one TOML document, sections per subsystem.

Every tunable assumption in the package appears here with its default, so a
config file alone pins a run. Unknown keys are rejected rather than ignored;
a silently misspelled key would otherwise change results without warning.
"""

import copy

try:
    import tomllib as _toml
except ImportError:                    # Python < 3.11
    import tomli as _toml

from .errors import ConfigError

DEFAULTS = {
    "run": {
        "out_dir": "runs",
        "seed": 0,
    },
    "chip": {
        "path": "chip.json",
        "seed": 0,
        "noise_sigma_db": 0.05,
        "crosstalk_scale": 2.0,
        "excess_sigma": 0.2,
        "er": 2000.0,
    },
    "dataset": {
        "train_path": "train.csv",
        "test_path": "test.csv",
        "train_n": 4400,
        "validation_n": 100,
        "test_n": 700,
        "sweep_only": False,
        "sweep_step": 0.1,
        "rest_voltage": 0.0,
        "acquire_seed": 42,
        "split_seed": 7,
    },
    "am": {
        # phase landscape is multi-modal on real-ish data; restarts are cheap
        "restarts": 16,
        "max_iter": 400,
        "gtol": 1e-12,
        "ftol": 1e-15,
        "memory": 10,
        "init_alpha": 0.25,
        "init_er_db": 30.0,
        "subset_size": 0,          # 0 = every train record
    },
    "nn": {
        "n1": 83,
        "n2": 131,
        "lambda_l1": 2e-4,
        "lambda_l2": 1e-7,
        # stronger regularization when few records are available; tuned by
        # validation grid search at 400/1000-record subsets
        "small_lambda_l1": 1e-3,
        "small_lambda_l2": 1e-4,
        "small_max_size": 1000,
        "max_iter": 500,
        "gtol": 1e-9,
        "ftol": 1e-14,
        "memory": 10,
        "subset_size": 0,
    },
    "tl": {
        "n1": 400,
        "n2": 400,
        "lambda_l1": 5e-4,
        "lambda_l2": 9e-9,
        "synth_count": 50000,
        "synth_floor_db": -60.0,
        "synth_validation_n": 500,
        "am_restarts": 16,
        "am_max_iter": 300,
        "pretrain_max_iter": 300,
        "retrain_max_iter": 800,
        "freeze_layers": [1],
        "freeze_fractions": [1.0],
        "dump_synth": False,
        "subset_size": 0,
    },
    "scarcity": {
        "sizes": [400, 1000, 4400],
        "seeds": 20,
        "families": ["am", "nn", "tl"],
    },
    "ensemble": {
        "sizes": [400],
        "k_max": 20,
        "runs": 50,
        "n1": 83,
        "n2": 131,
        "lambda_l1": 2e-4,
        "lambda_l2": 1e-7,
        "max_iter": 150,
        "per_output": False,
    },
}


def _check_value(path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{path}: expected nonempty list")
        elem = default[0]
        return [_check_value(f"{path}[{i}]", v, elem) for i, v in enumerate(value)]
    raise ConfigError(f"{path}: unsupported default type")      # pragma: no cover


def _merge(base, doc, prefix=""):
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a section")
            _merge(base[key], value, prefix=path + ".")
        else:
            base[key] = _check_value(path, value, base[key])


def _validate(cfg):
    pos = [("dataset.train_n", cfg["dataset"]["train_n"]),
           ("dataset.test_n", cfg["dataset"]["test_n"]),
           ("am.restarts", cfg["am"]["restarts"]),
           ("tl.synth_count", cfg["tl"]["synth_count"]),
           ("scarcity.seeds", cfg["scarcity"]["seeds"]),
           ("ensemble.k_max", cfg["ensemble"]["k_max"]),
           ("ensemble.runs", cfg["ensemble"]["runs"])]
    for path, v in pos:
        if v < 1:
            raise ConfigError(f"{path} must be >= 1")
    if cfg["dataset"]["validation_n"] < 0:
        raise ConfigError("dataset.validation_n must be >= 0")
    if cfg["dataset"]["sweep_step"] <= 0:
        raise ConfigError("dataset.sweep_step must be > 0")
    for fam in cfg["scarcity"]["families"]:
        if fam not in ("am", "nn", "tl"):
            raise ConfigError(f"scarcity.families: unknown family {fam!r}")
    if len(cfg["tl"]["freeze_layers"]) != len(cfg["tl"]["freeze_fractions"]):
        raise ConfigError("tl.freeze_layers and tl.freeze_fractions lengths differ")
    for lam_key in ("lambda_l1", "lambda_l2"):
        for sec in ("nn", "tl", "ensemble"):
            if cfg[sec][lam_key] < 0:
                raise ConfigError(f"{sec}.{lam_key} must be >= 0")
    return cfg


def load_config(path=None):
    """Defaults overlaid with the TOML file at ``path`` (when given)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = _toml.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except _toml.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        _merge(cfg, doc)
    return _validate(cfg)

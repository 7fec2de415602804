"""Run configuration: TOML in, fully resolved TOML out."""

import copy
import datetime
import math

import tomli
import tomli_w

DEFAULTS = {
    "run": {
        "seed": 20240601,
        "output_dir": "qiml-out",
        "timestamp": "",
        "dataset_id": "ks-desk",
    },
    "dynamics": {
        "source": "ks",
        "ingest_path": "",
        "L": 32 * math.pi,
        "N": 512,
        "nu": 1.0,
        "mu": 1.0,
        "dt": 0.05,
        "save_every": 5,
        "transient_steps": 2000,
        "ic_amplitude": 0.1,
        "ic_max_mode": 8,
        "n_trajectories": 10,
        "n_frames": 200,
        "dtype": "f64",
        "split": {"train": 0.8, "val": 0.1, "test": 0.1},
    },
    "qcbm": {
        "n_qubits": 10,
        "layers": 4,
        "rotations_per_layer": 3,
        "block": 1,
        "bandwidths": [0.001, 0.01, 0.1, 0.25, 1.0],
        "epochs": 300,
        "learning_rate": 0.05,
        "mode": "exact",
        "shots": 20000,
        "parameter_cap": 300,
        "seed": 11,
    },
    "surrogate": {
        "latent_dim": 64,
        "hidden": [256, 128],
        "epochs": 50,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "lambda_kl": 0.1,
        "lambda_mmd": 1.0,
        "unitary_weight": 1.0,
        "seed": 21,
    },
    "rollout": {
        "horizon": 500,
        "latent_only": False,
    },
    "metrics": {
        "pdf_bins": 101,
        "pdf_std_range": 4.0,
        "spectrum_k_max": 0,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def resolve(raw=None, seed=None, output_dir=None):
    """Defaults overlaid with ``raw``; every value that affects results is materialised."""
    cfg = _merge(DEFAULTS, raw or {})
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    if output_dir is not None:
        cfg["run"]["output_dir"] = str(output_dir)
    if not cfg["run"]["timestamp"]:
        now = datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0)
        cfg["run"]["timestamp"] = now.isoformat().replace("+00:00", "Z")
    validate(cfg)
    return cfg


def validate(cfg):
    d = cfg["dynamics"]
    if d["source"] not in ("ks", "ingest"):
        raise ConfigError(f"dynamics.source must be 'ks' or 'ingest', got {d['source']!r}")
    if d["source"] == "ingest" and not d["ingest_path"]:
        raise ConfigError("dynamics.ingest_path is required when source = 'ingest'")
    if d["dtype"] not in ("f32", "f64"):
        raise ConfigError("dynamics.dtype must be 'f32' or 'f64'")
    q = cfg["qcbm"]
    if q["mode"] not in ("exact", "shots"):
        raise ConfigError("qcbm.mode must be 'exact' or 'shots'")
    if len(cfg["surrogate"]["hidden"]) != 2:
        raise ConfigError("surrogate.hidden must list two widths")
    if cfg["rollout"]["horizon"] < 1:
        raise ConfigError("rollout.horizon must be >= 1")


def load(path, seed=None, output_dir=None):
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    return resolve(raw, seed=seed, output_dir=output_dir)


def dumps(cfg):
    return tomli_w.dumps(cfg)


def save(cfg, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(cfg))

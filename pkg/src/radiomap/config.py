"""Flat ``key = value`` run configuration with a typed schema and defaults."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# key: (type, default, description); list types are comma-separated
SCHEMA: dict[str, tuple[str, object, str]] = {
    # scene-sim
    "grid_h": ("int", 32, "grid rows"),
    "grid_w": ("int", 32, "grid columns"),
    "cell_size_m": ("float", 4.0, "meters per cell"),
    "building_count_min": ("int", 2, "fewest buildings per scene"),
    "building_count_max": ("int", 6, "most buildings per scene"),
    "building_size_min": ("int", 3, "smallest building side (cells)"),
    "building_size_max": ("int", 8, "largest building side (cells)"),
    "n_tx": ("int", 1, "transmitters per scene"),
    "frequencies_hz": ("float_list", [2.4e9, 3.65e9], "carrier frequencies"),
    "path_loss_exponent": ("float", 3.0, "log-distance exponent n"),
    "ref_distance_m": ("float", 4.0, "reference distance d0"),
    "penetration_db": ("float", 2.5, "loss per crossed building cell"),
    "p0_db": ("float", -30.0, "power at the reference distance"),
    "noise_sigma": ("float", 0.0, "observation noise std (normalized units)"),
    "independent_band_sampling": ("bool", False, "draw separate cells per band"),
    # priors
    "tau_max": ("int", 150, "depth-map clip constant"),
    # benchmark
    "ratios": ("float_list", [0.001, 0.01, 0.1, 0.2], "sampling ratios for experiment"),
    "train_scenes": ("int", 60, "training scenes"),
    "val_scenes": ("int", 10, "validation scenes"),
    "test_scenes": ("int", 10, "test scenes"),
    "methods": ("str_list", ["kan", "idw", "kriging", "kmoe"], "experiment methods"),
    "ablation_ratio": ("float", 0.01, "sampling ratio for the ablation ladder"),
    "seeds": ("int_list", [0], "benchmark seeds"),
    "idw_power": ("float", 2.0, "IDW distance exponent"),
    "open_space_only": ("bool", False, "score only non-building cells"),
    "record_timing": ("bool", False, "write real wall_seconds into CSV (breaks byte identity)"),
    # kan
    "kan_grid": ("int", 8, "spline intervals on [-1, 1]"),
    "kan_order": ("int", 3, "spline order"),
    "kan_hidden": ("int_list", [16, 16], "hidden layer widths"),
    "kan_epochs": ("int", 300, "Adam steps per scene"),
    "kan_lr": ("float", 0.02, "KAN learning rate"),
    "kan_spatial_lambda": ("float", 1.0, "second-difference penalty weight"),
    # refiner
    "enc_widths": ("int_list", [16, 32], "encoder channel widths"),
    "patch": ("int", 4, "patch size at the bottleneck"),
    "token_dim": ("int", 64, "token dimension K"),
    "depth": ("int", 2, "Transformer-MoE blocks"),
    "heads": ("int", 4, "attention heads"),
    "experts": ("int", 4, "experts per MoE layer"),
    "top_k": ("int", 2, "experts per token"),
    "expert_hidden": ("int", 128, "expert hidden width"),
    "lb_coef": ("float", 0.01, "load-balance loss weight"),
    "refiner_epochs": ("int", 30, "refiner epochs"),
    "refiner_lr": ("float", 2e-3, "refiner learning rate"),
    "refiner_batch": ("int", 8, "scenes per refiner step"),
    "augment": ("bool", True, "random flips/transposes during refiner training"),
    # single-scene commands
    "obs_ratio": ("float", 0.01, "sampling ratio for generate/estimate/train-refiner"),
    # run
    "out_dir": ("str", "out", "output directory"),
    "threads": ("int", 1, "parallel worker processes"),
}


def _parse_value(kind: str, raw: str, key: str, line: int | None):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if kind == "int_list":
            return [int(s) for s in items]
        if kind == "float_list":
            return [float(s) for s in items]
        if kind == "str_list":
            return items
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}", line) from None
    raise ConfigError(f"{key}: unknown type {kind}", line)


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind.endswith("_list"):
        return ",".join(repr(float(v)) if kind == "float_list" else str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def echo(self) -> str:
        return "".join(f"{k} = {_format_value(SCHEMA[k][0], v)}\n" for k, v in self.values.items())

    def digest(self) -> str:
        return hashlib.sha256(self.echo().encode("utf-8")).hexdigest()

    def replace(self, **kw) -> "RunConfig":
        for key in kw:
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
        return RunConfig({**self.values, **kw})

    def with_overrides(self, assignments) -> "RunConfig":
        vals = dict(self.values)
        for item in assignments:
            key, sep, raw = item.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            vals[key] = _parse_value(SCHEMA[key][0], raw, key, None)
        return RunConfig(vals)


def default_config() -> RunConfig:
    return RunConfig({k: (list(v[1]) if isinstance(v[1], list) else v[1])
                      for k, v in SCHEMA.items()})


def parse_config(text: str) -> RunConfig:
    vals = default_config().values
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno)
        vals[key] = _parse_value(SCHEMA[key][0], raw, key, lineno)
    return RunConfig(vals)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())

"""Run configuration: YAML schema, validation and architecture presets."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import dpk
from .ckmap import ArchSpec, LayerSpec
from .domain import (Grid, PatchShape, PoolingFilter, average_filter, custom_filter,
                     dirac_filter, gaussian_filter)

SCHEMA_VERSION = 1
DATA_ENV = "CONVKERN_DATA"


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"schema_version", "name", "arch", "data", "krr", "gram", "threads", "seed", "out"}
_ARCH_KEYS = {"boundary", "layers"}
_LAYER_KEYS = {"patch", "kernel", "pooling", "homogeneous"}
_KERNEL_KEYS = {"kind", "sigma", "degree", "coeffs"}
_POOL_KEYS = {"kind", "s", "size", "stride", "offsets", "taps"}
_DATA_KEYS = {"source", "root", "n_train", "n_test", "downsample", "zca", "n_positions", "d",
              "height", "width", "channels"}
_ZCA_KEYS = {"enabled", "patch", "eps", "mode"}
_KRR_KEYS = {"lambda", "pos", "neg"}
_GRAM_KEYS = {"tile"}


def _check_keys(d, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _two_layer(k1: dict, k2: dict, conv=(3, 3), pool=(2, 4)) -> dict:
    layers = []
    for kern, c, s in zip((k1, k2), conv, pool):
        layers.append({"patch": c, "kernel": kern, "pooling": {"kind": "gaussian", "s": s},
                       "homogeneous": True})
    return {"boundary": "zero-pad", "layers": layers}


_EXP = {"kind": "exponential", "sigma": 0.6}
_LIN = {"kind": "linear"}


def _poly(r):
    return {"kind": "polynomial", "degree": r}


PRESETS = {
    "exp-exp-2layer": _two_layer(_EXP, _EXP),
    "exp-poly3-2layer": _two_layer(_EXP, _poly(3)),
    "exp-poly2-2layer": _two_layer(_EXP, _poly(2)),
    "poly2-exp-2layer": _two_layer(_poly(2), _EXP),
    "poly2-poly2-2layer": _two_layer(_poly(2), _poly(2)),
    "exp-lin-2layer": _two_layer(_EXP, _LIN),
    "exp-exp-3x5": _two_layer(_EXP, _EXP, conv=(3, 5)),
    "exp-poly4-3x5": _two_layer(_EXP, _poly(4), conv=(3, 5)),
    "exp-exp-exp-3layer": {"boundary": "zero-pad", "layers": [
        {"patch": 3, "kernel": _EXP, "pooling": {"kind": "gaussian", "s": 2}, "homogeneous": True}
        for _ in range(3)]},
    "exp-poly2-poly2-3layer": {"boundary": "zero-pad", "layers": [
        {"patch": 3, "kernel": k, "pooling": {"kind": "gaussian", "s": 2}, "homogeneous": True}
        for k in (_EXP, _poly(2), _poly(2))]},
    # same as exp-exp-2layer but with stride-only downsampling (no smoothing)
    "exp-exp-strided": {"boundary": "zero-pad", "layers": [
        {"patch": 3, "kernel": _EXP, "pooling": {"kind": "dirac", "stride": s}, "homogeneous": True}
        for s in (2, 4)]},
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": "run",
    "data": {"source": "cifar10", "root": None, "n_train": 500, "n_test": 200, "downsample": 1,
             "zca": {"enabled": True, "patch": None, "eps": None, "mode": "patch"}},
    "krr": {"lambda": 1e-8, "pos": 0.9, "neg": -0.1},
    "gram": {"tile": 128},
    "threads": 1,
    "seed": 0,
    "out": "runs/run",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def build_kernel(d: dict, where: str) -> dpk.DotProductKernel:
    _check_keys(d, _KERNEL_KEYS, where)
    try:
        return dpk.DotProductKernel(kind=d["kind"], sigma=float(d.get("sigma", 0.6)),
                                    degree=int(d.get("degree", 1)),
                                    coeffs=tuple(d.get("coeffs", ())))
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None


def build_pooling(d: dict, rank: int, where: str) -> PoolingFilter:
    _check_keys(d, _POOL_KEYS, where)
    kind = d.get("kind")
    stride = d.get("stride")
    try:
        if kind == "gaussian":
            return gaussian_filter(int(d["s"]), rank=rank, stride=None if stride is None else int(stride))
        if kind == "average":
            return average_filter(int(d["size"]), stride=int(stride or 1), rank=rank)
        if kind == "dirac":
            return dirac_filter(int(stride or 1), rank=rank)
        if kind == "custom":
            return custom_filter(d["offsets"], d["taps"], int(stride or 1), rank=rank)
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None
    raise ConfigError(f"{where}: unknown pooling kind {kind!r}")


def build_patch(p, rank: int, where: str) -> PatchShape:
    try:
        if isinstance(p, int):
            return PatchShape.box(p, rank)
        return PatchShape(tuple(tuple(o) if isinstance(o, list) else o for o in p))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None


def build_arch(arch: dict, grid_extents: tuple[int, ...], channels: int) -> ArchSpec:
    _check_keys(arch, _ARCH_KEYS, "arch")
    rank = len(grid_extents)
    layers = []
    if not arch.get("layers"):
        raise ConfigError("arch: at least one layer required")
    for i, ld in enumerate(arch["layers"]):
        w = f"arch.layers[{i}]"
        _check_keys(ld, _LAYER_KEYS, w)
        layers.append(LayerSpec(build_patch(ld.get("patch", 1), rank, w + ".patch"),
                                build_kernel(ld.get("kernel", {"kind": "linear"}), w + ".kernel"),
                                build_pooling(ld.get("pooling", {"kind": "dirac"}), rank, w + ".pooling"),
                                bool(ld.get("homogeneous", True))))
    try:
        return ArchSpec(Grid(grid_extents, arch.get("boundary", "periodic")), channels, tuple(layers))
    except ValueError as e:
        raise ConfigError(f"arch: {e}") from None


@dataclass(frozen=True)
class RunConfig:
    raw: dict

    @property
    def arch_dict(self) -> dict:
        return self.raw["arch"]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def lam(self) -> float:
        return float(self.raw["krr"]["lambda"])

    @property
    def threads(self) -> int:
        return int(self.raw["threads"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    @property
    def tile(self) -> int:
        return int(self.raw["gram"]["tile"])

    def input_shape(self) -> tuple[tuple[int, ...], int]:
        """Grid extents and channel count the architecture will see."""
        d = self.data
        src = d["source"]
        if src == "cifar10":
            side = 32 // int(d.get("downsample", 1))
            return (side, side), 3
        if src == "spheres":
            return (int(d["n_positions"]),), int(d["d"])
        if src == "noise":
            return (int(d["height"]), int(d["width"])), int(d.get("channels", 3))
        raise ConfigError(f"data.source: unknown source {src!r}")

    def arch(self) -> ArchSpec:
        ext, ch = self.input_shape()
        return build_arch(self.arch_dict, ext, ch)

    def data_root(self) -> Path | None:
        root = self.data.get("root") or os.environ.get(DATA_ENV)
        return Path(root) if root else None

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    def with_overrides(self, **kw) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if v is not None:
                raw[k] = v
        return validate(raw)


def validate(raw: dict) -> RunConfig:
    """Check keys and module preconditions; build the architecture once to catch errors early."""
    _check_keys(raw, _TOP_KEYS, "config")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')}")
    if "arch" not in raw:
        raise ConfigError("config: missing arch")
    _check_keys(raw["data"], _DATA_KEYS, "data")
    if "zca" in raw["data"]:
        _check_keys(raw["data"]["zca"], _ZCA_KEYS, "data.zca")
    _check_keys(raw["krr"], _KRR_KEYS, "krr")
    _check_keys(raw["gram"], _GRAM_KEYS, "gram")
    if float(raw["krr"]["lambda"]) < 0:
        raise ConfigError("krr.lambda must be non-negative")
    if int(raw["threads"]) < 1:
        raise ConfigError("threads must be >= 1")
    if int(raw["gram"]["tile"]) < 1:
        raise ConfigError("gram.tile must be >= 1")
    cfg = RunConfig(raw)
    ds = int(raw["data"].get("downsample", 1))
    if raw["data"]["source"] == "cifar10" and (ds < 1 or 32 % ds):
        raise ConfigError(f"data.downsample {ds} does not divide 32")
    cfg.arch()
    return cfg


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    preset = d.pop("preset", None)
    base = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        base["arch"] = copy.deepcopy(PRESETS[preset])
        base["name"] = preset
    return validate(_merge(base, d))


def load(path: str | Path) -> RunConfig:
    with open(path) as f:
        d = yaml.safe_load(f) or {}
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(d)


def preset(name: str, **overrides) -> RunConfig:
    return from_dict(_merge({"preset": name}, overrides))

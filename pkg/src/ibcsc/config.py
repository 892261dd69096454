"""Declarative run configuration (JSON) with field-path validation."""
from __future__ import annotations

import copy
import json
import os
from typing import Any, Dict, Iterable, Optional

CONFIG_VERSION = 1
RUN_ROOT_ENV = "IBCSC_RUN_ROOT"

# Preset default epoch budgets when train.epochs is null.
PRESET_EPOCHS = {"toy": 50, "micro": 50, "resnet18": 280}


class ConfigError(ValueError):
    """Invalid configuration; `path` is the dotted field path at fault."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_NUMBER = (float,)  # ints accepted and stored as floats

# Each leaf: (default, allowed types, validator or None). None in `types`
# means the field may be null.
SCHEMA: Dict[str, Any] = {
    "version": (CONFIG_VERSION, (int,), lambda v: v == CONFIG_VERSION or f"unsupported version {v}"),
    "seed": (0, (int,), lambda v: v >= 0 or "must be >= 0"),
    "output_dir": ("runs/default", (str,), None),
    "model": {
        "preset": ("micro", (str,), lambda v: v in PRESET_EPOCHS or f"unknown preset {v!r}"),
        "layer_kind": ("csc", (str,), lambda v: v in ("csc", "conv") or "must be 'csc' or 'conv'"),
        "steps": (2, (int,), lambda v: v >= 1 or "must be >= 1"),
        "lam_init": (1e-3, _NUMBER, lambda v: v >= 0 or "must be >= 0"),
        "threshold": ("inverse", (str,), lambda v: v in ("inverse", "lipschitz") or "must be 'inverse' or 'lipschitz'"),
        "blocks_per_stage": (None, (int, None), lambda v: v is None or v >= 1 or "must be >= 1"),
    },
    "dataset": {
        "source": ("synthetic", (str,), lambda v: v in ("synthetic", "cifar") or "must be 'synthetic' or 'cifar'"),
        "seed": (0, (int,), None),
        "split_seed": (1, (int,), None),
        "classes": (4, (int,), lambda v: v >= 2 or "must be >= 2"),
        "per_class": (200, (int,), lambda v: v >= 1 or "must be >= 1"),
        "test_fraction": (0.5, _NUMBER, lambda v: 0 < v < 1 or "must be in (0, 1)"),
        "noise0": (0.02, _NUMBER, lambda v: v >= 0 or "must be >= 0"),
        "synth": {
            "channels": (3, (int,), lambda v: v >= 1 or "must be >= 1"),
            "code_channels": (6, (int,), lambda v: v >= 1 or "must be >= 1"),
            "k": (5, (int,), lambda v: v % 2 == 1 or "must be odd"),
            "h": (16, (int,), lambda v: v >= 2 and v % 2 == 0 or "must be even and >= 2"),
            "w": (16, (int,), lambda v: v >= 2 and v % 2 == 0 or "must be even and >= 2"),
            "density": (0.1, _NUMBER, lambda v: 0 < v <= 1 or "must be in (0, 1]"),
            "amplitude": (0.5, _NUMBER, lambda v: v > 0 or "must be > 0"),
            "separation": (1.0, _NUMBER, lambda v: 0 <= v <= 1 or "must be in [0, 1]"),
        },
        "train_path": (None, (str, None), None),
        "test_path": (None, (str, None), None),
        "num_classes": (10, (int,), lambda v: v in (10, 100) or "must be 10 or 100"),
    },
    "train": {
        "beta": (0.001, _NUMBER, lambda v: v >= 0 or "must be >= 0"),
        "lr0": (0.1, _NUMBER, lambda v: v > 0 or "must be > 0"),
        "epochs": (None, (int, None), lambda v: v is None or v >= 1 or "must be >= 1"),
        "batch_size": (32, (int,), lambda v: v >= 1 or "must be >= 1"),
        "momentum": (0.9, _NUMBER, lambda v: 0 <= v < 1 or "must be in [0, 1)"),
        "nesterov": (True, (bool,), None),
        "weight_decay": (5e-4, _NUMBER, lambda v: v >= 0 or "must be >= 0"),
        "squared_penalty": (False, (bool,), None),
    },
    "adapt": {
        "levels": ([1, 2, 3, 4, 5], (list,), lambda v: (len(v) > 0 and all(
            isinstance(x, int) and not isinstance(x, bool) and 1 <= x <= 5 for x in v)) or "must be a non-empty list of levels 1..5"),
        "budgets": ([100], (list,), lambda v: (len(v) > 0 and all(
            isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v)) or "must be a non-empty list of positive sizes"),
        "adapt_epochs": (30, (int,), lambda v: v >= 1 or "must be >= 1"),
        "adapt_lr0": (0.1, _NUMBER, lambda v: v >= 0 or "must be >= 0"),
        "beta": (0.001, _NUMBER, lambda v: v >= 0 or "must be >= 0"),
        "momentum": (0.9, _NUMBER, lambda v: 0 <= v < 1 or "must be in [0, 1)"),
        "nesterov": (True, (bool,), None),
        "batch_size": (None, (int, None), lambda v: v is None or v >= 1 or "must be >= 1"),
        "corruption_seed": (0, (int,), None),
        "include_subset_in_eval": (False, (bool,), None),
    },
}


def default_config() -> dict:
    def build(node):
        if isinstance(node, dict):
            return {k: build(v) for k, v in node.items()}
        return copy.deepcopy(node[0])
    return build(SCHEMA)


def _type_ok(value, types) -> bool:
    if value is None:
        return None in types
    if isinstance(value, bool):
        return bool in types
    if isinstance(value, int) and not isinstance(value, bool) and int not in types and float in types:
        return True
    return isinstance(value, tuple(t for t in types if t is not None))


def _merge(schema, user, path, out):
    if not isinstance(user, dict):
        raise ConfigError(path or "<root>", "expected an object")
    for key in user:
        if key not in schema:
            raise ConfigError(_join(path, key), "unknown field")
    for key, node in schema.items():
        fpath = _join(path, key)
        if isinstance(node, dict):
            out[key] = {}
            _merge(node, user.get(key, {}), fpath, out[key])
            continue
        default, types, check = node
        value = user.get(key, copy.deepcopy(default))
        if not _type_ok(value, types):
            names = "/".join("null" if t is None else t.__name__ for t in types)
            raise ConfigError(fpath, f"expected {names}, got {type(value).__name__} {value!r}")
        if check is not None:
            verdict = check(value)
            if verdict is not True:
                raise ConfigError(fpath, verdict if isinstance(verdict, str) else "invalid value")
        if isinstance(value, int) and not isinstance(value, bool) and float in types and int not in types:
            value = float(value)
        out[key] = value
    return out


def _join(path, key):
    return f"{path}.{key}" if path else key


def resolve_config(user: Optional[dict] = None, overrides: Iterable[str] = ()) -> dict:
    """Merge `user` over the defaults, apply ``a.b=value`` overrides, validate.

    Cross-field rules: cifar sources need both paths; a null
    ``train.epochs`` becomes the preset's default budget.
    """
    user = copy.deepcopy(user or {})
    for item in overrides:
        apply_override(user, item)
    cfg = _merge(SCHEMA, user, "", {})
    ds = cfg["dataset"]
    if ds["source"] == "cifar":
        for key in ("train_path", "test_path"):
            if not ds[key]:
                raise ConfigError(f"dataset.{key}", "required when dataset.source is 'cifar'")
            if not os.path.isfile(ds[key]):
                raise ConfigError(f"dataset.{key}", f"file not found: {ds[key]}")
    if cfg["train"]["epochs"] is None:
        cfg["train"]["epochs"] = PRESET_EPOCHS[cfg["model"]["preset"]]
    return cfg


def apply_override(user: dict, item: str):
    """``section.field=value``; the value is parsed as JSON, else kept as a string."""
    if "=" not in item:
        raise ConfigError(item, "override must look like section.field=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = SCHEMA
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(".".join(parts[:i + 1]), "unknown field")
        node = node[part]
    if isinstance(node, dict):
        raise ConfigError(key, "cannot override a whole section")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    target = user
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError(key, "parent is not an object")
    target[parts[-1]] = value


def load_config(path, overrides: Iterable[str] = ()) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("<config>", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<config>", f"{path}: invalid JSON ({exc})") from None
    return resolve_config(user, overrides)


def dump_config(cfg: dict, path):
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_dir(cfg: dict, root: Optional[str] = None) -> str:
    """Resolve ``output_dir``: relative paths live under $IBCSC_RUN_ROOT (or the cwd)."""
    out = cfg["output_dir"]
    if os.path.isabs(out):
        return out
    base = root if root is not None else os.environ.get(RUN_ROOT_ENV, os.getcwd())
    return os.path.join(base, out)

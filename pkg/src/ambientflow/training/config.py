"""Declarative experiment description, validated against a JSON schema."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from ..errors import ConfigError, IngestError

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ambientflow experiment",
    **_obj({
        "mode": {"enum": ["conventional", "ambient"]},
        "seed": {"type": "integer", "minimum": 0},
        "dataset": _obj({
            "kind": {"enum": ["toy2d-octagon", "piecewise-image", "tensor-directory"]},
            "size": _POS_INT,
            "radius": {"type": "number", "exclusiveMinimum": 0},
            "sigma_f": {"type": "number", "exclusiveMinimum": 0},
            "sigma_n": {"type": "number", "minimum": 0},
            "shape": {"type": "array", "items": _POS_INT, "minItems": 1, "maxItems": 2},
            "jumps": {"type": "integer", "minimum": 0},
            "path": {"type": "string"},
        }, ["kind"]),
        "measurement": _obj({
            "kind": {"enum": ["identity", "gaussian-blur", "subsampled-fourier"]},
            "sigma_n": {"type": "number", "minimum": 0},
            "blur_sigma": {"type": "number", "exclusiveMinimum": 0},
            "ratio": {"type": "number", "minimum": 1},
        }, ["kind"]),
        "sparsity": _obj({
            "kind": {"enum": ["identity", "discrete-gradient-2d"]},
            "k": _POS_INT,
        }, ["kind", "k"]),
        "model": _obj({
            "couplings": {"type": ["integer", "null"], "minimum": 1},
            "width": _POS_INT,
            "mix": {"enum": ["lu", "reverse", "random", "none"]},
            "actnorm": {"type": "boolean"},
            "alpha": {"type": "number", "exclusiveMinimum": 0},
            "posterior_couplings": {"type": ["integer", "null"], "minimum": 1},
            "posterior_width": _POS_INT,
            "cond_features": _POS_INT,
        }),
        "objective": _obj({
            "M": _POS_INT,
            "lam": {"type": "number", "minimum": 0},
            "mu": {"type": "number", "minimum": 0},
        }),
        "optimizer": _obj({
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "eps": {"type": "number", "exclusiveMinimum": 0},
            "clip": _NUM,
            "warmup": {"type": "integer", "minimum": 0},
        }),
        "training": _obj({
            "steps": {"type": "integer", "minimum": 0},
            "batch_size": _POS_INT,
            "log_every": _POS_INT,
            "checkpoint_every": {"type": "integer", "minimum": 0},
            "monitor_samples": _POS_INT,
        }),
        "out_dir": {"type": "string"},
    }, ["mode", "dataset"]),
}

DEFAULTS = {
    "seed": 0,
    "model": {"couplings": None, "width": 64, "mix": "lu", "actnorm": True, "alpha": 1.9,
              "posterior_couplings": None, "posterior_width": 64, "cond_features": 32},
    "objective": {"M": 4, "lam": 1.0, "mu": 0.0},
    "optimizer": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "clip": 50.0, "warmup": 0},
    "training": {"steps": 20000, "batch_size": None, "log_every": 500, "checkpoint_every": 0,
                 "monitor_samples": 4},
}
DATASET_DEFAULTS = {
    "toy2d-octagon": {"size": 1_000_000, "radius": 1.0, "sigma_f": 0.15, "sigma_n": 0.45},
    "piecewise-image": {"size": 4096, "shape": [8, 8], "jumps": 1},
    "tensor-directory": {},
}


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


class ExperimentConfig:
    """Validated config with defaults filled in; ``data`` is a plain dict."""

    def __init__(self, raw: dict):
        validate(raw)
        kind = raw["dataset"]["kind"]
        data = _merge(DEFAULTS, {"dataset": DATASET_DEFAULTS[kind]})
        data = _merge(data, raw)
        if data["training"]["batch_size"] is None:
            data["training"]["batch_size"] = 256 if kind == "toy2d-octagon" else 32
        self.data = data
        self._check_semantics()

    def _check_semantics(self) -> None:
        d = self.data
        ds = d["dataset"]
        if ds["kind"] == "tensor-directory" and ("path" not in ds or "shape" not in ds):
            raise ConfigError("tensor-directory datasets need 'path' and 'shape'")
        if ds["kind"] == "toy2d-octagon":
            meas = d.get("measurement")
            if meas is not None and meas["kind"] != "identity":
                raise ConfigError("the toy mixture is measured through the identity operator")
        elif d["mode"] == "ambient" and "measurement" not in d:
            raise ConfigError("ambient mode requires a 'measurement' section")
        if d["objective"]["mu"] > 0 and "sparsity" not in d:
            raise ConfigError("objective.mu > 0 requires a 'sparsity' section")
        if d["mode"] == "ambient":
            sigma = (ds.get("sigma_n") if ds["kind"] == "toy2d-octagon"
                     else d["measurement"].get("sigma_n", 0.0))
            if not sigma or sigma <= 0:
                raise ConfigError("ambient mode needs a positive noise level sigma_n")

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True) + "\n"

    def hash(self) -> str:
        blob = json.dumps({k: v for k, v in self.data.items() if k != "out_dir"},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise IngestError(f"{path}: {exc.strerror}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls(raw)

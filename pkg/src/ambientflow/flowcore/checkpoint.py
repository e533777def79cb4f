"""Model directories: ``model.json`` architecture plus one AFTN blob per parameter."""
from __future__ import annotations

import json
from pathlib import Path

from ..diffengine import aftn
from ..errors import IngestError
from .flow import model_from_descriptor


def save_model(model, directory) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    desc = model.descriptor()
    desc["parameters"] = model.params.names()
    for name, t in model.params.items():
        aftn.save(directory / "params" / f"{name}.aftn", t.data)
    (directory / "model.json").write_text(json.dumps(desc, indent=1, sort_keys=True) + "\n")
    return directory


def load_model(directory):
    directory = Path(directory)
    try:
        desc = json.loads((directory / "model.json").read_text())
    except OSError as exc:
        raise IngestError(f"{directory}: no model.json ({exc.strerror})") from exc
    model = model_from_descriptor(desc)
    expected = desc.get("parameters", model.params.names())
    if sorted(expected) != sorted(model.params.names()):
        raise IngestError(f"{directory}: parameter list does not match architecture")
    for name in model.params.names():
        arr = aftn.load(directory / "params" / f"{name}.aftn")
        if arr.shape != model.params[name].shape:
            raise IngestError(f"{directory}: parameter {name} has shape {arr.shape}, "
                              f"expected {model.params[name].shape}")
        model.params[name].data = arr
    return model

"""Adam with global gradient-norm clipping."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..diffengine import aftn
from ..errors import ConfigError, IngestError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 50.0
    warmup: int = 0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        d = asdict(self)
        d.pop("m")
        d.pop("v")
        return d


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(total):
        return grads, total
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def adam_step(params: dict, grads: dict, state: OptimizerState) -> float:
    """In-place Adam update of ``params`` (name -> Tensor); returns the pre-clip grad norm.

    Parameters without a gradient entry (unreachable from the loss) are left alone.
    """
    grads, norm = clip_by_global_norm(grads, state.clip)
    state.step += 1
    t = state.step
    lr = state.lr * min(1.0, t / state.warmup) if state.warmup > 0 else state.lr
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


def save_state(state: OptimizerState, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in state.m:
        aftn.save(directory / f"m.{name}.aftn", state.m[name])
        aftn.save(directory / f"v.{name}.aftn", state.v[name])
    meta = state.hyper()
    meta["names"] = list(state.m)
    (directory / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_state(directory) -> OptimizerState:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "state.json").read_text())
    except OSError as exc:
        raise IngestError(f"{directory}: missing optimizer state ({exc.strerror})") from exc
    names = meta.pop("names")
    state = OptimizerState(**meta)
    for name in names:
        state.m[name] = aftn.load(directory / f"m.{name}.aftn")
        state.v[name] = aftn.load(directory / f"v.{name}.aftn")
    return state

"""Datasets: the octagon mixture, piecewise-constant images and AFTN folders.

In ambient mode a :class:`Dataset` only hands measurements to the trainer.
Object tensors stay behind :meth:`Dataset.objects`, which counts every read
so tests can assert that optimisation never touched them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from ..diffengine import Streams, aftn
from ..errors import ConfigError, IngestError
from ..imaging import MeasurementModel


@dataclass(frozen=True)
class ToyMixtureSpec:
    radius: float = 1.0
    sigma_f: float = 0.15
    sigma_n: float = 0.45
    modes: int = 8

    def centers(self) -> np.ndarray:
        ang = 2.0 * np.pi * np.arange(self.modes) / self.modes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def log_density(self, x, extra_var: float = 0.0) -> np.ndarray:
        """Log density of the object mixture (or of the measurements when
        ``extra_var = sigma_n**2``)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        var = self.sigma_f ** 2 + extra_var
        d2 = ((x[:, None, :] - self.centers()[None]) ** 2).sum(axis=2)
        return logsumexp(-0.5 * d2 / var, axis=1) - math.log(self.modes) - math.log(2 * math.pi * var)

    def measurement_log_density(self, g) -> np.ndarray:
        return self.log_density(g, self.sigma_n ** 2)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.modes, count)
        return self.centers()[idx] + self.sigma_f * rng.standard_normal((count, 2))


class Dataset:
    """Objects (quarantined in ambient mode) and optional paired measurements."""

    def __init__(self, kind: str, objects: np.ndarray | None, measurements: np.ndarray | None = None,
                 meas: MeasurementModel | None = None, shape=None, meta: dict | None = None):
        self.kind = kind
        self._objects = None if objects is None else np.asarray(objects, dtype=np.float64)
        self.measurements = None if measurements is None else np.asarray(measurements, dtype=np.float64)
        self.meas = meas
        self.shape = tuple(shape) if shape is not None else (self.dim,)
        self.meta = dict(meta or {})
        self.object_reads = 0
        if self._objects is not None and self.measurements is not None \
                and len(self._objects) != len(self.measurements):
            raise ConfigError("objects and measurements differ in count")

    def __len__(self) -> int:
        src = self.measurements if self.measurements is not None else self._objects
        return 0 if src is None else len(src)

    @property
    def dim(self) -> int:
        src = self._objects if self._objects is not None else self.measurements
        return int(src.shape[1])

    @property
    def has_objects(self) -> bool:
        return self._objects is not None

    def objects(self, idx=None) -> np.ndarray:
        """Ground-truth objects; every call is counted."""
        if self._objects is None:
            raise ConfigError(f"dataset {self.kind!r} carries no object tensors")
        self.object_reads += 1
        return self._objects if idx is None else self._objects[idx]

    def batch(self, mode: str, idx) -> np.ndarray:
        """Training batch: objects in conventional mode, measurements in ambient mode."""
        if mode == "ambient":
            if self.measurements is None:
                raise ConfigError("ambient training needs measurements")
            return self.measurements[idx]
        if mode == "conventional":
            return self.objects(idx)
        raise ConfigError(f"unknown training mode {mode!r}")

    def split(self, count: int) -> tuple["Dataset", "Dataset"]:
        """First ``len - count`` rows and the last ``count`` rows."""
        if not 0 < count < len(self):
            raise ConfigError(f"cannot hold out {count} of {len(self)} samples")
        cut = len(self) - count

        def part(sl):
            obj = None if self._objects is None else self._objects[sl]
            g = None if self.measurements is None else self.measurements[sl]
            return Dataset(self.kind, obj, g, self.meas, self.shape, self.meta)
        return part(slice(0, cut)), part(slice(cut, None))


def make_toy2d(spec: ToyMixtureSpec, size: int, streams: Streams) -> Dataset:
    """``size`` draws from the octagon mixture and their ``g = f + n``."""
    if size < 1:
        raise ConfigError("dataset size must be >= 1")
    f = spec.sample(size, streams.generator("toy.objects"))
    meas = MeasurementModel("identity", (2,), spec.sigma_n)
    g = meas.measure(f, streams, "toy.noise")
    return Dataset("toy2d-octagon", f, g, meas, (2,),
                   {"radius": spec.radius, "sigma_f": spec.sigma_f, "sigma_n": spec.sigma_n})


def piecewise_sparsity_level(shape, jumps: int) -> int:
    """Transform-domain nonzeros of a :func:`make_piecewise` image, mean row included."""
    h, w = shape
    return jumps * ((h if w > 1 else 0) + (w if h > 1 else 0)) + 1


def make_piecewise(shape, jumps: int, size: int, streams: Streams,
                   meas: MeasurementModel | None = None) -> Dataset:
    """Images ``u(y) + v(x)`` where ``u`` and ``v`` are step functions with
    ``jumps`` steps each (a 1-pixel-tall image only gets the ``x`` profile).

    Every horizontal step changes all ``h`` horizontal differences in one
    column and nothing vertically, so the discrete gradient has at most
    ``jumps * (h + w)`` nonzeros.
    """
    h, w = (int(s) for s in shape)
    if jumps < 0 or size < 1:
        raise ConfigError("jumps must be >= 0 and size >= 1")
    axes = [(ax, n) for ax, n in ((0, h), (1, w)) if n > 1]
    if any(jumps > n - 1 for _, n in axes):
        raise ConfigError(f"{jumps} jumps do not fit in shape {shape}")
    rng = streams.generator("piecewise.objects")
    scale = 1.0 / math.sqrt(max(len(axes), 1))
    out = np.zeros((size, h, w))
    for ax, n in axes:
        prof = np.empty((size, n))
        for i in range(size):
            cuts = np.sort(rng.choice(np.arange(1, n), size=jumps, replace=False))
            levels = scale * rng.standard_normal(jumps + 1)
            prof[i] = np.repeat(levels, np.diff(np.concatenate([[0], cuts, [n]])))
        out += prof[:, :, None] if ax == 0 else prof[:, None, :]
    f = out.reshape(size, h * w)
    g = None if meas is None else meas.measure(f, streams, "piecewise.noise")
    return Dataset("piecewise-image", f, g, meas, (h, w), {"jumps": jumps})


def export_directory(ds: Dataset, path) -> list[Path]:
    """Write each object as ``000000.aftn`` etc. (an evaluation-side read)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    objs = ds.objects()
    width = max(6, len(str(len(objs))))
    return [aftn.save(path / f"{i:0{width}d}.aftn", o.reshape(ds.shape)) for i, o in enumerate(objs)]


def ingest_directory(path, shape, meas: MeasurementModel | None = None,
                     streams: Streams | None = None) -> Dataset:
    """Load every ``*.aftn`` file in ``path`` (sorted by name) as objects of ``shape``.

    A file may hold one tensor of ``shape`` or a stack ``[N, *shape]``.
    """
    path = Path(path)
    if not path.is_dir():
        raise IngestError(f"{path}: not a directory")
    files = sorted(path.glob("*.aftn"))
    if not files:
        raise IngestError(f"{path}: no .aftn files found")
    shape = tuple(int(s) for s in shape)
    rows = []
    for fp in files:
        arr = aftn.load(fp)
        if arr.shape == shape:
            rows.append(arr.reshape(1, -1))
        elif arr.shape[1:] == shape:
            rows.append(arr.reshape(arr.shape[0], -1))
        else:
            raise IngestError(f"{fp}: tensor shape {arr.shape} does not match {shape}")
    f = np.concatenate(rows, axis=0)
    g = None
    if meas is not None:
        if streams is None:
            raise ConfigError("simulating measurements needs an RNG stream")
        g = meas.measure(f, streams, "ingest.noise")
    return Dataset("tensor-directory", f, g, meas, shape, {"path": str(path)})

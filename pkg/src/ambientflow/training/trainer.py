"""Training loop for conventional flows (NLL) and AmbientFlow (practical objective)."""
from __future__ import annotations

import csv
import json
import math
import shutil
from pathlib import Path

import numpy as np

from ..diffengine import Streams, Tensor, backward, no_grad, ops
from ..errors import ConfigError, DivergenceError, IngestError, NumericError
from ..flowcore import build_conditional_flow, build_flow, load_model, save_model
from ..imaging import MeasurementModel, SparsityModel
from ..objectives import ObjectiveConfig, constraint_monitor, nll, practical_objective
from .config import ExperimentConfig
from .data import Dataset, ToyMixtureSpec, ingest_directory, make_piecewise, make_toy2d
from .optim import OptimizerState, adam_step, load_state, save_state

METRIC_FIELDS = ["step", "loss", "bound", "log_prior", "log_noise", "log_post", "penalty",
                 "grad_norm", "eps_hat"]


def build_measurement(cfg: ExperimentConfig) -> MeasurementModel | None:
    ds = cfg["dataset"]
    if ds["kind"] == "toy2d-octagon":
        return MeasurementModel("identity", (2,), ds["sigma_n"])
    spec = cfg.get("measurement")
    if spec is None:
        return None
    return MeasurementModel(spec["kind"], ds["shape"], spec.get("sigma_n", 0.0),
                            blur_sigma=spec.get("blur_sigma"), ratio=spec.get("ratio"))


def build_sparsity(cfg: ExperimentConfig) -> SparsityModel | None:
    spec = cfg.get("sparsity")
    if spec is None:
        return None
    shape = cfg["dataset"].get("shape", [2])
    return SparsityModel(spec["kind"], spec["k"], shape)


def build_dataset(cfg: ExperimentConfig, streams: Streams) -> Dataset:
    ds = cfg["dataset"]
    data_streams = streams.child("data")
    meas = build_measurement(cfg)
    if ds["kind"] == "toy2d-octagon":
        spec = ToyMixtureSpec(ds["radius"], ds["sigma_f"], ds["sigma_n"])
        return make_toy2d(spec, ds["size"], data_streams)
    if ds["kind"] == "piecewise-image":
        return make_piecewise(ds["shape"], ds["jumps"], ds["size"], data_streams, meas)
    return ingest_directory(ds["path"], ds["shape"], meas, data_streams if meas else None)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class Trainer:
    """Owns the models, optimizer state and metric history of one run."""

    def __init__(self, cfg: ExperimentConfig, dataset: Dataset | None = None):
        self.cfg = cfg
        self.mode = cfg["mode"]
        self.streams = Streams(cfg["seed"])
        self.dataset = dataset if dataset is not None else build_dataset(cfg, self.streams)
        if len(self.dataset) == 0:
            raise ConfigError("empty dataset")
        self.meas = self.dataset.meas if self.dataset.meas is not None else build_measurement(cfg)
        self.sparsity = build_sparsity(cfg)
        if self.mode == "ambient" and self.meas is None:
            raise ConfigError("ambient mode requires a measurement model")
        mc = cfg["model"]
        image_shape = None
        n = self.dataset.dim
        self.prior = build_flow(n, mc["couplings"], mc["width"], seed=cfg["seed"], mix=mc["mix"],
                                actnorm=mc["actnorm"], image_shape=image_shape, alpha=mc["alpha"])
        self.posterior = None
        if self.mode == "ambient":
            self.posterior = build_conditional_flow(
                n, self.meas.m, mc["posterior_couplings"], mc["posterior_width"], mc["cond_features"],
                seed=cfg["seed"] + 1, mix=mc["mix"], actnorm=mc["actnorm"], alpha=mc["alpha"])
        oc = cfg["objective"]
        self.objective = ObjectiveConfig(oc["M"], oc["lam"], oc["mu"],
                                         None if self.sparsity is None else self.sparsity.k,
                                         cfg["training"]["batch_size"])
        self.opt = OptimizerState(**cfg["optimizer"])
        self.step_index = 0
        self.history: list[dict] = []

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict:
        out = {f"prior/{k}": v for k, v in self.prior.params.items()}
        if self.posterior is not None:
            out.update({f"posterior/{k}": v for k, v in self.posterior.params.items()})
        return out

    def _batch_index(self, step: int) -> np.ndarray:
        rng = self.streams.generator("batch", step)
        return rng.integers(0, len(self.dataset), self.objective.batch_size)

    def _initialise(self) -> None:
        """Data-dependent actnorm init from the step-0 batch.

        In ambient mode both flows are initialised from ``H^T g``; objects are
        never consulted.
        """
        batch = self.dataset.batch(self.mode, self._batch_index(0))
        if self.mode == "conventional":
            self.prior.init_actnorm(batch)
            return
        with no_grad():
            back = self.meas.adjoint(Tensor(batch)).data
        self.prior.init_actnorm(back)
        self.posterior.init_actnorm(back)

    # -- one step -------------------------------------------------------------

    def _evaluate(self, step: int):
        batch = self.dataset.batch(self.mode, self._batch_index(step))
        if self.mode == "conventional":
            loss = nll(self.prior, batch)
            return loss, {"loss": loss.item(), "bound": -loss.item(), "log_prior": -loss.item(),
                          "log_noise": 0.0, "log_post": 0.0, "penalty": 0.0}, batch
        val = practical_objective(self.prior, self.posterior, self.meas, batch, self.objective,
                                  self.sparsity, streams=self.streams, step=step)
        loss = ops.neg(val.value)
        return loss, {"loss": loss.item(), "bound": val.bound, "log_prior": val.log_prior,
                      "log_noise": val.log_noise, "log_post": val.log_post,
                      "penalty": val.penalty}, batch

    def step(self) -> dict:
        if self.step_index == 0 and self.opt.step == 0:
            self._initialise()
        s = self.step_index
        params = self.named_parameters()
        for p in params.values():
            p.zero_grad()
        try:
            loss, row, batch = self._evaluate(s)
            backward(loss)
        except NumericError as exc:
            raise DivergenceError(f"step {s}: {exc}") from exc
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise DivergenceError(f"step {s}: non-finite gradient")
        row["grad_norm"] = adam_step(params, grads, self.opt)
        row["eps_hat"] = math.nan
        log_every = self.cfg["training"]["log_every"]
        if self.sparsity is not None and self.posterior is not None and s % log_every == 0:
            row["eps_hat"] = constraint_monitor(self.posterior, self.sparsity, batch,
                                                self.cfg["training"]["monitor_samples"],
                                                self.streams, s)
        row["step"] = s
        self.history.append(row)
        self.step_index += 1
        return row

    def run(self, steps: int | None = None, out_dir=None, callback=None) -> "Trainer":
        """Advance ``steps`` steps (default: to the configured total)."""
        total = self.cfg["training"]["steps"]
        target = total if steps is None else self.step_index + steps
        ckpt_every = self.cfg["training"]["checkpoint_every"]
        ckpt = None if out_dir is None else Path(out_dir) / "checkpoint"
        while self.step_index < target:
            try:
                row = self.step()
            except DivergenceError:
                if ckpt is not None:
                    self.save(ckpt)
                raise
            if callback is not None:
                callback(self, row)
            if ckpt is not None and ckpt_every and self.step_index % ckpt_every == 0:
                self.save(ckpt)
        if ckpt is not None:
            self.save(ckpt)
        return self

    # -- checkpoints ------------------------------------------------------------

    def save(self, directory) -> Path:
        """Write a complete checkpoint; the directory is replaced atomically."""
        directory = Path(directory)
        tmp = directory.with_name(directory.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        save_model(self.prior, tmp / "prior")
        if self.posterior is not None:
            save_model(self.posterior, tmp / "posterior")
        save_state(self.opt, tmp / "optimizer")
        write_metrics(self.history, tmp / "metrics.csv")
        (tmp / "config.json").write_text(self.cfg.to_json())
        (tmp / "rng.json").write_text(json.dumps({"seed": self.cfg["seed"],
                                                  "next_step": self.step_index}) + "\n")
        old = directory.with_name(directory.name + ".old")
        if directory.exists():
            if old.exists():
                shutil.rmtree(old)
            directory.rename(old)
        tmp.rename(directory)
        if old.exists():
            shutil.rmtree(old)
        return directory

    @classmethod
    def resume(cls, directory, dataset: Dataset | None = None) -> "Trainer":
        directory = Path(directory)
        try:
            cfg = ExperimentConfig(json.loads((directory / "config.json").read_text()))
            cursor = json.loads((directory / "rng.json").read_text())
        except OSError as exc:
            raise IngestError(f"{directory}: incomplete checkpoint ({exc.strerror})") from exc
        tr = cls(cfg, dataset)
        tr.prior = load_model(directory / "prior")
        if tr.posterior is not None:
            tr.posterior = load_model(directory / "posterior")
        tr.opt = load_state(directory / "optimizer")
        tr.history = read_metrics(directory / "metrics.csv")
        tr.step_index = int(cursor["next_step"])
        return tr


def write_metrics(history: list[dict], path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def train(cfg: ExperimentConfig, out_dir=None, dataset: Dataset | None = None,
          callback=None) -> Trainer:
    """Build and run a trainer for the configured number of steps."""
    return Trainer(cfg, dataset).run(out_dir=out_dir, callback=callback)

"""``ambientflow`` command-line driver.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
Failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .diffengine import Streams, Tensor, aftn, no_grad
from .errors import AmbientFlowError, ConfigError, IngestError

# -- output helpers ------------------------------------------------------------


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _resolve(out_dir: str | None, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() or out_dir is None else Path(out_dir) / p


def svg_scatter(points: np.ndarray, lim: float | None = None, size: int = 480) -> str:
    """Deterministic SVG scatter of 2-D points (no timestamps, fixed precision)."""
    pts = np.asarray(points, dtype=np.float64)
    if lim is None:
        lim = float(np.ceil(np.abs(pts).max() + 0.5)) if len(pts) else 1.0
    scale = size / (2 * lim)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<line x1="0" y1="{size / 2}" x2="{size}" y2="{size / 2}" stroke="#ccc"/>',
           f'<line x1="{size / 2}" y1="0" x2="{size / 2}" y2="{size}" stroke="#ccc"/>',
           '<g fill="#1f4e9c" fill-opacity="0.35">']
    for x, y in pts:
        cx, cy = (x + lim) * scale, (lim - y) * scale
        if 0 <= cx <= size and 0 <= cy <= size:
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="1.2"/>')
    out += ["</g>", "</svg>", ""]
    return "\n".join(out)


def pgm_grid(images: np.ndarray, cols: int | None = None, pad: int = 1) -> bytes:
    """Binary 8-bit PGM tiling ``[N, H, W]`` images, globally min-max scaled."""
    imgs = np.asarray(images, dtype=np.float64)
    n, h, w = imgs.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    lo, hi = float(imgs.min()), float(imgs.max())
    scaled = (imgs - lo) / (hi - lo) if hi > lo else np.zeros_like(imgs)
    canvas = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y:y + h, x:x + w] = np.round(scaled[i] * 255).astype(np.uint8)
    header = f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode()
    return header + canvas.tobytes()


def _write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


class RunManifest:
    """Written atomically on success; a failed run leaves ``.failed`` instead."""

    def __init__(self, out_dir: Path, command: str, config_hash: str):
        self.out_dir = out_dir
        self.data = {"command": command, "config_hash": config_hash, "code_version": __version__,
                     "started": _dt.datetime.now(_dt.timezone.utc).isoformat(), "artifacts": [],
                     "metrics": {}}
        out_dir.mkdir(parents=True, exist_ok=True)
        marker = out_dir / ".failed"
        if marker.exists():
            marker.unlink()

    def add(self, path: Path) -> None:
        self.data["artifacts"].append(str(path))

    def finish(self) -> Path:
        self.data["finished"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        path = self.out_dir / "manifest.json"
        _atomic_text(path, json.dumps(self.data, indent=1, sort_keys=True) + "\n")
        return path

    def fail(self, exc: BaseException) -> None:
        _atomic_text(self.out_dir / ".failed", json.dumps(_error_payload(exc)) + "\n")


def _error_payload(exc: BaseException) -> dict:
    code = getattr(exc, "exit_code", 1)
    return {"error": type(exc).__name__, "message": str(exc), "exit_code": code}


def _args_hash(args: argparse.Namespace) -> str:
    items = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out_dir")}
    return hashlib.sha256(json.dumps(items, sort_keys=True, default=str).encode()).hexdigest()[:16]

# -- commands ----------------------------------------------------------------------


def cmd_train(args) -> int:
    from .analysis import GridSpec, kl_grid_2d, mode_report
    from .training import ExperimentConfig, ToyMixtureSpec, Trainer

    cfg = ExperimentConfig.load(args.config)
    if args.steps is not None:
        cfg.data["training"]["steps"] = args.steps
    if args.dry_run:
        print(json.dumps({"valid": True, "config_hash": cfg.hash()}))
        return 0
    out_dir = Path(args.out_dir or cfg.get("out_dir") or "run")
    manifest = RunManifest(out_dir, "train", cfg.hash())
    try:
        trainer = Trainer(cfg)
        t0 = time.time()
        log_every = cfg["training"]["log_every"]

        def progress(tr, row):
            if not args.quiet and row["step"] % log_every == 0:
                print(f"step {row['step']} loss {row['loss']:.4f} bound {row['bound']:.4f}",
                      file=sys.stderr)
        trainer.run(out_dir=out_dir, callback=progress)
        ckpt = out_dir / "checkpoint"
        manifest.add(ckpt)
        summary = {"steps": trainer.step_index, "seconds": round(time.time() - t0, 3)}
        if trainer.history:
            summary.update({k: trainer.history[-1][k] for k in ("loss", "bound")})
        if cfg["dataset"]["kind"] == "toy2d-octagon":
            ds = cfg["dataset"]
            spec = ToyMixtureSpec(ds["radius"], ds["sigma_f"], ds["sigma_n"])
            x = trainer.prior.sample(10_000, Streams(cfg["seed"]), "eval.samples")
            rep = mode_report(x, spec.centers(), 0.3)
            with no_grad():
                kl = kl_grid_2d(spec.log_density,
                                lambda p: trainer.prior.log_prob(Tensor(p)).data, GridSpec())
            summary.update({"capture": rep.capture, "min_share": float(rep.shares.min()),
                            "max_share": float(rep.shares.max()),
                            "max_mode_std": float(np.nanmax(rep.mode_std)), "grid_kl": kl.kl})
        manifest.data["metrics"] = summary
        manifest.add(manifest.finish())
        print(json.dumps(summary, sort_keys=True))
        return 0
    except BaseException as exc:
        manifest.fail(exc)
        raise


def _load_models(checkpoint: Path):
    from .flowcore import load_model
    prior = load_model(checkpoint / "prior")
    posterior = load_model(checkpoint / "posterior") if (checkpoint / "posterior").exists() else None
    cfg = json.loads((checkpoint / "config.json").read_text())
    return prior, posterior, cfg


def cmd_sample(args) -> int:
    ckpt = Path(args.checkpoint)
    prior, _, cfg = _load_models(ckpt)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    x = prior.sample(args.count, Streams(args.seed), "cli.sample")
    out = _resolve(args.out_dir, args.out)
    aftn.save(out, x, {"checkpoint": str(ckpt), "seed": args.seed, "count": args.count})
    shape = cfg["dataset"].get("shape")
    if prior.dim == 2:
        _atomic_text(out.with_suffix(".svg"), svg_scatter(x, lim=4.0))
    elif shape and len(shape) == 2:
        _write_bytes(out.with_suffix(".pgm"), pgm_grid(x[:64].reshape(-1, *shape)))
    print(str(out))
    return 0


def cmd_reconstruct(args) -> int:
    from .analysis import rmse, ssim
    from .inference import (LangevinSchedule, ald_sample, least_norm, map_csgm, mmse_and_std,
                            posterior_net_sample)
    from .training import build_measurement
    from .training.config import ExperimentConfig

    ckpt = Path(args.checkpoint)
    prior, posterior, cfg_raw = _load_models(ckpt)
    cfg = ExperimentConfig(cfg_raw)
    meas = build_measurement(cfg)
    if args.measurement:
        from .imaging import MeasurementModel
        meas = MeasurementModel.from_descriptor(json.loads(Path(args.measurement).read_text()))
    if meas is None:
        raise ConfigError("no measurement model: pass --measurement")
    g = aftn.load(args.measurements).reshape(-1, meas.m)
    truth = None if args.truth is None else aftn.load(args.truth).reshape(len(g), -1)
    shape = cfg["dataset"].get("shape") or [prior.dim]
    streams = Streams(args.seed)
    out_dir = Path(args.out_dir or ".")
    estimates, stds, reports = [], [], []
    for j, gj in enumerate(g):
        t0 = time.time()
        rep = {"index": j, "method": args.method}
        if args.method == "map":
            res = map_csgm(prior, meas, gj, args.map_lambda, steps=args.steps, lr=args.lr,
                           restarts=args.restarts, streams=streams, index=j)
            est, sd = res.f, np.zeros_like(res.f)
            rep.update({"objective": res.objective, "residual_norm": res.residual_norm})
        elif args.method == "ald":
            sig = args.sigma_max if args.sigma_max else float(np.std(least_norm(meas, gj)))
            sched = LangevinSchedule.geometric(max(sig, 1e-3), args.sigma_min, args.levels,
                                               args.steps_per_level, args.eps)
            ens = ald_sample(prior, meas, gj, args.samples, sched, streams, index=j)
            est, sd = mmse_and_std(ens)
        elif args.method == "posterior-net":
            if posterior is None:
                raise ConfigError("checkpoint has no posterior network")
            ens = posterior_net_sample(posterior, gj, args.samples, streams, index=j)
            est, sd = mmse_and_std(ens)
        else:  # least-norm
            est = least_norm(meas, gj)[0]
            sd = np.zeros_like(est)
        with no_grad():
            rep["residual_norm"] = float(np.linalg.norm(gj - meas.apply(Tensor(est)).data))
        if truth is not None:
            rep["rmse"] = rmse(est, truth[j])
            if len(shape) == 2:
                rep["ssim"] = ssim(truth[j].reshape(shape), est.reshape(shape))
        rep["seconds"] = round(time.time() - t0, 4)
        estimates.append(est)
        stds.append(sd)
        reports.append(rep)
    est_arr = np.array(estimates)
    aftn.save(out_dir / "estimates.aftn", est_arr, {"method": args.method, "seed": args.seed})
    aftn.save(out_dir / "std.aftn", np.array(stds))
    if len(shape) == 2:
        _write_bytes(out_dir / "estimates.pgm", pgm_grid(est_arr.reshape(-1, *shape)))
    timing_free = [{k: v for k, v in r.items() if k != "seconds"} for r in reports]
    _atomic_text(out_dir / "report.json", json.dumps(reports, indent=1, sort_keys=True) + "\n")
    _atomic_text(out_dir / "report.csv", _reports_csv(timing_free))
    print(str(out_dir / "report.json"))
    return 0


def _reports_csv(reports: list[dict]) -> str:
    import csv
    import io
    keys = sorted({k for r in reports for k in r})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(keys)
    for r in reports:
        w.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in keys])
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    from .analysis import GridSpec, kl_grid_2d, metric_rows_csv, mode_report, rmse, ssim, w1_report
    from .training import ToyMixtureSpec

    x = aftn.load(args.samples)
    rows = []
    if args.reference:
        y = aftn.load(args.reference)
        n = min(len(x), len(y), args.w1_count)
        r = w1_report(x[:n].reshape(n, -1), y[:n].reshape(n, -1))
        rows += [("w1", r.value), ("w1_exact", int(r.exact)), ("w1_n", n)]
    if args.toy:
        spec = ToyMixtureSpec(args.radius, args.sigma_f, args.sigma_n)
        rep = mode_report(x, spec.centers(), args.capture_radius)
        rows += [("capture", rep.capture), ("min_share", float(rep.shares.min())),
                 ("max_share", float(rep.shares.max())), ("max_mode_std", float(np.nanmax(rep.mode_std)))]
        rows += [(f"share_{i}", float(s)) for i, s in enumerate(rep.shares)]
        rows.append(("kl_hist", kl_grid_2d(spec.log_density, x, GridSpec()).kl))
    if args.truth:
        t = aftn.load(args.truth)
        if t.shape != x.shape:
            raise ConfigError(f"truth shape {t.shape} != estimate shape {x.shape}")
        errs = [rmse(a, b) for a, b in zip(x, t)]
        rows += [("rmse_mean", float(np.mean(errs))), ("rmse_std", float(np.std(errs)))]
        if x.ndim == 3:
            ss = [ssim(b, a) for a, b in zip(x, t)]
            rows += [("ssim_mean", float(np.mean(ss))), ("ssim_std", float(np.std(ss)))]
    if not rows:
        raise ConfigError("nothing to evaluate: pass --reference, --toy or --truth")
    text = metric_rows_csv(rows, _args_hash(args), args.seed)
    out = _resolve(args.out_dir, args.out)
    _atomic_text(out, text)
    sys.stdout.write(text)
    return 0


def cmd_theory(args) -> int:
    from .analysis import check_projection_lemma, metric_rows_csv, ric_report, thm2_bound
    from .imaging import SparsityModel

    rows: list = []
    if args.theory == "bound":
        val = thm2_bound(args.delta, args.hnorm, args.eps, args.epsp)
        rows = [("thm2_bound", val)]
    elif args.theory == "ric":
        rng = np.random.default_rng(args.seed)
        if args.h_file:
            H = aftn.load(args.h_file)
        else:
            H = rng.standard_normal((args.m, args.n)) / np.sqrt(args.m)
        phi = np.eye(H.shape[1]) if args.phi == "identity" else \
            SparsityModel("discrete-gradient-2d", 1, (1, H.shape[1])).matrix()
        rep = ric_report(H, phi, args.k)
        rows = [(f"delta_{s}", d) for s, d in rep.deltas.items()]
        rows += [("h_norm", float(np.linalg.norm(H, 2))), ("rip_satisfied", int(rep.rip_satisfied))]
    elif args.theory == "projection-lemma":
        rng = np.random.default_rng(args.seed)
        x = rng.standard_normal((args.n, args.dim))
        res = check_projection_lemma(x, SparsityModel("identity", args.k, (args.dim,)))
        rows = [("w1", res.w1), ("mean_projection_distance", res.mean_projection_distance),
                ("equal", str(res.equal).lower())]
    elif args.theory == "iwae-order":
        from .flowcore import build_conditional_flow, build_flow
        from .imaging import MeasurementModel
        from .objectives import bound_ordering
        from .training import ToyMixtureSpec, make_toy2d

        spec = ToyMixtureSpec()
        streams = Streams(args.seed)
        ds = make_toy2d(spec, args.draws, streams)
        prior = build_flow(2, 2, 8, seed=args.seed)
        post = build_conditional_flow(2, 2, 2, 8, 4, seed=args.seed + 1)
        _perturb(prior.params, args.seed)
        _perturb(post.params, args.seed + 1)
        meas = MeasurementModel("identity", (2,), spec.sigma_n)
        est = bound_ordering(prior, post, meas, ds.measurements, args.M, streams)
        for M, (mean, se) in est.items():
            rows += [(f"L_{M}", mean), (f"se_{M}", se)]
        ms = sorted(est)
        ok = all(est[a][0] <= est[b][0] + 3 * np.hypot(est[a][1], est[b][1])
                 for a, b in zip(ms, ms[1:]))
        rows.append(("ordered", str(ok).lower()))
    text = metric_rows_csv(rows, _args_hash(args), args.seed)
    if args.out:
        _atomic_text(_resolve(args.out_dir, args.out), text)
    sys.stdout.write(text)
    return 0


def _perturb(params, seed: int, scale: float = 0.3) -> None:
    """Move a freshly built model away from the identity map (fixed test model)."""
    rng = np.random.default_rng(seed)
    for t in params.tensors():
        t.data = t.data + scale * rng.standard_normal(t.shape)

# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ambientflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ambientflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out-dir", default=None, help="base directory for relative outputs")
        sp.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a flow from a JSON config")
    t.add_argument("config")
    t.add_argument("--out-dir", default=None)
    t.add_argument("--steps", type=int, default=None, help="override training.steps")
    t.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a trained prior")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--out", default="samples.aftn")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("reconstruct", help="estimate objects from measurements")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--measurements", required=True, help="AFTN tensor [N, m]")
    r.add_argument("--measurement", default=None, help="JSON operator descriptor overriding training H")
    r.add_argument("--truth", default=None, help="AFTN ground truth for RMSE/SSIM")
    r.add_argument("--method", choices=["map", "ald", "posterior-net", "least-norm"], default="map")
    r.add_argument("--map-lambda", type=float, default=0.1)
    r.add_argument("--steps", type=int, default=300)
    r.add_argument("--lr", type=float, default=0.05)
    r.add_argument("--restarts", type=int, default=3)
    r.add_argument("--samples", type=int, default=40)
    r.add_argument("--levels", type=int, default=10)
    r.add_argument("--steps-per-level", type=int, default=50)
    r.add_argument("--sigma-max", type=float, default=None)
    r.add_argument("--sigma-min", type=float, default=0.01)
    r.add_argument("--eps", type=float, default=None)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="metric table for samples or estimates")
    common(e)
    e.add_argument("--samples", required=True)
    e.add_argument("--reference", default=None)
    e.add_argument("--truth", default=None)
    e.add_argument("--toy", action="store_true", help="octagon-mixture mode report and KL")
    e.add_argument("--radius", type=float, default=1.0)
    e.add_argument("--sigma-f", type=float, default=0.15)
    e.add_argument("--sigma-n", type=float, default=0.45)
    e.add_argument("--capture-radius", type=float, default=0.3)
    e.add_argument("--w1-count", type=int, default=512)
    e.add_argument("--out", default="metrics.csv")
    e.set_defaults(func=cmd_evaluate)

    th = sub.add_parser("theory", help="RIC, bound arithmetic, projection lemma, bound ordering")
    tsub = th.add_subparsers(dest="theory", required=True)
    b = tsub.add_parser("bound")
    common(b)
    b.add_argument("--delta", type=float, required=True)
    b.add_argument("--hnorm", type=float, required=True)
    b.add_argument("--eps", type=float, required=True)
    b.add_argument("--epsp", type=float, required=True)
    rc = tsub.add_parser("ric")
    common(rc)
    rc.add_argument("--h-file", default=None)
    rc.add_argument("--m", type=int, default=6)
    rc.add_argument("--n", type=int, default=12)
    rc.add_argument("--k", type=int, default=1)
    rc.add_argument("--phi", choices=["identity", "gradient"], default="identity")
    pl = tsub.add_parser("projection-lemma")
    common(pl)
    pl.add_argument("--n", type=int, default=64, help="number of points")
    pl.add_argument("--k", type=int, default=3)
    pl.add_argument("--dim", type=int, default=10)
    io_ = tsub.add_parser("iwae-order")
    common(io_)
    io_.add_argument("--M", type=int, nargs="+", default=[1, 4, 16])
    io_.add_argument("--draws", type=int, default=10_000)
    for sp in (b, rc, pl, io_):
        sp.add_argument("--out", default=None)
    th.set_defaults(func=cmd_theory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _accel.apply_thread_cap()
    try:
        return args.func(args)
    except AmbientFlowError as exc:
        sys.stderr.write(json.dumps(_error_payload(exc)) + "\n")
        return exc.exit_code
    except OSError as exc:
        err = IngestError(str(exc))
        sys.stderr.write(json.dumps(_error_payload(err)) + "\n")
        return err.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

import json

import numpy as np
import pytest

from ambientflow.cli import main, pgm_grid, svg_scatter
from ambientflow.diffengine import aftn

SMALL_TOY = {
    "mode": "ambient", "seed": 0,
    "dataset": {"kind": "toy2d-octagon", "size": 2000},
    "model": {"couplings": 2, "width": 8, "posterior_couplings": 2, "posterior_width": 8,
              "cond_features": 4},
    "objective": {"M": 2},
    "training": {"steps": 3, "batch_size": 16, "log_every": 1},
}
SMALL_IMG = {
    "mode": "ambient", "seed": 0,
    "dataset": {"kind": "piecewise-image", "size": 32, "shape": [4, 4], "jumps": 1},
    "measurement": {"kind": "subsampled-fourier", "sigma_n": 0.05, "ratio": 2},
    "model": {"couplings": 2, "width": 8, "posterior_couplings": 2, "posterior_width": 8,
              "cond_features": 4},
    "objective": {"M": 2},
    "training": {"steps": 2, "batch_size": 4, "log_every": 1},
}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    cfg = _write(d / "cfg.json", SMALL_TOY)
    assert main(["train", cfg, "--out-dir", str(d / "run"), "--quiet"]) == 0
    return d


@pytest.fixture(scope="module")
def img_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("img")
    cfg = _write(d / "cfg.json", SMALL_IMG)
    assert main(["train", cfg, "--out-dir", str(d / "run"), "--quiet"]) == 0
    return d


def test_dry_run(tmp_path, capsys):
    ok = _write(tmp_path / "ok.json", SMALL_TOY)
    assert main(["train", ok, "--dry-run"]) == 0
    assert json.loads(capsys.readouterr().out)["valid"] is True
    bad = _write(tmp_path / "bad.json", {"mode": "ambient"})
    assert main(["train", bad, "--dry-run"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and err["exit_code"] == 2
    assert not (tmp_path / "run").exists()


def test_missing_config_is_io_error(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope.json")]) == 4
    assert json.loads(capsys.readouterr().err)["error"] == "IngestError"


def test_train_outputs(toy_run):
    run = toy_run / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["metrics"]["steps"] == 3
    assert (run / "checkpoint" / "prior" / "model.json").exists()
    assert not (run / ".failed").exists()


def test_sample_is_reproducible(toy_run, tmp_path):
    ck = str(toy_run / "run" / "checkpoint")
    for name in ("a", "b"):
        assert main(["sample", "--checkpoint", ck, "--count", "50", "--seed", "4",
                     "--out-dir", str(tmp_path), "--out", f"{name}.aftn"]) == 0
    assert (tmp_path / "a.aftn").read_bytes() == (tmp_path / "b.aftn").read_bytes()
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert aftn.load(tmp_path / "a.aftn").shape == (50, 2)


def test_sample_images_write_pgm(img_run, tmp_path):
    ck = str(img_run / "run" / "checkpoint")
    assert main(["sample", "--checkpoint", ck, "--count", "9", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "samples.pgm").read_bytes().startswith(b"P5\n")


@pytest.mark.parametrize("method", ["map", "ald", "posterior-net", "least-norm"])
def test_reconstruct_methods(toy_run, tmp_path, method):
    ck = str(toy_run / "run" / "checkpoint")
    g = np.array([[1.0, 0.1], [-0.7, 0.7]])
    aftn.save(tmp_path / "g.aftn", g)
    aftn.save(tmp_path / "f.aftn", g * 0.9)
    args = ["reconstruct", "--checkpoint", ck, "--measurements", str(tmp_path / "g.aftn"),
            "--truth", str(tmp_path / "f.aftn"), "--method", method, "--out-dir", str(tmp_path / "o"),
            "--steps", "20", "--samples", "4", "--levels", "2", "--steps-per-level", "3"]
    assert main(args) == 0
    est = aftn.load(tmp_path / "o" / "estimates.aftn")
    assert est.shape == (2, 2)
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert all("rmse" in r for r in rep)
    first = (tmp_path / "o" / "report.csv").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "o" / "report.csv").read_bytes() == first


def test_reconstruct_images(img_run, tmp_path):
    ck = str(img_run / "run" / "checkpoint")
    aftn.save(tmp_path / "g.aftn", np.random.default_rng(0).standard_normal((2, 16)))
    assert main(["reconstruct", "--checkpoint", ck, "--measurements", str(tmp_path / "g.aftn"),
                 "--method", "map", "--steps", "10", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "estimates.pgm").exists()


def test_evaluate_toy(toy_run, tmp_path, capsys):
    ck = str(toy_run / "run" / "checkpoint")
    main(["sample", "--checkpoint", ck, "--count", "200", "--out-dir", str(tmp_path)])
    capsys.readouterr()
    assert main(["evaluate", "--samples", str(tmp_path / "samples.aftn"), "--toy",
                 "--reference", str(tmp_path / "samples.aftn"), "--out-dir", str(tmp_path)]) == 0
    text = (tmp_path / "metrics.csv").read_text()
    assert text.startswith("metric,value,config_hash,seed")
    assert "\nw1,0.0," in text and "capture" in text and "kl_hist" in text
    assert main(["evaluate", "--samples", str(tmp_path / "samples.aftn"), "--out-dir", str(tmp_path)]) == 2


def test_theory_bound_examples(capsys):
    assert main(["theory", "bound", "--delta", "0", "--hnorm", "1", "--eps", "0", "--epsp", "0"]) == 0
    assert "thm2_bound,0.0," in capsys.readouterr().out
    assert main(["theory", "bound", "--delta", "0", "--hnorm", "1", "--eps", "0.05", "--epsp", "0.05"]) == 0
    assert "thm2_bound,0.2," in capsys.readouterr().out
    assert main(["theory", "bound", "--delta", "1", "--hnorm", "1", "--eps", "0", "--epsp", "0"]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "DomainError"


def test_theory_projection_lemma(capsys):
    assert main(["theory", "projection-lemma", "--n", "64", "--k", "3", "--seed", "7"]) == 0
    assert "equal,true" in capsys.readouterr().out


def test_theory_ric_and_order(tmp_path, capsys):
    assert main(["theory", "ric", "--seed", "1", "--out-dir", str(tmp_path), "--out", "ric.csv"]) == 0
    first = (tmp_path / "ric.csv").read_bytes()
    assert main(["theory", "ric", "--seed", "1", "--out-dir", str(tmp_path), "--out", "ric.csv"]) == 0
    assert (tmp_path / "ric.csv").read_bytes() == first
    capsys.readouterr()
    assert main(["theory", "iwae-order", "--draws", "2000"]) == 0
    assert "ordered,true" in capsys.readouterr().out


def test_svg_and_pgm_helpers():
    svg = svg_scatter(np.array([[0.0, 0.0], [1.0, -1.0]]), lim=2.0, size=100)
    assert svg.count("<circle") == 2 and svg.startswith("<svg")
    pgm = pgm_grid(np.arange(8.0).reshape(2, 2, 2), cols=2, pad=1)
    assert pgm.startswith(b"P5\n7 4\n255\n") and len(pgm) == len(b"P5\n7 4\n255\n") + 28

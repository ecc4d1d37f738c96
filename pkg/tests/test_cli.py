import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import torch
from PIL import Image

from vidres import cli, grids, metrics, runs
from vidres.math_core import RandomSource
from vidres.metrics import REPORT_SCHEMA, probe_cache_path, train_probe
from vidres.synth_data import dataset_in_memory

SMALL = {"width": 4, "disc_width": 4, "rnn_hidden": 16, "phi_dim": 16, "nn_delta_hidden": 8, "batch_size": 4}


def digest(path: Path) -> str:
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "toy"
    assert cli.main(["make-dataset", "--out", str(out), "--num-videos", "16", "--frames", "8", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def train(dataset, small_config, out, model="rjgan", *extra):
    argv = ["train", "--model", model, "--data", str(dataset), "--out", str(out), "--config", str(small_config),
            "--iterations", "4", "--ckpt-every", "2", *extra]
    return cli.main(argv)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset, small_config):
    out = {}
    for kind in ("rjgan", "rjvae", "rmocogan", "baseline-image", "rjgan-chain"):
        run = tmp_path_factory.mktemp("runs") / kind
        assert train(dataset, small_config, run, kind) == 0
        out[kind] = run
    return out


def test_make_dataset_rebuilds_and_refuses_foreign_dirs(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["make-dataset", "--out", str(out), "--num-videos", "4", "--frames", "3"]) == 0
    first = digest(out)
    assert cli.main(["make-dataset", "--out", str(out), "--num-videos", "4", "--frames", "3"]) == 0
    assert digest(out) == first
    other = tmp_path / "other"
    other.mkdir()
    (other / "notes.txt").write_text("keep me")
    assert cli.main(["make-dataset", "--out", str(other)]) == 2
    assert (other / "notes.txt").exists()
    assert cli.main(["make-dataset", "--out", str(tmp_path / "m"), "--num-videos", "4", "--disintegrate", "0.5"]) == 0
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert sum(e["is_image"] for e in manifest["videos"]) == 16


def test_run_layout(trained):
    run = trained["rjgan"]
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["width"] == 4 and cfg["iterations"] == 4
    header, losses = runs.read_losses(run)
    assert header[0] == "step" and "image_real_repeat" in header and losses.shape[0] == 4
    names = sorted(p.name for p in (run / "checkpoints").iterdir())
    assert names == ["step_0000002", "step_0000004"]
    assert (run / "LATEST").read_text().strip() == "step_0000004"


def test_train_is_byte_identical(tmp_path, dataset, small_config):
    for name in ("a", "b"):
        assert train(dataset, small_config, tmp_path / name) == 0
    assert digest(tmp_path / "a" / "checkpoints") == digest(tmp_path / "b" / "checkpoints")
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, dataset, small_config, trained):
    run = tmp_path / "r"
    assert train(dataset, small_config, run, "rjgan", "--stop-after", "3") == 0
    assert (run / "LATEST").read_text().strip() == "step_0000002"
    assert cli.main(["train", "--data", str(dataset), "--out", str(run), "--resume", "--ckpt-every", "2"]) == 0
    ref = trained["rjgan"]
    assert digest(run / "checkpoints" / "step_0000004") == digest(ref / "checkpoints" / "step_0000004")
    assert (run / "loss.csv").read_bytes() == (ref / "loss.csv").read_bytes()


def test_train_refusals(tmp_path, dataset, small_config, trained):
    assert train(dataset, small_config, trained["rjgan"]) == 2  # non-empty run dir
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "none"), "--resume"]) == 2
    assert train(tmp_path / "missing", small_config, tmp_path / "x") == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "y"), "--config", str(bad)]) == 2
    assert train(dataset, small_config, tmp_path / "z", "rjgan", "--clip-len", "4") == 2
    other = tmp_path / "other"
    cli.main(["make-dataset", "--out", str(other), "--num-videos", "16", "--frames", "8", "--seed", "4"])
    assert cli.main(["train", "--data", str(other), "--out", str(trained["rjgan"]), "--resume"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--model", "nope", "--data", "x", "--out", "y"])
    assert exc.value.code == 2


def test_pretrain_from_copies_image_pair(tmp_path, dataset, small_config, trained):
    run = tmp_path / "p"
    assert train(dataset, small_config, run, "rjgan", "--iterations", "0", "--pretrain-from",
                 str(trained["baseline-image"])) == 0
    a = runs.load_model(run).model
    b = runs.load_model(trained["baseline-image"]).model
    for k, v in b.g_image.state_dict().items():
        assert torch.equal(v, a.g_image.state_dict()[k])
    assert train(dataset, small_config, tmp_path / "q", "rjgan", "--pretrain-from", str(tmp_path / "nothing")) == 2


def test_paper_preset_values():
    a = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o", "--preset", "paper"])
    cfg = cli._config_from_flags(a)
    assert (cfg.d_z, cfg.d_c, cfg.d_m, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay) == (60, 50, 10, 2e-4, 0.5, 0.999, 1e-5)
    assert (cfg.frame_size, cfg.batch_size, cfg.nn_delta_hidden) == (64, 32, 50)
    a = cli.build_parser().parse_args(["train", "--model", "rjvae", "--data", "d", "--out", "o", "--preset", "paper"])
    cfg = cli._config_from_flags(a)
    assert (cfg.d_z, cfg.lr, cfg.beta1, cfg.weight_decay, cfg.batch_size) == (64, 5e-4, 0.9, 0.0, 128)


@pytest.mark.parametrize("kind", ["rjgan", "rjvae", "rmocogan", "baseline-image", "rjgan-chain"])
def test_sample_grid_shape_and_determinism(tmp_path, trained, kind):
    T = 1 if kind == "baseline-image" else 8
    for name in ("a.png", "b.png"):
        assert cli.main(["sample", "--checkpoint", str(trained[kind]), "--out", str(tmp_path / name),
                         "--num", "3", "--seed", "5", "--summary-frames"]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    img = Image.open(tmp_path / "a.png")
    assert img.size == ((T + 1) * 32, 3 * 32) and img.mode == "RGB"


def test_sample_errors(tmp_path, trained):
    assert cli.main(["sample", "--checkpoint", str(tmp_path), "--out", str(tmp_path / "x.png")]) == 2
    assert cli.main(["sample", "--checkpoint", str(trained["rjgan"]), "--out", str(tmp_path / "x.png"),
                     "--num", "0"]) == 2
    ck = runs.resolve_checkpoint(trained["rjgan"])
    broken = tmp_path / "broken"
    import shutil

    shutil.copytree(ck, broken)
    victim = sorted(broken.glob("*.bin"))[0]
    victim.write_bytes(victim.read_bytes()[:-4])
    assert cli.main(["sample", "--checkpoint", str(broken), "--out", str(tmp_path / "y.png")]) == 1


def test_interpolation_endpoints_and_grid(tmp_path, trained):
    lm = runs.load_model(trained["rjgan"])
    mu0, mu1 = grids.endpoint_from_seed(lm.cfg, 1), grids.endpoint_from_seed(lm.cfg, 2)
    codes = grids.interpolation_codes(mu0, mu1, 5)
    assert torch.equal(codes[0], mu0) and torch.equal(codes[-1], mu1)
    rows = grids.interpolation_rows(lm.model, lm.cfg, mu0, mu1, 5, seed=3)
    assert rows.shape == (5, 9, 3, 32, 32)
    direct = grids.sample_with_code(lm.model, lm.cfg, mu0[None], RandomSource(3).spawn("motion"))
    assert torch.equal(rows[0, 0], direct.summaries[0]) and torch.equal(rows[0, 1:], direct.videos[0])
    out = tmp_path / "i.png"
    assert cli.main(["interpolate", "--checkpoint", str(trained["rjgan"]), "--out", str(out), "--steps", "5",
                     "--seed-a", "1", "--seed-b", "2", "--seed", "3"]) == 0
    assert np.array_equal(np.asarray(Image.open(out)), grids.tile_rows(rows))
    mu_file = tmp_path / "mu.json"
    mu_file.write_text(json.dumps([mu0.tolist(), mu1.tolist()]))
    out2 = tmp_path / "j.png"
    assert cli.main(["interpolate", "--checkpoint", str(trained["rjgan"]), "--out", str(out2), "--steps", "5",
                     "--mu-file", str(mu_file), "--seed", "3"]) == 0
    assert out.read_bytes() == out2.read_bytes()
    assert cli.main(["interpolate", "--checkpoint", str(trained["rjgan"]), "--out", str(out), "--steps", "5"]) == 2
    mu_file.write_text(json.dumps([[0.0], [1.0]]))
    assert cli.main(["interpolate", "--checkpoint", str(trained["rjgan"]), "--out", str(out),
                     "--mu-file", str(mu_file)]) == 2


@pytest.fixture(scope="module")
def probe_dir(tmp_path_factory):
    # pre-seed the cache with quick probes so evaluate exercises its full path without long training
    d = tmp_path_factory.mktemp("probes")
    data = dataset_in_memory(32, 8, 32, 0)
    for kind, label in (("video_3d", "action"), ("image_2d", "identity")):
        train_probe(data, kind, label, RandomSource(0), steps=5, width=4).save(probe_cache_path(d, kind))
    return d


@pytest.mark.parametrize("metric,kind", [("fvd", "rjgan"), ("fid", "rmocogan"), ("is", "rjvae"),
                                         ("is", "baseline-image")])
def test_evaluate_report(tmp_path, trained, probe_dir, metric, kind, capsys):
    out = tmp_path / "r.json"
    argv = ["evaluate", "--checkpoint", str(trained[kind]), "--metric", metric, "--probe-dir", str(probe_dir),
            "--num", "16", "--batches", "2", "--batch-size", "8", "--out", str(out)]
    assert cli.main(argv) == 0
    report = json.loads(out.read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["probe_heldout_accuracy"] is not None
    assert json.loads(capsys.readouterr().out) == report
    assert cli.main(argv) == 0
    assert json.loads(out.read_text()) == report


def test_evaluate_errors(trained, probe_dir, dataset):
    base = ["evaluate", "--probe-dir", str(probe_dir)]
    assert cli.main(base + ["--checkpoint", str(trained["baseline-image"]), "--metric", "fvd", "--num", "8"]) == 2
    assert cli.main(base + ["--checkpoint", str(trained["rjgan"]), "--metric", "fvd", "--num", "64",
                            "--data", str(dataset)]) == 2
    assert cli.main(base + ["--checkpoint", str(trained["rjgan"]), "--metric", "fvd", "--num", "1"]) == 2


def test_experiment_unknown_name(dataset, tmp_path):
    assert cli.main(["experiment", "nothing", "--data", str(dataset), "--out", str(tmp_path)]) == 2

"""``vidres`` command line: make-dataset, train, sample, interpolate, evaluate, experiment."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import jsonschema
import torch

from . import experiments, grids, metrics, runs
from .config import MODEL_KINDS, ConfigError, ModelConfig, preset
from .math_core import ContractError, RandomSource
from .synth_data import build_dataset, dataset_in_memory, disintegrate, load_dataset

log = logging.getLogger("vidres")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, bad config or missing inputs: exit code 2."""


# ---------------------------------------------------------------------------
# make-dataset
# ---------------------------------------------------------------------------


def cmd_make_dataset(a) -> int:
    out = Path(a.out)
    if out.exists() and any(out.iterdir()):
        if not (out / "manifest.json").exists():
            raise UsageError(f"{out} is not empty and holds no dataset; refusing to overwrite")
        shutil.rmtree(out)
    manifest = build_dataset(a.num_videos, a.frames, a.size, a.seed, out)
    if a.disintegrate is not None:
        manifest = disintegrate(manifest, a.disintegrate, RandomSource(a.seed).spawn("disintegrate"))
    n_img = len(manifest.image_entries())
    print(f"wrote {len(manifest.videos)} entries ({len(manifest.videos) - n_img} videos, {n_img} images) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

# flag name -> ModelConfig field
OVERRIDES = {
    "iterations": "iterations", "seed": "seed", "batch_size": "batch_size", "lr": "lr",
    "d_z": "d_z", "d_c": "d_c", "d_m": "d_m", "width": "width", "disc_width": "disc_width",
    "clip_len": "clip_len", "summary_term_period": "summary_term_period",
}


def _config_from_flags(a) -> ModelConfig:
    cfg = preset(a.preset, a.model)
    if a.config:
        try:
            raw = json.loads(Path(a.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {a.config}: {exc}") from exc
        raw.setdefault("kind", a.model)
        if raw["kind"] != a.model:
            raise UsageError(f"config kind {raw['kind']!r} disagrees with --model {a.model!r}")
        cfg = ModelConfig.from_dict({**cfg.to_dict(), **raw})
    cfg = cfg.override(**{field: getattr(a, flag) for flag, field in OVERRIDES.items()})
    if a.eq1_deduplicate:
        cfg = cfg.override(eq1_deduplicate=True)
    try:
        return cfg.validate()
    except TypeError as exc:
        raise UsageError(f"bad config value: {exc}") from exc


def _load_data(path: str):
    if not (Path(path) / "manifest.json").exists():
        raise UsageError(f"no dataset at {path} (run make-dataset first)")
    return load_dataset(path)


def cmd_train(a) -> int:
    run = Path(a.out)
    if a.resume:
        if not (run / runs.CONFIG_FILE).exists():
            raise UsageError(f"nothing to resume in {run}")
        cfg = ModelConfig.from_dict(json.loads((run / runs.CONFIG_FILE).read_text())).validate()
    else:
        cfg = _config_from_flags(a)
    if a.pretrain_from is not None:
        try:
            runs.resolve_checkpoint(a.pretrain_from)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
    data = _load_data(a.data)
    runs.train_run(run, data, cfg, a.ckpt_every, a.resume, a.pretrain_from, a.stop_after)
    print(f"trained {cfg.kind} in {run} (latest checkpoint {runs.resolve_checkpoint(run).name})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample / interpolate
# ---------------------------------------------------------------------------


def _load_checkpoint(path: str) -> runs.LoadedModel:
    try:
        return runs.load_model(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def cmd_sample(a) -> int:
    lm = _load_checkpoint(a.checkpoint)
    if a.num < 1:
        raise UsageError("--num must be >= 1")
    samples = grids.draw_samples(lm.model, lm.cfg, a.num, a.seed)
    grids.save_png(grids.sample_grid(samples, a.summary_frames), a.out)
    print(f"wrote {a.num} strips to {a.out}")
    return EXIT_OK


def _endpoint(cfg: ModelConfig, seed: int | None, explicit: list[float] | None) -> torch.Tensor:
    if explicit is not None:
        v = torch.tensor(explicit, dtype=torch.float32)
        if v.shape != (grids.latent_dim(cfg),):
            raise UsageError(f"endpoint must have {grids.latent_dim(cfg)} values, got {len(explicit)}")
        return v
    return grids.endpoint_from_seed(cfg, seed)


def cmd_interpolate(a) -> int:
    lm = _load_checkpoint(a.checkpoint)
    mu0, mu1 = None, None
    if a.mu_file:
        ends = json.loads(Path(a.mu_file).read_text())
        if not (isinstance(ends, list) and len(ends) == 2):
            raise UsageError("--mu-file must hold a JSON list of two vectors")
        mu0, mu1 = ends
    elif a.seed_a is None or a.seed_b is None:
        raise UsageError("give --seed-a and --seed-b, or --mu-file")
    if a.steps < 2:
        raise UsageError("--steps must be >= 2")
    rows = grids.interpolation_rows(lm.model, lm.cfg, _endpoint(lm.cfg, a.seed_a, mu0),
                                    _endpoint(lm.cfg, a.seed_b, mu1), a.steps, a.seed)
    grids.save_png(grids.tile_rows(rows), a.out)
    print(f"wrote {rows.shape[0]} x {rows.shape[1]} interpolation grid to {a.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(a) -> int:
    lm = _load_checkpoint(a.checkpoint)
    cfg, model = lm.cfg, lm.model
    # default cache sits in the run directory, beside (not inside) the checkpoints
    probe_dir = a.probe_dir or str(lm.path.parent.parent / "probes")
    probe_kind = "image_2d" if a.metric in ("is", "fid") else "video_3d"
    probe = metrics.standard_probe(probe_kind, a.probe_seed, cfg.frame_size, cfg.T, cfg.clip_len, probe_dir)
    probe_path = str(Path(probe_dir).resolve())
    rng = RandomSource(a.seed).spawn("evaluate")
    if a.metric == "is":
        n = a.batches * a.batch_size
        if n < 1:
            raise UsageError("--batches and --batch-size must be >= 1")
        with torch.no_grad():
            images = grids.sample_with_code(model, cfg, grids.sample_codes(cfg, n, rng.spawn("codes")),
                                            rng.spawn("motion")).summaries
        mean, std = metrics.inception_score(images, probe, a.batches, a.batch_size)
        report = metrics.metric_report("inception_score", mean, std, n, probe_path, a.seed,
                                       num_batches=a.batches, batch_size=a.batch_size, source="summary_frames")
    else:
        if a.metric == "fvd" and cfg.kind == "baseline-image":
            raise UsageError("fvd needs a video model")
        real = _real_set(a, cfg)
        n = a.num
        have = real.num_videos if a.metric == "fvd" else len(real.all_frames()[0])
        if n < 2 or have < n:
            raise UsageError(f"need {n} >= 2 real samples, the reference set has {have}")
        with torch.no_grad():
            s = grids.sample_with_code(model, cfg, grids.sample_codes(cfg, n, rng.spawn("codes")), rng.spawn("motion"))
        if a.metric == "fvd":
            value = metrics.fvd_analog(real.videos[:n], s.videos, probe)
        else:
            value = metrics.frechet_image_distance(real.all_frames()[0][:n], s.summaries, probe)
        report = metrics.metric_report("fvd_analog" if a.metric == "fvd" else "frechet_image_distance",
                                       value, None, n, probe_path, a.seed,
                                       feature_layer="penultimate", feature_dim=probe.feature_dim)
    report["probe_heldout_accuracy"] = probe.meta.get("heldout_accuracy")
    jsonschema.validate(report, metrics.REPORT_SCHEMA)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _real_set(a, cfg: ModelConfig):
    if a.data:
        return _load_data(a.data)
    # a fresh draw from the generator family, disjoint from every training seed used by make-dataset
    return dataset_in_memory(a.num, cfg.T, cfg.frame_size, a.real_seed)


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def cmd_experiment(a) -> int:
    if a.name not in experiments.EXPERIMENTS:
        raise UsageError(f"unknown experiment {a.name!r}; choose from {experiments.EXPERIMENTS}")
    data = _load_data(a.data)
    out = Path(a.out)
    seeds = tuple(a.seeds)
    probe_dir = a.probe_dir or str(out / "probes")
    kw = {"seeds": seeds, "iterations": a.iterations, "probe_dir": probe_dir}
    if a.name == "pretrain-compare":
        report = experiments.pretrain_compare(data, pretrain_steps=a.pretrain_steps, eval_num=a.num, **kw)
    elif a.name == "image-bench":
        report = experiments.image_bench(data, num_batches=a.batches, batch_size=a.batch_size, **kw)
    else:
        report = experiments.mixed_train(data, eval_num=a.num, **kw)
    js, txt = experiments.write_report(report, out)
    sys.stdout.write(txt.read_text())
    print(f"report: {js}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidres", description="Residual latent video models at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("make-dataset", help="render the procedural sprite dataset")
    m.add_argument("--out", required=True)
    m.add_argument("--num-videos", type=int, default=64)
    m.add_argument("--frames", type=int, default=8)
    m.add_argument("--size", type=int, default=32)
    m.add_argument("--seed", type=int, default=7)
    m.add_argument("--disintegrate", type=float, default=None, metavar="FRACTION",
                   help="split this fraction of the videos into standalone images")
    m.set_defaults(func=cmd_make_dataset)

    t = sub.add_parser("train", help="train a model into a run directory")
    t.add_argument("--model", choices=MODEL_KINDS, default="rjgan")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--preset", choices=("desk", "paper"), default="desk")
    t.add_argument("--config", help="JSON file with ModelConfig keys; flags override it")
    t.add_argument("--ckpt-every", type=int, default=100)
    t.add_argument("--resume", action="store_true", help="continue from the run's latest checkpoint")
    t.add_argument("--pretrain-from", help="run or checkpoint whose G_I/D_I initialise this model")
    t.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    for flag, typ in (("iterations", int), ("seed", int), ("batch_size", int), ("lr", float), ("d_z", int),
                      ("d_c", int), ("d_m", int), ("width", int), ("disc_width", int), ("clip_len", int),
                      ("summary_term_period", int)):
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    t.add_argument("--eq1-deduplicate", action="store_true", help="count the real-image term once")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write a PNG grid of generated videos")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--num", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--summary-frames", action="store_true", help="prepend the summary frame to each strip")
    s.set_defaults(func=cmd_sample)

    i = sub.add_parser("interpolate", help="interpolate between two summary vectors")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--steps", type=int, default=8)
    i.add_argument("--seed-a", type=int)
    i.add_argument("--seed-b", type=int)
    i.add_argument("--mu-file", help="JSON list with the two endpoint vectors")
    i.add_argument("--seed", type=int, default=0, help="motion noise shared by all rows")
    i.set_defaults(func=cmd_interpolate)

    e = sub.add_parser("evaluate", help="compute a metric report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--metric", choices=("is", "fvd", "fid"), required=True)
    e.add_argument("--num", type=int, default=256, help="samples per side for Frechet metrics")
    e.add_argument("--batches", type=int, default=10)
    e.add_argument("--batch-size", type=int, default=128)
    e.add_argument("--data", help="reference dataset; default is a fresh generated draw")
    e.add_argument("--real-seed", type=int, default=424242)
    e.add_argument("--probe-dir", help="probe cache (default: <checkpoint>/probes)")
    e.add_argument("--probe-seed", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="report path")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("experiment", help="run a multi-seed comparison")
    x.add_argument("name", help=" | ".join(experiments.EXPERIMENTS))
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--seeds", type=int, nargs="+", default=list(experiments.DEFAULT_SEEDS))
    x.add_argument("--iterations", type=int, default=300)
    x.add_argument("--pretrain-steps", type=int, default=500)
    x.add_argument("--num", type=int, default=256)
    x.add_argument("--batches", type=int, default=10)
    x.add_argument("--batch-size", type=int, default=128)
    x.add_argument("--probe-dir")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except (UsageError, ConfigError, ContractError, jsonschema.ValidationError) as exc:
        print(f"vidres {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"vidres {a.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

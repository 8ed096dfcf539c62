"""Command-line entry point: per-stage subcommands plus ``pipeline run|synth|ablate``."""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .dehaze import DehazeParams, dehaze_detailed
from .enhance import (
    EnhanceError, EnhancePrompt, GateConfig, HttpClient, MockClient, ReplayClient, RestoreStageKind, StageError,
    enhance_image, restore_stage,
)
from .ensemble import EnsembleConfig, EnsembleError, average_views, run_ensemble, variance_map
from .image import DatasetError, ImageIOError, load_dataset, load_image, save_dataset, save_gray, save_image
from .metrics import evaluate, markdown_table, write_csv
from .pipeline.config import PRESETS, ConfigError, load_config
from .pipeline.run import (
    ABLATABLE, EXIT_CACHE, EXIT_CONFIG, EXIT_STAGE, CacheCorruption, StageFailure, ablate, file_sha256, run_pipeline,
)
from .splat.optim import OptimConfig, OptimizationError, optimize
from .splat.render import render
from .splat.scene import CheckpointError, load_checkpoint, save_checkpoint

IMAGE_SUFFIXES = (".png", ".ppm")


def _color_enabled() -> bool:
    return "NO_COLOR" not in os.environ and sys.stdout.isatty()


def _say(text: str, fg: str | None = None, err: bool = False) -> None:
    click.echo(click.style(text, fg=fg) if fg and _color_enabled() else text, err=err)


def _inputs(src: Path, dst: Path) -> list[tuple[Path, Path]]:
    """Pair input files with output paths; ``src`` may be a file or a directory."""
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ConfigError(f"{src}: no .png or .ppm images")
        dst.mkdir(parents=True, exist_ok=True)
        return [(f, dst / f"{f.stem}.png") for f in files]
    if not src.exists():
        raise ConfigError(f"{src}: no such file or directory")
    if dst.suffix.lower() not in IMAGE_SUFFIXES:
        dst.mkdir(parents=True, exist_ok=True)
        dst = dst / f"{src.stem}.png"
    dst.parent.mkdir(parents=True, exist_ok=True)
    return [(src, dst)]


def _optim_cfg(iterations: int, budget: int, seed: int, lam: float) -> OptimConfig:
    return OptimConfig(iterations=iterations, budget=budget, seed=seed, loss_lambda=lam)


@click.group()
@click.version_option(__version__, prog_name="smokeview")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool):
    """Novel view synthesis from smoke-degraded images."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@cli.command("dehaze")
@click.option("--in", "src", required=True, type=click.Path(path_type=Path))
@click.option("--out", "dst", required=True, type=click.Path(path_type=Path))
@click.option("--patch-radius", default=7, show_default=True, type=int)
@click.option("--omega", default=0.95, show_default=True, type=float)
@click.option("--airlight-fraction", default=0.001, show_default=True, type=float)
@click.option("--t-floor", default=0.1, show_default=True, type=float)
@click.option("--guided-radius", default=30, show_default=True, type=int)
@click.option("--guided-eps", default=1e-3, show_default=True, type=float)
@click.option("--dump-transmission", type=click.Path(path_type=Path), help="Directory for refined transmission maps.")
def dehaze_cmd(src, dst, patch_radius, omega, airlight_fraction, t_floor, guided_radius, guided_eps, dump_transmission):
    """Dark-channel dehazing of one image or a directory of images."""
    try:
        params = DehazeParams(patch_radius, omega, airlight_fraction, t_floor, guided_radius, guided_eps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if dump_transmission is not None:
        dump_transmission.mkdir(parents=True, exist_ok=True)
    for f, out in _inputs(src, dst):
        res = dehaze_detailed(load_image(f), params)
        save_image(res.image, out)
        if dump_transmission is not None:
            save_gray(res.transmission.t, dump_transmission / f"{f.stem}.png")
        _say(f"{f.name}: airlight {tuple(round(float(c), 4) for c in res.airlight.a)} -> {out}")


@cli.command("restore")
@click.option("--in", "src", required=True, type=click.Path(path_type=Path))
@click.option("--out", "dst", required=True, type=click.Path(path_type=Path))
@click.option("--kind", type=click.Choice([k.value for k in RestoreStageKind]), default="gray_world_stretch",
              show_default=True)
@click.option("--command", "command", default=None, help="Program for external_command (PNG stdin -> PNG stdout).")
def restore_cmd(src, dst, kind, command):
    """Preliminary restoration with a classical stand-in or an external program."""
    import shlex

    argv = shlex.split(command) if command else None
    for f, out in _inputs(src, dst):
        save_image(restore_stage(load_image(f), kind, argv, f.name), out)
        _say(f"{f.name} -> {out}")


@cli.command("enhance")
@click.option("--in", "src", required=True, type=click.Path(path_type=Path))
@click.option("--out", "dst", required=True, type=click.Path(path_type=Path))
@click.option("--mock", is_flag=True, help="Use the offline tone-map mock instead of the service.")
@click.option("--gamma", default=1.0, show_default=True, type=float)
@click.option("--gain", default=1.0, show_default=True, type=float)
@click.option("--prompt", default=None, help="Override the default structure-preserving prompt.")
@click.option("--model", default=None, help="Model name sent to the service.")
@click.option("--ssim-threshold", default=0.6, show_default=True, type=float)
@click.option("--replay-dir", type=click.Path(path_type=Path), default=None,
              help="Serve and record responses keyed by request hash.")
def enhance_cmd(src, dst, mock, gamma, gain, prompt, model, ssim_threshold, replay_dir):
    """Structure-gated enhancement via the external service or the mock."""
    prompt = EnhancePrompt(prompt) if prompt else EnhancePrompt()
    if mock:
        client = MockClient(gamma, gain)
    elif replay_dir is None:
        client = HttpClient(model=model)
    else:
        client = None
    if replay_dir is not None:
        client = ReplayClient(replay_dir, inner=client, **({"model": model} if model else {}))
    gate = GateConfig(ssim_threshold)
    for f, out in _inputs(src, dst):
        save_image(enhance_image(load_image(f), prompt, client, gate, f.name), out)
        _say(f"{f.name} -> {out}")


@cli.command("optimize")
@click.option("--data", required=True, type=click.Path(path_type=Path), help="Dataset directory with cameras.json.")
@click.option("--checkpoint", required=True, type=click.Path(path_type=Path), help="Where to write the scene.")
@click.option("--iterations", default=2000, show_default=True, type=int)
@click.option("--budget", default=200, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--loss-lambda", default=0.2, show_default=True, type=float)
def optimize_cmd(data, checkpoint, iterations, budget, seed, loss_lambda):
    """Fit a fixed-budget Gaussian scene to the training views."""
    ds = load_dataset(data)
    scene = optimize(ds.training_views, _optim_cfg(iterations, budget, seed, loss_lambda))
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(scene, checkpoint, iterations)
    _say(f"wrote {checkpoint} ({len(scene)} Gaussians)")


@cli.command("render")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--data", required=True, type=click.Path(path_type=Path), help="Dataset whose cameras to render.")
@click.option("--split", type=click.Choice(["test", "train"]), default="test", show_default=True)
@click.option("--out", "dst", required=True, type=click.Path(path_type=Path))
def render_cmd(checkpoint, data, split, dst):
    """Render a checkpointed scene from dataset cameras to view_<j>.png."""
    scene, _ = load_checkpoint(checkpoint)
    ds = load_dataset(data)
    cams = ds.target_views if split == "test" else [c for _, c in ds.training_views]
    dst.mkdir(parents=True, exist_ok=True)
    for j, cam in enumerate(cams):
        save_image(render(scene, cam), dst / f"view_{j:04d}.png")
    _say(f"rendered {len(cams)} views to {dst}")


@cli.command("ensemble")
@click.option("--data", required=True, type=click.Path(path_type=Path), help="Dataset directory with cameras.json.")
@click.option("--runs", default=8, show_default=True, type=int)
@click.option("--base-seed", default=0, show_default=True, type=int)
@click.option("--out", "dst", required=True, type=click.Path(path_type=Path))
@click.option("--iterations", default=2000, show_default=True, type=int)
@click.option("--budget", default=200, show_default=True, type=int)
@click.option("--loss-lambda", default=0.2, show_default=True, type=float)
@click.option("--workers", default=1, show_default=True, type=int)
def ensemble_cmd(data, runs, base_seed, dst, iterations, budget, loss_lambda, workers):
    """Seeded independent runs, rendered at the test cameras and averaged."""
    ds = load_dataset(data)
    try:
        ens = EnsembleConfig(runs, base_seed, workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    opt = _optim_cfg(iterations, budget, base_seed, loss_lambda)
    rs = run_ensemble(ds.training_views, opt, ens, ds.target_views)
    files = []
    for k, row in enumerate(rs.views):
        for j, img in enumerate(row):
            path = dst / f"run_{k}" / f"view_{j:04d}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_image(img, path)
            files.append(path)
    (dst / "avg").mkdir(parents=True, exist_ok=True)
    for j, img in enumerate(average_views(rs)):
        save_image(img, dst / "avg" / f"view_{j:04d}.png")
        files.append(dst / "avg" / f"view_{j:04d}.png")
    maxima = {}
    if rs.n_runs >= 2:
        (dst / "var").mkdir(parents=True, exist_ok=True)
        for j in range(rs.n_views):
            vmap, peak = variance_map(rs, j)
            save_gray(vmap, dst / "var" / f"view_{j:04d}.png")
            files.append(dst / "var" / f"view_{j:04d}.png")
            maxima[f"view_{j:04d}"] = peak
        (dst / "var" / "variance_max.json").write_text(json.dumps(maxima, indent=2, sort_keys=True))
    manifest = {
        "tool_version": __version__,
        "seeds": rs.seeds,
        "iterations": iterations,
        "budget": budget,
        "loss_lambda": loss_lambda,
        "averaging": "float display space, Neumaier-compensated, run index ascending",
        "variance_max": maxima,
        "files": {str(p.relative_to(dst)): file_sha256(p) for p in files},
    }
    tmp = dst / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, dst / "manifest.json")
    _say(f"{rs.n_runs} runs x {rs.n_views} views written to {dst}")


@cli.command("eval")
@click.option("--rendered", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--gt", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "dst", required=True, type=click.Path(path_type=Path), help="CSV path; a .md table is written beside it.")
@click.option("--scene", default=None, help="Scene label (defaults to the ground-truth directory name).")
@click.option("--method", default="smokeview", show_default=True)
def eval_cmd(rendered, gt, dst, scene, method):
    """PSNR/SSIM of rendered views against ground truth, matched by file name."""
    gt_files = sorted(p for p in gt.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    by_stem = {p.stem: p for p in rendered.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    missing = [p.name for p in gt_files if p.stem not in by_stem]
    if not gt_files or missing:
        raise ConfigError(f"rendered views missing for ground truth: {', '.join(missing) or '(none found)'}")
    scene = scene or gt.resolve().name
    report = evaluate([load_image(by_stem[p.stem]) for p in gt_files], [load_image(p) for p in gt_files],
                      [(scene, p.stem) for p in gt_files])
    dst.parent.mkdir(parents=True, exist_ok=True)
    write_csv(report, dst)
    table = markdown_table(report, method)
    dst.with_suffix(".md").write_text(table)
    click.echo(table, nl=False)


@cli.group("pipeline")
def pipeline_group():
    """End-to-end runs, synthetic data, and ablations."""


def _load(config: Path, preset: str | None):
    cfg = load_config(config)
    return cfg.with_preset(preset) if preset else cfg


@pipeline_group.command("run")
@click.option("--config", "config", required=True, type=click.Path(path_type=Path))
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
              help="Override iteration and run counts with a preset.")
@click.option("--mock-enhance", is_flag=True, help="Force the offline enhancement mock.")
def pipeline_run(config, preset, mock_enhance):
    """Run restore -> dehaze -> enhance -> ensemble -> average -> eval."""
    manifest = run_pipeline(_load(config, preset), force_mock=mock_enhance)
    for s in manifest.stages:
        _say(f"{s.name:8s} {s.status:9s} {s.seconds:8.2f}s", fg="green" if s.status == "cached" else None)
    m = manifest.metrics
    if m:
        _say(f"mean PSNR {m['mean_psnr']} dB, mean SSIM {m['mean_ssim']}")
    _say(f"manifest digest {manifest.digest()}")


@pipeline_group.command("synth")
@click.option("--spec", "spec_path", type=click.Path(path_type=Path), default=None,
              help="TOML scene spec (defaults used when omitted).")
@click.option("--out", "dst", required=True, type=click.Path(path_type=Path))
def pipeline_synth(spec_path, dst):
    """Write clean and smoked datasets of a deterministic synthetic scene."""
    from .pipeline.config import tomllib
    from .pipeline.synth import SynthSceneSpec, synth_scene

    doc = {}
    if spec_path is not None:
        try:
            doc = tomllib.loads(spec_path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"{spec_path}: no such spec file") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{spec_path}: {exc}") from exc
    from pydantic import ValidationError

    try:
        spec = SynthSceneSpec.model_validate(doc.get("scene", doc))
        sc = synth_scene(spec)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    save_dataset(sc.clean, dst / "clean")
    save_dataset(sc.smoked, dst / "smoked")
    np.savez(dst / "depth.npz", train=np.stack(sc.train_depth), test=np.stack(sc.test_depth))
    (dst / "spec.json").write_text(json.dumps(spec.model_dump(mode="json"), indent=2, sort_keys=True))
    _say(f"wrote {dst / 'clean'} and {dst / 'smoked'}")


@pipeline_group.command("ablate")
@click.option("--config", "config", required=True, type=click.Path(path_type=Path))
@click.option("--stage", required=True, type=click.Choice(ABLATABLE))
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--mock-enhance", is_flag=True)
def pipeline_ablate(config, stage, preset, mock_enhance):
    """Run with and without one stage on identical seeds and report deltas."""
    result = ablate(_load(config, preset), stage, force_mock=mock_enhance)
    click.echo(result.markdown(), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="smokeview", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        _say("aborted", err=True)
        return 1
    except (ConfigError, DatasetError, ImageIOError, CheckpointError) as exc:
        _say(f"error: {exc}", fg="red", err=True)
        return EXIT_CONFIG
    except (StageFailure, StageError, EnhanceError, EnsembleError, OptimizationError) as exc:
        _say(f"stage failure: {exc}", fg="red", err=True)
        return EXIT_STAGE
    except CacheCorruption as exc:
        _say(f"cache corruption: {exc}", fg="red", err=True)
        return EXIT_CACHE
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end orchestration with a content-addressed stage cache and run manifests.

Stage order: restore -> dehaze -> enhance -> per-seed optimize+render runs ->
average -> eval. Each cached stage lives in ``<cache>/<stage>/<key>/`` where the
key hashes the stage parameters together with the content hashes of its inputs,
so editing one input only invalidates the work that depends on it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .. import __version__
from ..dehaze import dehaze
from ..enhance import EnhancePrompt, HttpClient, MockClient, ReplayClient, enhance_image, restore_stage
from ..ensemble import RunSet, _tagged_run, average_views, mse_decomposition, variance_map
from ..image import Dataset, DatasetError, Image, ImageIOError, load_dataset, load_image, save_gray, save_image
from ..metrics import evaluate, markdown_table, psnr, write_csv
from ..splat.scene import save_checkpoint
from .config import ConfigError, PipelineConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_CACHE = 4

ABLATABLE = ("restore", "dehaze", "enhance", "ensemble")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, view: str | None = None):
        self.stage, self.view, self.cause = stage, view, cause
        where = f"stage {stage}" + (f", view {view}" if view is not None else "")
        super().__init__(f"{where}: {cause}")


class CacheCorruption(RuntimeError):
    pass


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def image_hash(img: Image) -> str:
    """Content hash of the 8-bit quantized raster."""
    from ..image import quantize

    h = hashlib.sha256(f"{img.height}x{img.width}".encode())
    h.update(quantize(img.data).tobytes())
    return h.hexdigest()


def array_hash(arr: np.ndarray) -> str:
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class StageCache:
    def __init__(self, root: Path):
        self.root = Path(root)

    def key(self, stage: str, params: dict, inputs: list[str]) -> str:
        return _digest({"stage": stage, "version": __version__, "params": params, "inputs": inputs})

    def entry(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    def lookup(self, stage: str, key: str) -> dict | None:
        """Verified record of a finished entry, or None when absent."""
        path = self.entry(stage, key)
        record_path = path / "stage.json"
        if not record_path.is_file():
            return None
        try:
            record = json.loads(record_path.read_text())
        except json.JSONDecodeError as exc:
            raise CacheCorruption(f"{record_path}: unreadable record ({exc})") from exc
        for rel, digest in record["files"].items():
            f = path / rel
            if not f.is_file() or file_sha256(f) != digest:
                raise CacheCorruption(f"{f}: missing or does not match its recorded hash")
        return record

    def begin(self, stage: str, key: str) -> Path:
        tmp = self.root / stage / f".{key}.tmp-{os.getpid()}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        return tmp

    def commit(self, stage: str, key: str, tmp: Path, record: dict) -> dict:
        record = dict(record)
        record["files"] = {
            str(p.relative_to(tmp)): file_sha256(p) for p in sorted(tmp.rglob("*")) if p.is_file()
        }
        (tmp / "stage.json").write_text(json.dumps(record, indent=2, sort_keys=True))
        final = self.entry(stage, key)
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
        return record


@dataclass
class StageRecord:
    name: str
    status: str
    key: str | None = None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    seconds: float = 0.0
    entry: str | None = None
    entries: list[str] = field(default_factory=list)
    recomputed: int = 0

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class RunManifest:
    tool_version: str
    config_hash: str
    config: dict
    dataset: dict
    stages: list[StageRecord]
    runs: list[dict]
    metrics: dict
    files: dict[str, str]
    timings: dict[str, float]

    def deterministic_part(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "config_hash": self.config_hash,
            "dataset": self.dataset,
            "stages": [{k: s.to_dict()[k] for k in ("name", "key", "inputs", "outputs")} for s in self.stages],
            "runs": [{k: r[k] for k in ("index", "seed", "key", "outputs")} for r in self.runs],
            "metrics": self.metrics,
            "files": self.files,
        }

    def digest(self) -> str:
        return _digest(self.deterministic_part())

    def to_dict(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "config_hash": self.config_hash,
            "config": self.config,
            "dataset": self.dataset,
            "stages": [s.to_dict() for s in self.stages],
            "runs": self.runs,
            "metrics": self.metrics,
            "files": self.files,
            "timings": self.timings,
            "digest": self.digest(),
        }

    def write(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default))
        os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(type(o))


def _finite(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "nan")


def _clean(obj):
    """Replace non-finite floats so the manifest stays strict JSON."""
    if isinstance(obj, float):
        return _finite(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


@dataclass
class _Views:
    names: list[str]
    images: list[Image]
    hashes: list[str]


def _image_stage(cache: StageCache, name: str, params: dict, views: _Views, fn, workers: int):
    """Per-view cache entries, so an edited input view only recomputes itself."""
    start = time.perf_counter()
    keys = [cache.key(name, params, [h]) for h in views.hashes]
    missing = [i for i, k in enumerate(keys) if cache.lookup(name, k) is None]

    def work(i):
        try:
            return fn(views.images[i], views.names[i])
        except Exception as exc:
            raise StageFailure(name, exc, views.names[i]) from exc

    if workers > 1 and len(missing) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(work, missing))
    else:
        outs = [work(i) for i in missing]
    for i, img in zip(missing, outs):
        tmp = cache.begin(name, keys[i])
        save_image(img, tmp / "view.png")
        cache.commit(name, keys[i], tmp, {"stage": name, "params": params, "input": views.hashes[i]})
    entries = [cache.entry(name, k) for k in keys]
    images = [load_image(e / "view.png") for e in entries]
    out = _Views(views.names, images, [image_hash(im) for im in images])
    status = "cached" if not missing else ("computed" if len(missing) == len(keys) else "partial")
    rec = StageRecord(name, status, _digest(keys), views.hashes, out.hashes, time.perf_counter() - start,
                      entries=[str(e) for e in entries], recomputed=len(missing))
    return out, rec


def _enhance_client(cfg: PipelineConfig, force_mock: bool):
    e = cfg.enhance
    if e.mock or force_mock:
        client, desc = MockClient(e.gamma, e.gain), {"kind": "mock", "gamma": e.gamma, "gain": e.gain}
    else:
        client = HttpClient(model=e.model)
        desc = {"kind": "service", "model": e.model, "prompt": e.prompt}
    if e.replay_dir is not None:
        client = ReplayClient(e.replay_dir, inner=None if e.mock or force_mock else client, model=e.model)
        desc = {"kind": "replay", "model": e.model, "prompt": e.prompt, "inner": desc}
    return client, desc


def _camera_list(cams) -> list[dict]:
    return [c.to_dict() for c in cams]


def _run_stage(cache: StageCache, cfg: PipelineConfig, views: _Views, ds: Dataset):
    """One cache entry per seed; returns the run set plus run records."""
    opt = cfg.optim_config()
    opt_params = {k: v for k, v in cfg.semantic_dict()["optimize"].items()}
    cams = [c for _, c in ds.training_views]
    base = {
        "optimize": opt_params,
        "train_cameras": _camera_list(cams),
        "targets": _camera_list(ds.target_views),
    }
    seeds = cfg.ensemble_config().seeds()
    records: list[dict] = []
    pending = []
    for k, seed in enumerate(seeds):
        key = cache.key("run", {**base, "seed": seed}, views.hashes)
        hit = cache.lookup("run", key)
        records.append({"index": k, "seed": seed, "key": key, "status": "cached" if hit else "computed",
                        "seconds": 0.0, "entry": str(cache.entry("run", key))})
        if hit is None:
            pending.append(k)

    train = list(zip(views.images, cams))
    if pending:
        jobs = [(k, train, opt, seeds[k], ds.target_views) for k in pending]
        start = time.perf_counter()
        workers = min(cfg.ensemble.workers, len(jobs))
        try:
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(_tagged_run, jobs))
            else:
                results = [_tagged_run(job) for job in jobs]
        except Exception as exc:
            raise StageFailure("ensemble", exc) from exc
        elapsed = (time.perf_counter() - start) / len(jobs)
        for k, (scene, imgs) in zip(pending, results):
            tmp = cache.begin("run", records[k]["key"])
            save_checkpoint(scene, tmp / "scene.ckpt", opt.iterations)
            for j, img in enumerate(imgs):
                np.save(tmp / f"view_{j:04d}.npy", img.data)
                save_image(img, tmp / f"view_{j:04d}.png")
            cache.commit("run", records[k]["key"], tmp, {"stage": "run", "seed": seeds[k], "inputs": views.hashes})
            records[k]["seconds"] = elapsed

    rows = []
    for rec in records:
        entry = Path(rec["entry"])
        row = [Image(np.load(entry / f"view_{j:04d}.npy")) for j in range(len(ds.target_views))]
        rec["outputs"] = [array_hash(im.data) for im in row]
        rows.append(row)
    return RunSet(rows, seeds), records


def _average_stage(cache: StageCache, runs: RunSet, records: list[dict]):
    inputs = [h for r in records for h in r["outputs"]]
    key = cache.key("average", {"n_runs": runs.n_runs}, inputs)
    start = time.perf_counter()
    record = cache.lookup("average", key)
    status = "cached"
    if record is None:
        status = "computed"
        tmp = cache.begin("average", key)
        (tmp / "avg").mkdir()
        (tmp / "var").mkdir()
        maxima = {}
        for j, img in enumerate(average_views(runs)):
            np.save(tmp / "avg" / f"view_{j:04d}.npy", img.data)
            save_image(img, tmp / "avg" / f"view_{j:04d}.png")
            if runs.n_runs >= 2:
                vmap, peak = variance_map(runs, j)
                save_gray(vmap, tmp / "var" / f"view_{j:04d}.png")
                maxima[f"view_{j:04d}"] = peak
        (tmp / "var" / "variance_max.json").write_text(json.dumps(maxima, indent=2, sort_keys=True))
        cache.commit("average", key, tmp, {"stage": "average", "inputs": inputs})
    entry = cache.entry("average", key)
    avg = [Image(np.load(entry / "avg" / f"view_{j:04d}.npy")) for j in range(runs.n_views)]
    rec = StageRecord("average", status, key, inputs, [array_hash(a.data) for a in avg],
                      time.perf_counter() - start, str(entry))
    return avg, rec


def _eval_metrics(cfg: PipelineConfig, ds: Dataset, avg: list[Image], runs: RunSet) -> dict:
    labels = [(ds.scene_name, f"{j:04d}") for j in range(len(avg))]
    report = evaluate(avg, ds.ground_truth, labels)
    per_view = []
    for j, gt in enumerate(ds.ground_truth):
        per_run, of_mean, spread = mse_decomposition(runs, j, gt)
        run_psnrs = [psnr(runs.views[k][j], gt) for k in range(runs.n_runs)]
        per_view.append({
            "view": f"{j:04d}",
            "mean_run_mse": per_run,
            "avg_mse": of_mean,
            "run_spread_mse": spread,
            "avg_psnr": _finite(psnr(avg[j], gt)),
            "psnr_bound": _finite(-10 * math.log10(per_run)) if per_run > 0 else "inf",
            "mean_run_psnr": _finite(float(np.mean(run_psnrs))),
            "worst_run_psnr": _finite(float(np.min(run_psnrs))),
        })
    return {
        "report": _clean(report.to_dict()),
        "mean_psnr": _finite(report.mean_psnr),
        "mean_ssim": _finite(report.mean_ssim),
        "ensemble": per_view,
        "psnr_pooling": "arithmetic mean of per-view dB",
    }, report


def _eval_stage(cache: StageCache, cfg: PipelineConfig, ds: Dataset, avg, runs: RunSet, inputs: list[str]):
    params = {"method": cfg.eval.method_name, "n_runs": runs.n_runs}
    key = cache.key("eval", params, inputs)
    start = time.perf_counter()
    record = cache.lookup("eval", key)
    status = "cached"
    if record is None:
        status = "computed"
        tmp = cache.begin("eval", key)
        metrics, report = _eval_metrics(cfg, ds, avg, runs)
        write_csv(report, tmp / "report.csv")
        (tmp / "report.md").write_text(markdown_table(report, cfg.eval.method_name))
        (tmp / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
        cache.commit("eval", key, tmp, {"stage": "eval", "params": params, "inputs": inputs})
    entry = cache.entry("eval", key)
    metrics = json.loads((entry / "metrics.json").read_text())
    rec = StageRecord("eval", status, key, inputs, [file_sha256(entry / "metrics.json")],
                      time.perf_counter() - start, str(entry))
    return metrics, rec


def _export(src: Path, dst: Path) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, dst)


def run_pipeline(cfg: PipelineConfig, force_mock: bool = False) -> RunManifest:
    """Run every stage, reusing cached results; writes ``<out>/manifest.json``."""
    out = cfg.paths.out
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise ConfigError(f"{out} is in use by another pipeline invocation") from exc
    try:
        return _run_locked(cfg, force_mock)
    finally:
        lock.release()


def _run_locked(cfg: PipelineConfig, force_mock: bool) -> RunManifest:
    t0 = time.perf_counter()
    out = cfg.paths.out
    cache = StageCache(cfg.cache_dir())
    try:
        ds = load_dataset(cfg.paths.data)
    except (DatasetError, ImageIOError) as exc:
        raise ConfigError(f"input dataset: {exc}") from exc
    train_names = ds.image_names.get("train") or [f"train_{i:04d}" for i in range(len(ds.training_views))]
    views = _Views(train_names, [img for img, _ in ds.training_views],
                   [image_hash(img) for img, _ in ds.training_views])
    dataset_info = {
        "scene": ds.scene_name,
        "train": dict(zip(train_names, views.hashes)),
        "test": [image_hash(g) for g in (ds.ground_truth or [])],
        "cameras": _digest({"train": _camera_list(c for _, c in ds.training_views),
                            "test": _camera_list(ds.target_views)}),
    }
    stages: list[StageRecord] = []

    r = cfg.restore
    if r.enabled:
        params = {"kind": r.kind, "command": r.command}
        views, rec = _image_stage(cache, "restore", params, views,
                                  lambda img, v: restore_stage(img, r.kind, r.command, v), r.workers)
    else:
        rec = StageRecord("restore", "skipped", inputs=views.hashes, outputs=views.hashes)
    stages.append(rec)

    d = cfg.dehaze
    if d.enabled:
        dp = d.params()
        views, rec = _image_stage(cache, "dehaze", cfg.semantic_dict()["dehaze"], views,
                                  lambda img, v: dehaze(img, dp), d.workers)
    else:
        rec = StageRecord("dehaze", "skipped", inputs=views.hashes, outputs=views.hashes)
    stages.append(rec)

    e = cfg.enhance
    if e.enabled:
        client, desc = _enhance_client(cfg, force_mock)
        prompt, gate = EnhancePrompt(e.prompt), e.gate()
        params = {"client": desc, "ssim_threshold": e.ssim_threshold}
        views, rec = _image_stage(cache, "enhance", params, views,
                                  lambda img, v: enhance_image(img, prompt, client, gate, v), e.workers)
    else:
        rec = StageRecord("enhance", "skipped", inputs=views.hashes, outputs=views.hashes)
    stages.append(rec)

    start = time.perf_counter()
    runs, run_records = _run_stage(cache, cfg, views, ds)
    stages.append(StageRecord(
        "ensemble",
        "cached" if all(x["status"] == "cached" for x in run_records) else "computed",
        _digest([x["key"] for x in run_records]),
        views.hashes,
        [h for x in run_records for h in x["outputs"]],
        time.perf_counter() - start,
    ))
    avg, rec = _average_stage(cache, runs, run_records)
    stages.append(rec)

    # exported layout: ensemble/run_<k>/view_<j>.png, ensemble/avg, ensemble/var
    exported: list[Path] = []
    ens_dir = out / "ensemble"
    if ens_dir.exists():
        shutil.rmtree(ens_dir)
    for rr in run_records:
        for j in range(runs.n_views):
            dst = ens_dir / f"run_{rr['index']}" / f"view_{j:04d}.png"
            _export(Path(rr["entry"]) / f"view_{j:04d}.png", dst)
            exported.append(dst)
    avg_entry = Path(rec.entry)
    for sub in ("avg", "var"):
        for f in sorted((avg_entry / sub).glob("*")):
            if f.suffix in (".png", ".json"):
                dst = ens_dir / sub / f.name
                _export(f, dst)
                exported.append(dst)

    metrics: dict = {}
    if cfg.eval.enabled and ds.ground_truth is not None:
        metrics, erec = _eval_stage(cache, cfg, ds, avg, runs, rec.outputs + dataset_info["test"])
        for name in ("report.csv", "report.md"):
            _export(Path(erec.entry) / name, out / name)
            exported.append(out / name)
        stages.append(erec)
    else:
        stages.append(StageRecord("eval", "skipped"))

    files: dict[str, str] = {}
    for s in stages:
        for entry in ([s.entry] if s.entry else []) + s.entries:
            for f in sorted(Path(entry).rglob("*")):
                if f.is_file():
                    files[os.path.relpath(f, out)] = file_sha256(f)
    for rr in run_records:
        entry = Path(rr["entry"])
        for f in sorted(entry.rglob("*")):
            if f.is_file():
                files[os.path.relpath(f, out)] = file_sha256(f)
    for f in exported:
        files[os.path.relpath(f, out)] = file_sha256(f)
    for s in stages:
        if s.entry:
            s.entry = os.path.relpath(s.entry, out)
        s.entries = [os.path.relpath(e, out) for e in s.entries]
    for rr in run_records:
        rr["entry"] = os.path.relpath(rr["entry"], out)

    manifest = RunManifest(
        tool_version=__version__,
        config_hash=cfg.digest(),
        config=cfg.semantic_dict(),
        dataset=dataset_info,
        stages=stages,
        runs=run_records,
        metrics=metrics,
        files=dict(sorted(files.items())),
        timings={"total_seconds": time.perf_counter() - t0,
                 "optimize_seconds": sum(x["seconds"] for x in run_records)},
    )
    manifest.write(out / "manifest.json")
    return manifest


@dataclass
class AblationResult:
    stage: str
    full: RunManifest
    ablated: RunManifest

    def deltas(self) -> dict:
        f, a = self.full.metrics, self.ablated.metrics
        out = {}
        for k in ("mean_psnr", "mean_ssim"):
            if isinstance(f.get(k), float) and isinstance(a.get(k), float):
                out[k] = f[k] - a[k]
            else:
                out[k] = None
        return out

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "full": self.full.metrics,
            "ablated": self.ablated.metrics,
            "delta": self.deltas(),
        }

    def markdown(self) -> str:
        def cell(m, k, digits):
            v = m.get(k)
            return f"{v:.{digits}f}" if isinstance(v, float) else str(v)

        d = self.deltas()
        lines = [
            f"| Pipeline | PSNR↑ | SSIM↑ | LPIPS↓ |",
            "|---|---|---|---|",
            f"| full | {cell(self.full.metrics, 'mean_psnr', 2)} | {cell(self.full.metrics, 'mean_ssim', 3)} | n/a |",
            f"| without {self.stage} | {cell(self.ablated.metrics, 'mean_psnr', 2)} | "
            f"{cell(self.ablated.metrics, 'mean_ssim', 3)} | n/a |",
            f"| delta | {cell(d, 'mean_psnr', 2)} | {cell(d, 'mean_ssim', 3)} | n/a |",
        ]
        return "\n".join(lines) + "\n"


def ablated_config(cfg: PipelineConfig, stage: str) -> PipelineConfig:
    if stage not in ABLATABLE:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(ABLATABLE)}")
    data = cfg.model_dump()
    if stage == "ensemble":
        data["ensemble"]["n_runs"] = 1
    else:
        data[stage]["enabled"] = False
    return PipelineConfig.model_validate(data)


def ablate(cfg: PipelineConfig, stage: str, force_mock: bool = False) -> AblationResult:
    """Run with and without ``stage`` on identical seeds; both share one stage cache."""
    base = ablated_config(cfg, stage)  # validates the stage name before any work
    root = cfg.paths.out
    shared = cfg.cache_dir()
    full_cfg = cfg.model_copy(deep=True)
    full_cfg.paths.out = root / "full"
    full_cfg.paths.cache = shared
    base.paths.out = root / f"without_{stage}"
    base.paths.cache = shared
    full = run_pipeline(full_cfg, force_mock)
    ablated = run_pipeline(base, force_mock)
    result = AblationResult(stage, full, ablated)
    (root / f"ablation_{stage}.json").write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True, default=_json_default))
    (root / f"ablation_{stage}.md").write_text(result.markdown())
    return result

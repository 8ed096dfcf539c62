import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import pytest
from filelock import FileLock

from smokeview.image import Image, load_dataset, quantize, save_dataset, save_image
from smokeview.metrics import psnr
from smokeview.pipeline import (
    CacheCorruption, ConfigError, StageFailure, SynthSceneSpec, ablate, load_config, parse_config, run_pipeline,
    synth_scene,
)
from smokeview.pipeline.run import file_sha256
from smokeview.pipeline.synth import ring_cameras
from smokeview.splat.optim import optimize
from smokeview.splat.render import render

TINY = SynthSceneSpec(seed=3, width=24, height=24, focal=26, n_cameras=4, n_test=2)
# content hash of TINY's smoked dataset (8-bit pixels and camera records), recorded from a reference run
TINY_GOLDEN = "12ae0594b19f7b67b4f094cc1b4c17338e65181b82eb11ebb63631d51bf3151a"


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    save_dataset(synth_scene(TINY).smoked, root / "data")
    return root / "data"


def make_cfg(root: Path, data: Path, **sections):
    doc = {
        "paths": {"data": str(data), "out": str(root / "out")},
        "optimize": {"iterations": 30, "budget": 20},
        "ensemble": {"n_runs": 2},
    }
    for name, values in sections.items():
        doc.setdefault(name, {}).update(values)
    return parse_config(doc)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({"paths": {"data": "d", "out": "o"}, "dehaze": {"radius": 3}})
    with pytest.raises(ConfigError):
        parse_config({"paths": {"data": "d", "out": "o"}, "mystery": {}})
    with pytest.raises(ConfigError):
        parse_config({"paths": {"data": "d", "out": "o"}, "dehaze": {"omega": 2.0}})


def test_config_presets(tmp_path):
    cfg = parse_config({"paths": {"data": "d", "out": "o"}})
    assert (cfg.optimize.iterations, cfg.ensemble.n_runs) == (2000, 8)
    paper = cfg.with_preset("paper")
    assert (paper.optimize.iterations, paper.ensemble.n_runs) == (30000, 91)
    explicit = parse_config({"paths": {"data": "d", "out": "o"}, "optimize": {"iterations": 5}})
    assert explicit.optimize.iterations == 5
    assert explicit.with_preset("desk").optimize.iterations == 2000
    assert cfg.digest() != paper.digest()


def test_config_file_paths_resolve(tmp_path):
    (tmp_path / "p.toml").write_text('[paths]\ndata = "in"\nout = "o"\n[restore]\nkind = "identity"\n')
    cfg = load_config(tmp_path / "p.toml")
    assert cfg.paths.data == tmp_path / "in" and cfg.cache_dir() == tmp_path / "o" / "cache"
    assert cfg.restore.kind == "identity"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("[paths\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_workers_do_not_change_digest():
    a = parse_config({"paths": {"data": "d", "out": "o"}, "ensemble": {"workers": 1}})
    b = parse_config({"paths": {"data": "d", "out": "elsewhere"}, "ensemble": {"workers": 4}})
    assert a.digest() == b.digest()


def test_synth_beta_limits():
    clean_eq = synth_scene(TINY.model_copy(update={"beta": 0.0}))
    for (s, _), (c, _) in zip(clean_eq.smoked.training_views, clean_eq.clean.training_views):
        assert s == c
    thick = synth_scene(TINY.model_copy(update={"beta": 60.0}))
    for s, _ in thick.smoked.training_views:
        assert np.abs(s.data - np.asarray(TINY.airlight)).max() < 1e-6
    assert thick.smoked.ground_truth == thick.clean.ground_truth


def test_synth_golden_hash():
    sc = synth_scene(TINY)
    h = hashlib.sha256()
    for img, cam in sc.smoked.training_views:
        h.update(quantize(img.data).tobytes())
        h.update(json.dumps(cam.to_dict(), sort_keys=True).encode())
    for img in sc.smoked.ground_truth:
        h.update(quantize(img.data).tobytes())
    assert h.hexdigest() == TINY_GOLDEN


def test_synth_depth_and_transmission():
    sc = synth_scene(TINY)
    assert len(sc.train_depth) == 4 and sc.train_depth[0].shape == (24, 24)
    assert np.all(sc.train_depth[0] > 0)


def test_degenerate_ring():
    spec = TINY.model_copy(update={"ring_radius": 1e-12})
    with pytest.raises(ValueError):
        ring_cameras(spec, [0.0])
    with pytest.raises(ValueError):
        SynthSceneSpec(n_cameras=1)
    with pytest.raises(ValueError):
        SynthSceneSpec(beta=-1)


def test_identity_pipeline_equals_direct_run(tmp_path, tiny_data):
    cfg = make_cfg(tmp_path, tiny_data, restore={"kind": "identity"}, dehaze={"enabled": False},
                   enhance={"mock": True}, ensemble={"n_runs": 1, "base_seed": 4})
    manifest = run_pipeline(cfg)
    ds = load_dataset(tiny_data)
    scene = optimize(ds.training_views, cfg.optim_config().with_seed(4))
    avg_entry = tmp_path / "out" / next(s.entry for s in manifest.stages if s.name == "average")
    for j, cam in enumerate(ds.target_views):
        final = np.load(avg_entry / "avg" / f"view_{j:04d}.npy")
        np.testing.assert_array_equal(final, render(scene, cam).data)
    assert manifest.runs[0]["seed"] == 4


def test_rerun_is_fully_cached(tmp_path, tiny_data):
    cfg = make_cfg(tmp_path, tiny_data)
    first = run_pipeline(cfg)
    assert {s.status for s in first.stages} == {"computed"}
    second = run_pipeline(cfg)
    assert {s.status for s in second.stages} == {"cached"}
    assert second.timings["optimize_seconds"] == 0.0
    assert second.digest() == first.digest()


def test_manifest_lists_every_file(tmp_path, tiny_data):
    cfg = make_cfg(tmp_path, tiny_data)
    manifest = run_pipeline(cfg)
    out = tmp_path / "out"
    on_disk = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()} - {"manifest.json", ".lock"}
    assert on_disk == set(manifest.files)
    for rel, digest in manifest.files.items():
        assert file_sha256(out / rel) == digest
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["digest"] == manifest.digest()
    assert doc["config_hash"] == cfg.digest()
    assert [r["seed"] for r in doc["runs"]] == [0, 1]
    assert {"run_0", "run_1", "avg", "var"} <= {p.name for p in (out / "ensemble").iterdir()}
    assert (out / "report.csv").read_text().startswith("scene,view_id,psnr_db,ssim,lpips")


def test_cache_hit_matches_recomputation(tmp_path, tiny_data):
    a = run_pipeline(make_cfg(tmp_path / "a", tiny_data))
    run_pipeline(make_cfg(tmp_path / "a", tiny_data))
    b = run_pipeline(make_cfg(tmp_path / "b", tiny_data))
    assert a.digest() == b.digest()
    for j in range(2):
        pa = (tmp_path / "a" / "out" / "ensemble" / "avg" / f"view_{j:04d}.png").read_bytes()
        pb = (tmp_path / "b" / "out" / "ensemble" / "avg" / f"view_{j:04d}.png").read_bytes()
        assert pa == pb


def test_edited_view_recomputes_only_itself(tmp_path, tiny_data):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(tiny_data, data)
    cfg = make_cfg(tmp_path, data)
    run_pipeline(cfg)
    img_path = data / "images" / "train_0002.png"
    from smokeview.image import load_image

    img = load_image(img_path)
    save_image(Image.from_array(img.data * 0.9), img_path)
    manifest = run_pipeline(cfg)
    restore = next(s for s in manifest.stages if s.name == "restore")
    assert restore.status == "partial" and restore.recomputed == 1


def test_corrupted_cache_is_detected(tmp_path, tiny_data):
    cfg = make_cfg(tmp_path, tiny_data)
    run_pipeline(cfg)
    victim = next((tmp_path / "out" / "cache" / "dehaze").glob("*/view.png"))
    victim.write_bytes(victim.read_bytes() + b"x")
    with pytest.raises(CacheCorruption):
        run_pipeline(cfg)


def test_stage_failure_names_stage_and_view(tmp_path, tiny_data):
    cfg = make_cfg(tmp_path, tiny_data, restore={"kind": "external_command",
                                                 "command": [sys.executable, "-c", "raise SystemExit(1)"]})
    with pytest.raises(StageFailure) as info:
        run_pipeline(cfg)
    assert info.value.stage == "restore" and info.value.view == "images/train_0000.png"


def test_output_dir_is_locked(tmp_path, tiny_data):
    cfg = make_cfg(tmp_path, tiny_data)
    (tmp_path / "out").mkdir()
    with FileLock(str(tmp_path / "out" / ".lock")):
        with pytest.raises(ConfigError, match="in use"):
            run_pipeline(cfg)


def test_missing_dataset_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        run_pipeline(make_cfg(tmp_path, tmp_path / "nowhere"))


def test_ablate_identity_stage_has_zero_delta(tmp_path, tiny_data):
    cfg = make_cfg(tmp_path, tiny_data, restore={"kind": "identity"})
    result = ablate(cfg, "restore")
    assert result.deltas() == {"mean_psnr": 0.0, "mean_ssim": 0.0}
    assert (tmp_path / "out" / "ablation_restore.md").exists()


def test_ablate_ensemble_respects_bound(tmp_path, tiny_data):
    cfg = make_cfg(tmp_path, tiny_data, ensemble={"n_runs": 3})
    result = ablate(cfg, "ensemble")
    assert len(result.ablated.runs) == 1
    for view in result.full.metrics["ensemble"]:
        assert view["avg_psnr"] >= view["psnr_bound"] - 1e-9
        assert view["avg_psnr"] >= view["worst_run_psnr"]


def test_ablate_unknown_stage(tmp_path, tiny_data):
    with pytest.raises(ConfigError):
        ablate(make_cfg(tmp_path, tiny_data), "optimize")

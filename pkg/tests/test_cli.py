import json
import subprocess
import sys

import numpy as np
import pytest

from smokeview.cli import main
from smokeview.image import Image, load_image, save_image
from smokeview.splat.scene import load_checkpoint


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.toml").write_text("width = 24\nheight = 24\nfocal = 26.0\nn_cameras = 4\nn_test = 2\n")
    assert main(["pipeline", "synth", "--spec", str(root / "spec.toml"), "--out", str(root / "s")]) == 0
    return root


def test_synth_layout(synth_dir):
    s = synth_dir / "s"
    assert (s / "clean" / "cameras.json").exists() and (s / "smoked" / "cameras.json").exists()
    assert json.loads((s / "spec.json").read_text())["width"] == 24
    assert np.load(s / "depth.npz")["train"].shape == (4, 24, 24)


def test_dehaze_directory_and_transmission(synth_dir, tmp_path):
    src = synth_dir / "s" / "smoked" / "images"
    assert main(["dehaze", "--in", str(src), "--out", str(tmp_path / "d"), "--patch-radius", "3",
                 "--dump-transmission", str(tmp_path / "t")]) == 0
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == sorted(p.name for p in src.iterdir())
    assert load_image(tmp_path / "t" / "train_0000.png").shape == (24, 24)


def test_dehaze_single_file(synth_dir, tmp_path):
    src = synth_dir / "s" / "smoked" / "images" / "train_0001.png"
    assert main(["dehaze", "--in", str(src), "--out", str(tmp_path / "one.png")]) == 0
    assert load_image(tmp_path / "one.png").shape == (24, 24)


def test_bad_parameter_is_config_error(synth_dir, tmp_path):
    src = synth_dir / "s" / "smoked" / "images"
    assert main(["dehaze", "--in", str(src), "--out", str(tmp_path), "--omega", "3"]) == 2
    assert main(["dehaze", "--in", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2
    assert main(["dehaze", "--bogus"]) == 2


def test_restore_and_enhance(synth_dir, tmp_path):
    src = synth_dir / "s" / "smoked" / "images"
    assert main(["restore", "--in", str(src), "--out", str(tmp_path / "r"), "--kind", "identity"]) == 0
    assert load_image(tmp_path / "r" / "train_0000.png") == load_image(src / "train_0000.png")
    assert main(["enhance", "--in", str(tmp_path / "r"), "--out", str(tmp_path / "e"), "--mock", "--gamma", "0.9"]) == 0
    assert len(list((tmp_path / "e").iterdir())) == 6


def test_restore_failure_exit_code(synth_dir, tmp_path):
    src = synth_dir / "s" / "smoked" / "images" / "train_0000.png"
    cmd = f"{sys.executable} -c 'raise SystemExit(2)'"
    assert main(["restore", "--in", str(src), "--out", str(tmp_path), "--kind", "external_command",
                 "--command", cmd]) == 3


def test_enhance_without_endpoint(synth_dir, tmp_path, monkeypatch):
    monkeypatch.delenv("SMOKEVIEW_ENHANCE_URL", raising=False)
    src = synth_dir / "s" / "smoked" / "images" / "train_0000.png"
    assert main(["enhance", "--in", str(src), "--out", str(tmp_path)]) == 3


def test_optimize_render_eval(synth_dir, tmp_path, capsys):
    data = synth_dir / "s" / "smoked"
    ckpt = tmp_path / "scene.ckpt"
    assert main(["optimize", "--data", str(data), "--checkpoint", str(ckpt), "--iterations", "20",
                 "--budget", "12", "--seed", "3"]) == 0
    scene, it = load_checkpoint(ckpt)
    assert scene.budget == 12 and it == 20
    assert main(["render", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "r")]) == 0
    gt = tmp_path / "gt"
    gt.mkdir()
    for j in range(2):
        save_image(load_image(data / "images" / f"test_{j:04d}.png"), gt / f"view_{j:04d}.png")
    capsys.readouterr()
    assert main(["eval", "--rendered", str(tmp_path / "r"), "--gt", str(gt), "--out", str(tmp_path / "rep.csv")]) == 0
    assert "| Method | PSNR↑ | SSIM↑ | LPIPS↓ |" in capsys.readouterr().out
    rows = (tmp_path / "rep.csv").read_text().splitlines()
    assert rows[1].startswith("gt,view_0000,") and (tmp_path / "rep.md").exists()


def test_eval_missing_render(tmp_path):
    (tmp_path / "r").mkdir()
    (tmp_path / "g").mkdir()
    save_image(Image.constant(12, 12, (0.1, 0.2, 0.3)), tmp_path / "g" / "a.png")
    assert main(["eval", "--rendered", str(tmp_path / "r"), "--gt", str(tmp_path / "g"),
                 "--out", str(tmp_path / "x.csv")]) == 2


def test_ensemble_layout(synth_dir, tmp_path):
    out = tmp_path / "ens"
    assert main(["ensemble", "--data", str(synth_dir / "s" / "smoked"), "--runs", "2", "--base-seed", "5",
                 "--out", str(out), "--iterations", "10", "--budget", "8"]) == 0
    for sub in ("run_0", "run_1", "avg", "var"):
        assert (out / sub / "view_0000.png").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [5, 6]
    assert set(manifest["files"]) >= {"avg/view_0001.png", "run_1/view_0001.png"}


def test_pipeline_run_and_exit_codes(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "p.toml"
    cfg.write_text(f'[paths]\ndata = "{synth_dir / "s" / "smoked"}"\nout = "out"\n'
                   "[optimize]\niterations = 10\nbudget = 8\n[ensemble]\nn_runs = 2\n")
    assert main(["pipeline", "run", "--config", str(cfg), "--mock-enhance"]) == 0
    assert main(["pipeline", "run", "--config", str(cfg)]) == 0
    assert "cached" in capsys.readouterr().out
    victim = next((tmp_path / "out" / "cache" / "restore").glob("*/view.png"))
    victim.write_bytes(b"garbage")
    assert main(["pipeline", "run", "--config", str(cfg)]) == 4
    (tmp_path / "bad.toml").write_text("[paths]\ndata = 1\n")
    assert main(["pipeline", "run", "--config", str(tmp_path / "bad.toml")]) == 2


def test_pipeline_ablate_cli(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "p.toml"
    cfg.write_text(f'[paths]\ndata = "{synth_dir / "s" / "smoked"}"\nout = "out"\n'
                   '[restore]\nkind = "identity"\n[optimize]\niterations = 5\nbudget = 6\n[ensemble]\nn_runs = 1\n')
    assert main(["pipeline", "ablate", "--config", str(cfg), "--stage", "restore"]) == 0
    out = capsys.readouterr().out
    assert "without restore" in out and "| delta | 0.00 | 0.000 | n/a |" in out
    assert main(["pipeline", "ablate", "--config", str(cfg), "--stage", "bogus"]) == 2


def test_no_color_respected(synth_dir, tmp_path):
    cfg = tmp_path / "p.toml"
    cfg.write_text(f'[paths]\ndata = "{synth_dir / "s" / "smoked"}"\nout = "out"\n'
                   "[optimize]\niterations = 3\nbudget = 4\n[ensemble]\nn_runs = 1\n")
    env = {"NO_COLOR": "1", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "smokeview.cli", "pipeline", "run", "--config", str(cfg)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert "\x1b[" not in proc.stdout


def test_console_script_version():
    proc = subprocess.run([sys.executable, "-m", "smokeview.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout

import json
import subprocess
import sys

import numpy as np
import pytest

from layersplat import formats
from layersplat.cli import main


def run(capsys, *argv):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as e:
        code = e.code
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["make-synthetic", str(out), "--width", "32", "--height", "24"]) == 0
    return out


def test_make_synthetic_layout(synth):
    for name in ("source.png", "source_depth.pfm", "camera.json", "train.txt", "heldout.txt", "wall.png",
                 "wall_depth.pfm"):
        assert (synth / name).exists(), name
    assert len(formats.load_targets(synth / "train.txt")) == 3
    assert len(formats.load_targets(synth / "heldout.txt")) == 1


def test_make_synthetic_is_seeded(synth, tmp_path):
    assert main(["make-synthetic", str(tmp_path), "--width", "32", "--height", "24"]) == 0
    np.testing.assert_array_equal(formats.read_image(tmp_path / "source.png"),
                                  formats.read_image(synth / "source.png"))


def test_unproject_render_export(capsys, synth, tmp_path):
    code, _, _ = run(capsys, "unproject", synth / "source.png", synth / "source_depth.pfm",
                     "-o", tmp_path / "b.fl3d", "--camera", synth / "camera.json", "--s0", -8)
    assert code == 0
    assert formats.read_scene(tmp_path / "b.fl3d").count == 32 * 24
    code, _, _ = run(capsys, "render", tmp_path / "b.fl3d", "-o", tmp_path / "r.png", "--camera",
                     synth / "camera.json")
    assert code == 0 and formats.read_image(tmp_path / "r.png").shape == (24, 32, 3)
    code, _, _ = run(capsys, "export-ply", tmp_path / "b.fl3d", tmp_path / "b.ply")
    assert code == 0 and formats.import_ply(tmp_path / "b.ply").count == 32 * 24


def test_fit_writes_outputs(capsys, synth, tmp_path):
    code, _, err = run(capsys, "fit", synth / "source.png", synth / "source_depth.pfm", synth / "train.txt",
                       "--out-dir", tmp_path, "--camera", synth / "camera.json", "--steps", 3, "--log-every", 1)
    assert code == 0 and "loss" in err
    for name in ("params.npz", "scene.fl3d", "loss_history.csv", "metrics.json"):
        assert (tmp_path / name).exists(), name
    assert len((tmp_path / "loss_history.csv").read_text().splitlines()) == 4


def test_eval_json(capsys, synth):
    code, out, _ = run(capsys, "eval", synth / "source.png", synth / "source.png", "--crop", 0)
    assert code == 0
    rep = json.loads(out)
    assert rep["psnr"] == float("inf") and rep["ssim"] == pytest.approx(1.0)


def test_align_json(capsys, tmp_path):
    rng = np.random.default_rng(0)
    d = rng.uniform(1, 5, 40)
    np.savetxt(tmp_path / "pairs.txt", np.stack([d, 2.0 * d], axis=1))
    code, out, _ = run(capsys, "align", tmp_path / "pairs.txt")
    assert code == 0
    res = json.loads(out)
    assert res["scale"] == pytest.approx(2.0, rel=1e-12) and res["inliers"] == 40 and res["pairs"] == 40


def test_gradcheck_passes(capsys):
    code, _, err = run(capsys, "gradcheck", "--count", 10, "--width", 24, "--height", 16, "--focal", 24)
    assert code == 0 and "passed" in err


def test_usage_errors_exit_1(capsys, synth):
    assert run(capsys)[0] == 1
    assert run(capsys, "no-such-command")[0] == 1
    assert run(capsys, "eval", synth / "source.png")[0] == 1
    assert run(capsys, "--threads", 0, "eval", synth / "source.png", synth / "source.png")[0] == 1
    assert run(capsys, "align")[0] == 1


def test_data_errors_exit_2(capsys, synth, tmp_path):
    (tmp_path / "bad.fl3d").write_bytes(b"XXXX")
    assert run(capsys, "export-ply", tmp_path / "bad.fl3d", tmp_path / "o.ply")[0] == 2
    assert run(capsys, "eval", synth / "source.png", tmp_path / "missing.png")[0] == 2
    assert run(capsys, "eval", synth / "source.png", synth / "wall.png", "--crop", 0.6)[0] == 2


def test_console_script():
    r = subprocess.run([sys.executable, "-m", "layersplat.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "make-synthetic" in r.stdout

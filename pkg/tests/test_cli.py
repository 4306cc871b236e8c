import json

import numpy as np
import pytest

from splatfill.cli import main
from splatfill.pipeline import load_cloud, save_cloud
from splatfill.scene_io import read_depth_pfm, read_mask, read_png, save_scene, write_png
from splatfill.synthetic import toy_scene


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    toy = toy_scene(n_views=4, size=20, focal=25.0, plane_n=8)
    save_scene(toy.scene, root)
    save_cloud(toy.cloud, root)
    cfg = root / "fast.cfg"
    cfg.write_text("coarse_iters = 30\nfine_iters = 20\nddim_steps = 5\nk_clusters = 2\n")
    return root


def run(scene_dir, out, *extra):
    return main([extra[0], "--scene", str(scene_dir), "--out", str(out),
                 "--config", str(scene_dir / "fast.cfg"), *extra[1:]])


def test_cluster_smoke(scene_dir, tmp_path):
    assert run(scene_dir, tmp_path, "cluster") == 0
    lines = (tmp_path / "clusters.txt").read_text().splitlines()
    assert lines
    manifest = json.loads((tmp_path / "run.json").read_text())
    assert manifest["commands"]["cluster"]["artifacts"] == ["clusters.txt"]


def test_usage_errors(scene_dir, tmp_path, capsys):
    assert main(["cluster", "--out", str(tmp_path)]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["paint", "--scene", str(scene_dir), "--out", str(tmp_path)]) == 1
    assert main(["cluster", "--scene", str(scene_dir), "--out", str(tmp_path), "--bogus", "1"]) == 1
    assert main(["cluster", "--scene", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 1


def test_bad_config_is_a_validation_error(scene_dir, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("lambda_a = 2.0\n")
    assert main(["cluster", "--scene", str(scene_dir), "--out", str(tmp_path), "--config", str(bad)]) == 1


def test_warp_outputs(scene_dir, tmp_path):
    assert run(scene_dir, tmp_path, "warp", "--ref", "0", "--target", "1") == 0
    warped = read_png(tmp_path / "warped_1.png")
    valid = read_mask(tmp_path / "valid_1.png")
    assert warped.shape == (20, 20, 3) and valid.any()
    assert read_depth_pfm(tmp_path / "depthcond_1.pfm").shape == (20, 20)
    assert run(scene_dir, tmp_path, "warp", "--ref", "0", "--target", "9") == 1


def test_render_and_eval_identity(scene_dir, tmp_path, capsys):
    assert run(scene_dir, tmp_path, "render") == 0
    assert len(list((tmp_path / "renders").glob("*.png"))) == 4
    assert run(scene_dir, tmp_path, "eval", "--renders", str(scene_dir / "images")) == 0
    assert "mean psnr 99.0000 ssim 1.000000" in capsys.readouterr().out
    rows = (tmp_path / "metrics.txt").read_text().splitlines()
    assert len(rows) == 4 and all(r.split()[1] == "99.000000" for r in rows)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exits_2(scene_dir, tmp_path):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text((scene_dir / "fast.cfg").read_text() + "lr_position = 1e300\nlr_scale = 1e300\n")
    code = main(["coarse", "--scene", str(scene_dir), "--out", str(tmp_path), "--config", str(cfg)])
    assert code == 2


def test_deterministic_runs(scene_dir, tmp_path):
    for name in ("a", "b"):
        assert run(scene_dir, tmp_path / name, "run") == 0
        assert run(scene_dir, tmp_path / name, "eval") == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "run.json").read_bytes() == (b / "run.json").read_bytes()
    assert (a / "cloud.bin").read_bytes() == (b / "cloud.bin").read_bytes()
    ma = np.loadtxt(a / "metrics.txt")
    mb = np.loadtxt(b / "metrics.txt")
    np.testing.assert_allclose(ma, mb, atol=1e-12)


def test_coarse_then_fine_equals_run(scene_dir, tmp_path):
    assert run(scene_dir, tmp_path / "oneshot", "run") == 0
    assert run(scene_dir, tmp_path / "c", "coarse") == 0
    assert run(scene_dir, tmp_path / "f", "fine", "--coarse", str(tmp_path / "c")) == 0
    one = load_cloud(tmp_path / "oneshot" / "cloud.bin")
    staged = load_cloud(tmp_path / "f" / "cloud.bin")
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
        np.testing.assert_array_equal(getattr(one, name), getattr(staged, name))
    for vid in range(4):
        np.testing.assert_array_equal(read_png(tmp_path / "oneshot" / "renders" / f"{vid}.png"),
                                      read_png(tmp_path / "f" / "renders" / f"{vid}.png"))


def test_seed_override_changes_manifest(scene_dir, tmp_path):
    assert run(scene_dir, tmp_path, "cluster", "--seed", "5") == 0
    assert json.loads((tmp_path / "run.json").read_text())["commands"]["cluster"]["seed"] == 5


def test_point_target_image_from_directory(scene_dir, tmp_path):
    targets = tmp_path / "targets"
    targets.mkdir()
    for vid in range(4):
        write_png(targets / f"{vid}.png", np.full((20, 20, 3), 0.5))
    cfg = tmp_path / "pt.cfg"
    cfg.write_text((scene_dir / "fast.cfg").read_text() + f"point_target_image = {targets}\n")
    out = tmp_path / "out"
    assert main(["coarse", "--scene", str(scene_dir), "--out", str(out), "--config", str(cfg)]) == 0
    inp = read_png(out / "inpainted" / "0.png")
    mask = read_mask(scene_dir / "masks" / "0.png") > 0
    np.testing.assert_allclose(inp[mask], 0.5, atol=2 / 255)

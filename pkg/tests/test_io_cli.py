import json

import numpy as np
import pytest
import torch

import photosdf.cli as cli
from photosdf.camera import Camera
from photosdf.checkpoint import save_checkpoint
from photosdf.config import desk_profile
from photosdf.export import read_obj
from photosdf.field import FieldStack
from photosdf.io import load_dataset, read_pfm, read_png16, save_dataset, write_pfm, write_png16
from photosdf.shade import render_image
from photosdf.synthetic import make_synthetic


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    return make_synthetic(tmp_path_factory.mktemp("tiny"), "sphere", 4, 32, seed=1)


# image files


@pytest.mark.parametrize("shape", [(5, 7, 3), (6, 4)])
def test_pfm_round_trip_is_bit_exact(tmp_path, shape):
    img = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", img)
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), img)
    head = (tmp_path / "a.pfm").read_bytes()[:20]
    assert b"-1.0" in head  # little-endian marker


def test_pfm_orientation_and_rejects(tmp_path):
    img = np.zeros((2, 3), dtype=np.float32)
    img[0, 0] = 1.0
    write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    # first stored row is the bottom image row
    payload = np.frombuffer(raw[-24:], dtype="<f4").reshape(2, 3)
    assert payload[1, 0] == 1.0 and payload[0, 0] == 0.0
    (tmp_path / "b.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError):
        read_pfm(tmp_path / "b.pfm")
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "c.pfm", np.zeros((2, 2, 2)))


def test_png16_quantization(tmp_path):
    img = np.random.default_rng(1).random((4, 5, 3))
    write_png16(tmp_path / "a.png", img)
    back = read_png16(tmp_path / "a.png")
    assert float(np.abs(back - img).max()) <= 0.5 / 65535 + 1e-12
    assert np.array_equal(np.round(back * 65535), np.round(img * 65535))  # channel order preserved


# datasets


def test_dataset_round_trip_is_bit_exact(tmp_path):
    cams = [Camera.look_at((0.3, 0.2, 3.0), width=8, height=6), Camera.look_at((-2.0, 1.0, 2.0), width=8, height=6)]
    imgs = [np.random.default_rng(i).random((6, 8, 3)).astype(np.float32) for i in range(2)]
    save_dataset(tmp_path, cams, imgs)
    ds = load_dataset(tmp_path)
    for cam, img, view in zip(cams, imgs, ds.views):
        assert view.camera.to_dict() == cam.to_dict()
        assert np.array_equal(view.camera.cam_to_world, cam.cam_to_world)
        assert np.array_equal(view.image.numpy().astype(np.float32), img)


def test_dataset_validation(tmp_path):
    with pytest.raises(ValueError):
        save_dataset(tmp_path, [], [])
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
    cams = [Camera.look_at((0, 0, 3), width=4, height=4), Camera.look_at((0, 0, 3), width=6, height=4)]
    save_dataset(tmp_path / "mixed", cams, [np.zeros((4, 4, 3)), np.zeros((4, 6, 3))])
    with pytest.raises(ValueError, match="different image sizes"):
        load_dataset(tmp_path / "mixed")


def test_split_is_deterministic(tiny_dataset):
    a = tiny_dataset.split(3)
    assert a == tiny_dataset.split(3)
    train, held = a
    assert sorted(train + held) == list(range(len(tiny_dataset)))
    assert len(train) == round(0.7 * len(tiny_dataset))


# synthetic generation


def test_synthetic_layout_and_brightest_pixel(tiny_dataset):
    root = tiny_dataset.root
    assert (root / "cameras.json").exists() and (root / "scene.json").exists() and (root / "gt_mesh.obj").exists()
    assert sorted(p.name for p in (root / "images").iterdir()) == [f"view_{i:04d}.pfm" for i in range(4)]
    for view in tiny_dataset.views:
        lum = view.image.sum(-1)
        iy, ix = divmod(int(torch.argmax(lum)), lum.shape[1])
        assert abs(ix + 0.5 - view.camera.cx) <= 1.0 and abs(iy + 0.5 - view.camera.cy) <= 1.0
        center = torch.tensor(view.camera.cam_to_world[:, 3])
        assert float(torch.linalg.norm(center)) == pytest.approx(3.0)


def test_synthetic_is_deterministic(tmp_path, tiny_dataset):
    again = make_synthetic(tmp_path, "sphere", 4, 32, seed=1)
    for a, b in zip(again.views, tiny_dataset.views):
        assert a.image_path.read_bytes() == b.image_path.read_bytes()
    assert (tmp_path / "cameras.json").read_bytes() == (tiny_dataset.root / "cameras.json").read_bytes()


def test_synthetic_rejects_bad_arguments(tmp_path):
    with pytest.raises(ValueError):
        make_synthetic(tmp_path, "sphere", 0, 16)
    with pytest.raises(ValueError):
        make_synthetic(tmp_path, "teapot", 1, 16)


# command line


def test_cli_unknown_scene_is_usage_error(tmp_path, capsys):
    assert cli.main(["make-synthetic", "--scene", "teapot", "--out", str(tmp_path)]) == 2
    assert "unknown scene" in capsys.readouterr().err


def test_cli_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"nope": 1}}))
    assert cli.main(["extract-mesh", "--config", str(cfg), "--checkpoint", "x.ckpt"]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert cli.main(["extract-mesh", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2


def test_cli_make_synthetic(tmp_path):
    out = tmp_path / "ds"
    assert cli.main(["make-synthetic", "--scene", "torus", "--views", "2", "--resolution", "16", "--out", str(out)]) == 0
    assert len(load_dataset(out)) == 2


def test_cli_eval_ground_truth_against_itself(tiny_dataset, capsys):
    gt = str(tiny_dataset.root / "gt_mesh.obj")
    assert cli.main(["eval", "--mesh", gt, "--gt-mesh", gt, "--samples", "5000"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["chamfer_l1"] <= 1e-12


def test_cli_gradcheck_exit_status(tmp_path, monkeypatch, capsys):
    ds = make_synthetic(tmp_path / "ds", "two_tone_sphere", 1, 32, seed=0)
    args = ["gradcheck", "--dataset", str(ds.root), "--coords", "6"]
    assert cli.main(args) == 0
    assert "max relative gradient error" in capsys.readouterr().out
    monkeypatch.setattr(cli, "GRADCHECK_TOL", 0.0)
    assert cli.main(args) == 1


def test_cli_render_extract_bake(tmp_path, tiny_dataset):
    cfg = desk_profile()
    field = FieldStack(cfg.field, seed=0)
    ckpt = tmp_path / "f.ckpt"
    save_checkpoint(ckpt, field)
    out = tmp_path / "r"
    assert cli.main(["render", "--checkpoint", str(ckpt), "--dataset", str(tiny_dataset.root), "--views", "1", "--out", str(out)]) == 0
    got = read_pfm(out / "render_0001.pfm")
    ref = render_image(field, tiny_dataset.views[1].camera, cfg.shade, cfg.trace, cfg.edges)[0].detach().numpy()
    assert np.array_equal(got, ref.astype(np.float32))
    assert (out / "render_0001.png").exists()
    assert cli.main(["render", "--checkpoint", str(ckpt), "--dataset", str(tiny_dataset.root), "--views", "9", "--out", str(out)]) == 2

    assert cli.main(["extract-mesh", "--checkpoint", str(ckpt), "--res", "24", "--out", str(tmp_path / "m")]) == 0
    mesh = read_obj(tmp_path / "m" / "mesh.obj")
    assert not mesh.empty
    assert cli.main(["bake-textures", "--checkpoint", str(ckpt), "--mesh", str(tmp_path / "m" / "mesh.obj"), "--res", "16", "--out", str(tmp_path / "a")]) == 0
    assert {p.name for p in (tmp_path / "a").iterdir()} >= {"mesh.obj", "mesh.mtl", "diffuse.png", "specular.png", "roughness.pfm"}


def test_cli_train_writes_artifacts(tmp_path, tiny_dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "dataset": str(tiny_dataset.root),
        "field": {n: {"num_layers": 2, "width": 16} for n in ("sdf", "diffuse", "specular", "roughness")},
        "volume": {"n_samples": 8, "rays_per_step": 16},
        "train": {"iters_stage1": 2, "iters_stage2": 2, "patch_size": 16, "eikonal_uniform": 16, "eikonal_surface": 16},
    }))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    for name in ("config.json", "split.json", "final.ckpt", "stage1.ckpt", "stage2.ckpt", "metrics.ndjson"):
        assert (out / name).exists(), name
    assert json.loads((out / "config.json").read_text())["train"]["seed"] == 5


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "photosdf", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in cli.COMMANDS:
        assert cmd in res.stdout

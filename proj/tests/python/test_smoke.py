import json

import numpy as np
import pytest

import pdse


def test_hu_normalize_window_endpoints():
    raw = np.array([[0, 32768, 65535]], dtype=np.uint16)
    out = pdse.hu_normalize(raw)
    assert out.shape == (1, 3)
    assert out[0, 0] == 0.0
    assert out[0, 1] == 1024.0 / 4095.0
    assert out[0, 2] == 1.0


def test_nms_suppresses_overlap():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30]], dtype=float)
    assert pdse.nms(boxes, [0.9, 0.8, 0.7], 0.5) == [0, 2]


def test_average_precision_perfect_and_empty():
    gt = [[(0, 0, 10, 10)]]
    assert pdse.average_precision([(0, (0, 0, 10, 10), 0.9)], gt) == pytest.approx(1.0)
    assert pdse.average_precision([], [[]]) is None


def test_zero_offset_deformable_matches_conv():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    deform, _ = pdse.deformable_conv2d(x, np.zeros((1, 18, 6, 7)), w)
    conv, _ = pdse.conv2d(x, w, 1, 1)
    assert np.max(np.abs(deform - conv)) < 1e-12


def test_focal_loss_closed_form():
    loss, (grad,) = pdse.focal_loss(np.zeros((1, 1)), [1])
    assert loss[0] == pytest.approx(0.25 * 0.25 * np.log(2.0), abs=1e-12)
    assert grad.shape == (1, 1)


def test_gradient_suite_subset_passes():
    rows = pdse.gradient_suite(instances=3, only=["sigmoid", "se_block"])
    assert [r["name"] for r in rows] == ["sigmoid", "se_block"]
    assert all(r["passed"] for r in rows)


def test_phantoms_detect_and_checkpoint(tmp_path):
    manifest = pdse.generate_phantoms(json.dumps({"count": 3, "seed": 5, "output_dir": str(tmp_path / "ph")}))
    assert len(manifest["images"]) == 3
    pixels = pdse.load_slice(str(tmp_path / "ph" / manifest["images"][0]["file"]))
    assert pixels.dtype == np.uint16 and pixels.shape == (128, 128)

    model = pdse.Model.init(json.dumps({"backbone_blocks": [1, 1, 1, 1], "head_depth": 1}), seed=2)
    dets = model.detect(pixels, score_thresh=0.0)
    assert all(1 <= d["class_id"] <= 9 for d in dets)
    assert model.detect(np.full((128, 128), 32768, dtype=np.uint16), score_thresh=0.5) == []

    model.save(str(tmp_path / "m.ckpt"))
    again = pdse.Model.load(str(tmp_path / "m.ckpt"))
    assert again.num_parameters == model.num_parameters
    assert again.config == model.config
    report = again.evaluate(str(tmp_path / "ph" / "manifest.json"), split="all")
    assert report["mAP"] < 0.05


def test_errors_map_to_python_exceptions(tmp_path):
    with pytest.raises(ValueError):
        pdse.generate_phantoms(json.dumps({"count": 1, "bogus": 1}))
    with pytest.raises(OSError):
        pdse.Model.load(str(tmp_path / "missing.ckpt"))


def test_cli_exit_codes():
    assert pdse.cli(["gradcheck", "--instances", "2", "--only", "relu"]) == 0
    assert pdse.cli(["gradcheck", "--instances", "2", "--only", "relu", "--mutate", "relu"]) == 2
    assert pdse.cli(["train", "--config", "/nonexistent.json"]) == 1

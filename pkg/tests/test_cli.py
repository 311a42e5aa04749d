import json

import numpy as np
import pytest

from objvid3d.autodiff import container
from objvid3d.cli import main
from objvid3d.model import ModelConfig, RunConfig

PANELS = ("input", "reconstruction", "background", "objects")


def _block(out: str, title: str) -> dict:
    start = out.index(f"=== {title} ===") + len(f"=== {title} ===")
    return json.loads(out[start : out.index(f"=== end {title} ===")])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data.json").write_text(json.dumps({"height": 16, "width": 16, "length": 2, "max_objects": 2}))
    assert main(["make-dataset", "--config", str(root / "data.json"), "--count", "10", "--out", str(root / "d"),
                 "--seed", "3"]) == 0
    run = RunConfig.toy(
        model=ModelConfig.toy(voxel_res=4, height=16, width=16, grid=(2, 1, 1), frames=2),
        batch_size=2, steps=4, checkpoint_every=4, log_every=1, dataset=str(root / "d"),
    )
    run.save(root / "run.json")
    assert main(["train", "--config", str(root / "run.json"), "--out", str(root / "run")]) == 0
    return root


def test_make_dataset_count_and_hash(workspace, tmp_path, capsys):
    assert main(["make-dataset", "--config", str(workspace / "data.json"), "--count", "10", "--out",
                 str(tmp_path / "again"), "--seed", "3"]) == 0
    info = _block(capsys.readouterr().out, "dataset")
    assert info["sequences"] == 10 and info["splits"] == {"train": 8, "val": 1, "test": 1}
    manifest = json.loads((workspace / "d" / "manifest.json").read_text())
    assert len(manifest["sequences"]) == 10
    from objvid3d.data import manifest_hash

    assert info["manifest_sha256"] == manifest_hash(workspace / "d")


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "checkpoints" / "step_0000004" / "model.json").exists()
    assert (run / "loss.png").exists() and (run / "config.json").exists()


def test_train_resume_extends(workspace, capsys, tmp_path):
    import shutil

    shutil.copytree(workspace / "run", tmp_path / "run")
    assert main(["train", "--config", str(workspace / "run.json"), "--out", str(tmp_path / "run"), "--steps", "6"]) == 0
    assert _block(capsys.readouterr().out, "train")["steps"] == 6


def test_reconstruct_panels(workspace, tmp_path):
    out = tmp_path / "rec"
    assert main(["reconstruct", str(workspace / "run"), "--split", "test", "--out", str(out)]) == 0
    seq = next(p for p in out.iterdir() if p.is_dir())
    for f in range(2):
        for kind in PANELS:
            assert (seq / f"frame{f:02d}_{kind}.ppm").exists()
    masks = container.load(seq / "masks.o3vt")
    depth = container.load(seq / "depth.o3vt")
    assert masks.shape == depth.shape == (2, 16, 16)
    assert "boxes" in json.loads((seq / "boxes.json").read_text())
    assert (seq / "panels.png").exists() and (out / "config.json").exists()


def test_generate_reproducible(workspace, tmp_path, capsys):
    args = ["generate", str(workspace / "run"), "--seed", "4", "--count", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    first = _block(capsys.readouterr().out, "generate")["samples"]
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    second = _block(capsys.readouterr().out, "generate")["samples"]
    assert first == second and len(first) == 3
    assert all(s["rgb_min"] >= 0 and s["rgb_max"] <= 1 and s["depth_finite"] for s in first)
    assert all(len(s["presence"]) == 2 for s in first)


def test_evaluate_report_and_determinism(workspace, tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["evaluate", str(workspace / "run"), "--split", "val", "--out", str(tmp_path / name)]) == 0
    out = capsys.readouterr().out
    assert (tmp_path / "a" / "metrics.json").read_text() == (tmp_path / "b" / "metrics.json").read_text()
    metrics = _block(out, "metrics")["metrics"]
    for k in ("fg_iou", "sc", "msc", "sc_track", "msc_track", "mre", "frac125", "ap_3d"):
        assert k in metrics
    assert (tmp_path / "a" / "metrics.csv").exists() and (tmp_path / "a" / "metrics.png").exists()


def test_evaluate_missing_gt_is_unavailable(workspace, tmp_path, capsys):
    import shutil

    shutil.copytree(workspace / "d", tmp_path / "d")
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    for name in manifest["splits"]["test"]:
        (tmp_path / "d" / name / "masks.o3vt").unlink()
    assert main(["evaluate", str(workspace / "run"), "--dataset", str(tmp_path / "d"), "--split", "test",
                 "--out", str(tmp_path / "e")]) == 0
    block = _block(capsys.readouterr().out, "metrics")
    assert "fg_iou" in block["unavailable"] and block["metrics"]["mre"] is not None


def test_usage_errors_exit_1(workspace, tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == 1
    assert main(["evaluate", str(tmp_path / "nothing")]) == 1
    assert main(["train", "--dataset", str(tmp_path / "missing")]) == 1
    # model resolution differs from the dataset's frames
    bad = RunConfig.toy(dataset=str(workspace / "d"), steps=1)
    bad.save(tmp_path / "bad.json")
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "bad")]) == 1
    assert "16x16" in capsys.readouterr().err


def test_grad_check_passes_and_detects_fault(capsys):
    assert main(["grad-check", "--scope", "tensor-core"]) == 0
    import objvid3d.autodiff as ad

    with ad.inject_fault("tanh"):
        assert main(["grad-check", "--scope", "tensor-core"]) == 2
    out = capsys.readouterr().out
    failing = [line for line in out.splitlines() if line.endswith("FAIL")]
    assert failing == ["tensor-core,tanh,%s,FAIL" % failing[0].split(",")[2]]

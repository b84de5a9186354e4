import json
import struct

import numpy as np
import pytest

from viflow import geometry, io
from viflow.cli import main
from viflow.data.dataset import load_dataset
from viflow.training import load_checkpoint

DATASET = {"image_size": 16, "focal": 14.0, "trajectories": 1, "duration_s": 2.0,
           "anomaly_exemplars": 1}
MODEL = {"fc_sizes": [16, 16], "conv_filters": [4, 8], "bridge_fc": 16, "kernel_size": 3}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "cfg.json", {"dataset": DATASET, "model": MODEL,
                                         "train": {"batch_size": 4, "learning_rate": 1e-3}})
    assert main(["gen-data", "--config", cfg, "--seed", "1", "--out", str(root / "data")]) == 0
    return root, cfg


def test_gen_data_loadable_and_deterministic(workspace, tmp_path):
    root, cfg = workspace
    ds = load_dataset(root / "data")
    assert set(ds.counts()) == {"train", "test", "anomaly"}
    assert main(["gen-data", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "again")]) == 0
    for rel in ("index.json", "codebook.vift", f"tensors/{ds.split('train').ids[0]}.source.vift"):
        assert (tmp_path / "again" / rel).read_bytes() == (root / "data" / rel).read_bytes()


def test_gen_data_rejects_unknown_keys(tmp_path, capsys):
    bad = write_json(tmp_path / "bad.json", {"dataset": {"image_sise": 16}})
    assert main(["gen-data", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert "image_sise" in capsys.readouterr().err
    top = write_json(tmp_path / "top.json", {"datasets": {}})
    assert main(["gen-data", "--config", top, "--out", str(tmp_path / "y")]) == 2


def test_train_zero_steps_then_eval_matches_identity(workspace, tmp_path):
    root, cfg = workspace
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--steps", "0",
                 "--out", str(run)]) == 0
    model, state, meta = load_checkpoint(run / "checkpoint.vifw")
    assert meta["step"] == 0 and state is not None
    assert len((run / "report.jsonl").read_text().splitlines()) == 1
    dump = tmp_path / "flo"
    assert main(["eval", str(run / "checkpoint.vifw"), "--data", str(root / "data"), "--repetitions", "1",
                 "--flo-dump", str(dump), "--out", str(run)]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["epe"]["mean"] == pytest.approx(metrics["identity"]["mean"], abs=1e-3)
    assert sorted(metrics) == ["count", "epe", "identity", "quotient", "runtime_ms", "split",
                               "winner_histogram"]
    flo = sorted(dump.iterdir())
    assert len(flo) == metrics["count"]
    assert struct.unpack("<f", flo[0].read_bytes()[:4])[0] == 202021.25


def test_train_repeat_keeps_best_and_resume(workspace, tmp_path):
    root, cfg = workspace
    run = tmp_path / "rep"
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--steps", "2", "--repeat", "3",
                 "--out", str(run)]) == 0
    summary = json.loads((run / "summary.json").read_text())
    epes = [r["test_epe_mean"] for r in summary["runs"]]
    assert summary["best"]["seed"] == int(np.argmin(epes))
    best = (run / f"checkpoint.seed{summary['best']['seed']}.vifw").read_bytes()
    assert (run / "checkpoint.vifw").read_bytes() == best

    straight, split = tmp_path / "straight", tmp_path / "split"
    common = ["--config", cfg, "--data", str(root / "data")]
    assert main(["train", *common, "--steps", "4", "--out", str(straight)]) == 0
    assert main(["train", *common, "--steps", "2", "--out", str(split / "a")]) == 0
    assert main(["train", *common, "--steps", "2", "--resume", str(split / "a" / "checkpoint.vifw"),
                 "--out", str(split / "b")]) == 0
    a, _, _ = load_checkpoint(straight / "checkpoint.vifw")
    b, _, meta = load_checkpoint(split / "b" / "checkpoint.vifw")
    assert meta["step"] == 4
    for n in a.params:
        assert np.array_equal(a.params[n].value, b.params[n].value)


def test_eval_mismatch_exit_code(workspace, tmp_path):
    root, _ = workspace
    cfg = write_json(tmp_path / "c.json", {"model": {**MODEL, "input_size": 32}})
    data32 = tmp_path / "d32"
    assert main(["gen-data", "--config", write_json(tmp_path / "d.json", {"dataset": {
        **DATASET, "image_size": 32, "focal": 28.0, "anomaly_exemplars": 0}}), "--out", str(data32)]) == 0
    assert main(["train", "--config", cfg, "--data", str(data32), "--steps", "0",
                 "--out", str(tmp_path / "m")]) == 0
    assert main(["eval", str(tmp_path / "m" / "checkpoint.vifw"), "--data", str(root / "data"),
                 "--out", str(tmp_path)]) == 5


def test_missing_checkpoint_is_io_error(workspace, tmp_path):
    root, _ = workspace
    assert main(["eval", str(tmp_path / "nope.vifw"), "--data", str(root / "data")]) == 3
    (tmp_path / "bad.vifw").write_bytes(b"XXXX")
    assert main(["eval", str(tmp_path / "bad.vifw"), "--data", str(root / "data")]) == 3


def gt_input(tmp_path, pose_t1):
    depth = np.full((8, 10), 2.0, dtype=np.float32)
    io.save_vift(tmp_path / "depth.vift", depth)
    return write_json(tmp_path / "in.json", {"intrinsics": [100.0, 100.0, 4.5, 3.5],
                                             "pose_t0": np.eye(4).tolist(), "pose_t1": pose_t1,
                                             "depth": "depth.vift"})


def test_gt_flow_equal_poses_and_library_match(tmp_path):
    assert main(["gt-flow", gt_input(tmp_path, np.eye(4).tolist()), "--out", str(tmp_path / "o")]) == 0
    assert not io.load_flo(tmp_path / "o" / "flow.flo").any()

    pose = np.eye(4)
    pose[0, 3] = 0.01
    assert main(["gt-flow", gt_input(tmp_path, pose.tolist()), "--out", str(tmp_path / "p")]) == 0
    lib = geometry.ground_truth_flow(geometry.CameraIntrinsics(100.0, 100.0, 4.5, 3.5),
                                     geometry.DepthMap(np.full((8, 10), 2.0)),
                                     geometry.PoseSE3.identity(), geometry.PoseSE3(pose))
    assert np.array_equal(io.load_flo(tmp_path / "p" / "flow.flo"), lib.vectors.astype(np.float32))
    assert np.array_equal(io.load_vift(tmp_path / "p" / "valid.vift") > 0, lib.valid)


def test_gt_flow_invalid_pose_exit_2(tmp_path):
    skew = np.eye(4)
    skew[0, 1] = 0.5
    assert main(["gt-flow", gt_input(tmp_path, skew.tolist()), "--out", str(tmp_path)]) == 2
    assert main(["gt-flow", gt_input(tmp_path, [[1, 0], [0, 1]]), "--out", str(tmp_path)]) == 2
    assert main(["gt-flow", write_json(tmp_path / "m.json", {"intrinsics": [1, 1, 0, 0]}),
                 "--out", str(tmp_path)]) == 2


def test_anomaly_gt_warp_outputs_are_deterministic(workspace, tmp_path):
    root, _ = workspace
    for out in ("a", "b"):
        assert main(["anomaly", "--data", str(root / "data"), "--gt-warp", "--out", str(tmp_path / out)]) == 0
    for name in ("residual.pgm", "rois.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    report = json.loads((tmp_path / "a" / "rois.json").read_text())
    assert len(report["patch_overlap"]) == len(report["rois"])
    assert io.load_pnm(tmp_path / "a" / "residual.pgm").shape == (16, 16)


def test_anomaly_rigid_gt_warp_has_no_rois(workspace, tmp_path):
    root, _ = workspace
    assert main(["anomaly", "--data", str(root / "data"), "--split", "test", "--gt-warp",
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "rois.json").read_text())["rois"] == []


def test_anomaly_with_model_and_errors(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--steps", "0",
                 "--out", str(tmp_path / "m")]) == 0
    assert main(["anomaly", str(tmp_path / "m" / "checkpoint.vifw"), "--data", str(root / "data"),
                 "--out", str(tmp_path / "o")]) == 0
    assert main(["anomaly", "--data", str(root / "data"), "--out", str(tmp_path)]) == 5
    assert main(["anomaly", "--data", str(root / "data"), "--gt-warp", "--index", "99",
                 "--out", str(tmp_path)]) == 5


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seeds", "2"]) == 0
    table = capsys.readouterr().out
    for op in ("fully_connected", "conv2d[stride=2]", "conv_transpose2d", "bilinear_sample[grid]"):
        assert op in table
    assert "FAIL" not in table

"""Command-line entry point: ``viflow <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration or input error, 3 I/O or format error,
4 training divergence, 5 checkpoint/dataset mismatch.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_MISMATCH = 5

CONFIG_SECTIONS = ("dataset", "model", "train")


class Mismatch(Exception):
    """Checkpoint and dataset (or exemplar) are incompatible."""


def _load_config(path) -> dict:
    from viflow.errors import ConfigError

    if path is None:
        return {}
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(cfg) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return cfg


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    from viflow.data.dataset import DatasetConfig, build_dataset, save_dataset

    cfg = DatasetConfig.from_dict(_load_config(args.config).get("dataset", {}))
    dataset = build_dataset(args.seed, cfg)
    out = _out_dir(args)
    save_dataset(dataset, out)
    counts = dataset.counts()
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _model_config(cfg, dataset):
    from viflow.model import desk_config

    overrides = dict(cfg.get("model", {}))
    overrides.setdefault("input_size", dataset.config.image_size)
    overrides.setdefault("imu_rows", dataset.config.imu_rows)
    return desk_config(**overrides)


def _check_compatible(model, dataset):
    mc, dc = model.config, dataset.config
    if mc.input_size != dc.image_size:
        raise Mismatch(f"model expects {mc.input_size}px images, dataset has {dc.image_size}px")
    if mc.uses_imu and mc.imu_rows != dc.imu_rows:
        raise Mismatch(f"model expects {mc.imu_rows} IMU rows, dataset has {dc.imu_rows}")


def cmd_train(args) -> int:
    from viflow.data.dataset import load_dataset
    from viflow.evaluation import evaluate_model
    from viflow.model import build_model
    from viflow.training import TrainConfig, load_checkpoint, save_checkpoint, train

    cfg = _load_config(args.config)
    dataset = load_dataset(args.data)
    train_opts = dict(cfg.get("train", {}))
    if args.steps is not None:
        train_opts["max_steps"] = args.steps
    out = _out_dir(args)
    summary = {"runs": []}
    best = None
    for r in range(args.repeat):
        seed = args.seed + r
        tcfg = TrainConfig.from_dict({**train_opts, "seed": seed})
        state, start = None, 0
        if args.resume:
            model, state, meta = load_checkpoint(args.resume)
            start = int(meta.get("step", 0))
        else:
            model = build_model(_model_config(cfg, dataset), seed)
        _check_compatible(model, dataset)
        suffix = f".seed{seed}" if args.repeat > 1 else ""
        report = train(model, dataset, tcfg, os.path.join(out, f"report{suffix}.jsonl"),
                       state=state, start_step=start)
        ckpt = os.path.join(out, f"checkpoint{suffix}.vifw")
        save_checkpoint(ckpt, model, report.state, tcfg, report.steps)
        epe = report.final.get("test_epe", {}).get("mean")
        if epe is None and "test" in dataset.splits:
            epe = evaluate_model(model, dataset.split("test")).epe.mean
        summary["runs"].append({"seed": seed, "checkpoint": ckpt, "test_epe_mean": epe})
        print(f"seed {seed}: held-out mean EPE {epe}")
        if best is None or (epe is not None and epe < best["test_epe_mean"]):
            best = summary["runs"][-1]
    summary["best"] = best
    if args.repeat > 1:
        with open(best["checkpoint"], "rb") as src, open(os.path.join(out, "checkpoint.vifw"), "wb") as dst:
            dst.write(src.read())
    _write_json(os.path.join(out, "summary.json"), summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from viflow import io
    from viflow.data.dataset import load_dataset
    from viflow.evaluation import evaluate_model, measure_runtime, perf_runtime_quotient, predict_batch
    from viflow.training import load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    _check_compatible(model, dataset)
    split = dataset.split(args.split)
    result = evaluate_model(model, split)
    runtime = measure_runtime(model, split.exemplar(0), repetitions=args.repetitions)
    metrics = {
        "split": args.split,
        "count": len(split),
        "epe": result.epe.to_dict(),
        "identity": result.identity.to_dict(),
        "runtime_ms": runtime,
        "quotient": perf_runtime_quotient(result.epe.mean, runtime),
        "winner_histogram": result.winner_histogram(model.config.hypothesis_count),
    }
    out = _out_dir(args)
    if args.flo_dump:
        os.makedirs(args.flo_dump, exist_ok=True)
        for start in range(0, len(split), 32):
            sl = slice(start, start + 32)
            flow, _, _ = predict_batch(model, split.sources[sl], split.targets[sl],
                                       split.imu_batch(sl), split.sffms_batch(sl))
            for i, f in enumerate(flow):
                io.save_flo(os.path.join(args.flo_dump, f"{split.ids[start + i]}.flo"),
                            np.asarray(f, dtype=np.float32))
    _write_json(os.path.join(out, "metrics.json"), metrics)
    print(json.dumps({"epe_mean": metrics["epe"]["mean"], "identity_mean": metrics["identity"]["mean"],
                      "runtime_ms": runtime}))
    return EXIT_OK


def cmd_gt_flow(args) -> int:
    import numpy as np

    from viflow import geometry, io
    from viflow.errors import ConfigError, FormatError, ShapeError

    with open(args.input) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.input}: not valid JSON ({exc})") from None
    allowed = {"intrinsics", "pose_t0", "pose_t1", "depth", "depth_t1", "occlusion_tol"}
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise ConfigError(f"{args.input}: unknown keys {unknown}")
    missing = sorted({"intrinsics", "pose_t0", "pose_t1", "depth"} - set(spec))
    if missing:
        raise ConfigError(f"{args.input}: missing keys {missing}")
    base = os.path.dirname(os.path.abspath(args.input))
    try:
        k = geometry.CameraIntrinsics(*[float(v) for v in spec["intrinsics"]])
        h0 = geometry.PoseSE3(np.asarray(spec["pose_t0"], dtype=np.float64))
        h1 = geometry.PoseSE3(np.asarray(spec["pose_t1"], dtype=np.float64))
        depth0 = geometry.DepthMap(io.load_vift(os.path.join(base, spec["depth"])).astype(np.float64))
        depth1 = None
        if spec.get("depth_t1"):
            depth1 = geometry.DepthMap(
                io.load_vift(os.path.join(base, spec["depth_t1"])).astype(np.float64))
        flow = geometry.ground_truth_flow(k, depth0, h0, h1, depth1,
                                          float(spec.get("occlusion_tol", 0.01)))
    except FormatError:
        raise
    except (ShapeError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.input}: malformed input ({exc})") from None
    out = _out_dir(args)
    io.save_flo(os.path.join(out, "flow.flo"), flow.vectors)
    io.save_vift(os.path.join(out, "valid.vift"), flow.valid.astype(np.float32))
    print(f"valid pixels: {int(flow.valid.sum())}/{flow.valid.size}")
    return EXIT_OK


def cmd_anomaly(args) -> int:
    import numpy as np

    from viflow import geometry, io
    from viflow.data.dataset import load_dataset
    from viflow.evaluation import anomaly_blobs, classify_roi, residual_map
    from viflow.model import export_flow, forward, reconstruct
    from viflow.training import wta_select

    dataset = load_dataset(args.data)
    split = dataset.split(args.split)
    if not 0 <= args.index < len(split):
        raise Mismatch(f"exemplar index {args.index} out of range for split {args.split!r} ({len(split)})")
    ex = split.exemplar(args.index)
    if args.gt_warp:
        recon = geometry.bilinear_sample(ex.target, geometry.flow_to_grid(ex.flow))
        valid = ex.flow.valid
    else:
        if not args.checkpoint:
            raise Mismatch("a checkpoint is required unless --gt-warp is given")
        from viflow.training import load_checkpoint

        model, _, _ = load_checkpoint(args.checkpoint)
        _check_compatible(model, dataset)
        hyps = forward(model, ex.source, ex.motion)
        recons = reconstruct(hyps, ex.target)
        outcome = wta_select(recons, ex.source)
        recon = recons[outcome.winner]
        valid = geometry.make_base_grid(*ex.source.data.shape).in_bounds()
        valid &= export_flow(hyps, outcome.winner).valid
        # pixels that sample outside the target have no reconstruction
        valid &= hyps.grids[outcome.winner].in_bounds()
    residual = residual_map(ex.source, recon, valid)
    rois = anomaly_blobs(residual, threshold=args.threshold)
    out = _out_dir(args)
    io.save_pgm(os.path.join(out, "residual.pgm"), np.clip(residual.data, 0.0, 1.0))
    report = {"exemplar": split.ids[args.index], "split": args.split, "threshold": args.threshold,
              "rois": [r.to_dict() for r in rois]}
    if ex.patch_mask is not None:
        mask = np.asarray(ex.patch_mask, dtype=bool)
        report["patch_overlap"] = [
            int(sum(mask[rr, cc] for rr, cc in r.pixels)) for r in rois]
    _write_json(os.path.join(out, "rois.json"), report)
    print(f"{len(rois)} ROI(s): " + ", ".join(f"{classify_roi(r)}@{r.bbox}" for r in rois))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from viflow.gradcheck import format_table, run_suite

    results = run_suite(seeds=args.seeds)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return 1
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with optional dataset/model/train sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--threads", type=int, help="BLAS thread count (1 gives bitwise determinism)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="viflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model with the WTA loss")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--steps", type=int, help="override train.max_steps")
    p.add_argument("--repeat", type=int, default=1, help="train n seeds, keep the best held-out EPE")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="EPE, runtime and quotient of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--repetitions", type=int, default=11)
    p.add_argument("--flo-dump", help="directory for per-exemplar .flo predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gt-flow", parents=[common], help="ground-truth flow from depth and poses")
    p.add_argument("input", help="JSON with intrinsics, pose_t0, pose_t1, depth[, depth_t1]")
    p.set_defaults(func=cmd_gt_flow)

    p = sub.add_parser("anomaly", parents=[common], help="residual map and anomaly regions")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="anomaly")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--gt-warp", action="store_true", help="reconstruct with the ground-truth flow")
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(func=cmd_anomaly)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        # only effective before numpy first loads its BLAS
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from viflow.errors import (ConfigError, ContractError, DivergenceError, FormatError,
                               InvalidDimensionError, InvalidParameterError, InvalidPoseError,
                               ShapeError)

    try:
        return args.func(args)
    except (ConfigError, InvalidPoseError, InvalidParameterError, InvalidDimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (Mismatch, ShapeError, ContractError) as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Batch command-line interface: ``spunet <command> ...``.

Every command exits 0 on success. Failures print exactly one line to stderr,

    spunet: error: <kind>: <message>

and exit with status 2 for bad input (missing files, malformed data, bad
config) or 1 for anything else.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import io as sio
from .geometry import DegeneratePatchError, geodesic_patches
from .metrics import evaluate
from .training import (
    Trainer,
    TrainConfig,
    atomic_write_bytes,
    cloud_patches,
    gradcheck_network,
    load_checkpoint,
    upsample_cloud,
)

log = logging.getLogger("spunet")

POINT_EXTENSIONS = (".xyz", ".txt", ".pts", ".ply", ".obj")
INPUT_ERRORS = (FileNotFoundError, IsADirectoryError, sio.FormatError, sio.ConfigError, DegeneratePatchError)


class UsageError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parent_dir(path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    return path


def cmd_sample_mesh(args):
    mesh = sio.read_mesh(args.mesh)
    pts = sio.sample_mesh(mesh, args.n, mode=args.mode, seed=args.seed)
    sio.write_xyz(parent_dir(args.output), pts)
    log.info("wrote %d points to %s", len(pts), args.output)


def cmd_make_patches(args):
    cloud = sio.read_points(args.cloud)
    os.makedirs(args.outdir, exist_ok=True)
    entries = []
    for i, patch in enumerate(geodesic_patches(cloud, args.patches, args.size, args.graph_k)):
        name = f"patch_{i:04d}.xyz"
        sio.write_xyz(os.path.join(args.outdir, name), patch.points)
        entries.append({
            "file": name,
            "center": patch.center.tolist(),
            "scale": float(patch.scale),
            "source_indices": patch.source_indices.tolist(),
        })
    manifest = {"source": os.path.basename(args.cloud), "patch_size": args.size, "patches": entries}
    atomic_write_bytes(os.path.join(args.outdir, "manifest.json"), (json.dumps(manifest, indent=1) + "\n").encode())
    log.info("wrote %d patches to %s", len(entries), args.outdir)


def load_training_patches(dataset_dir, config):
    """Patches from a ``make-patches`` directory, or cut from every cloud file."""
    if not os.path.isdir(dataset_dir):
        raise FileNotFoundError(f"dataset_dir {dataset_dir!r} is not a directory")
    manifest = os.path.join(dataset_dir, "manifest.json")
    if os.path.exists(manifest):
        with open(manifest) as fh:
            entries = json.load(fh)["patches"]
        patches = [sio.read_xyz(os.path.join(dataset_dir, e["file"])) for e in entries]
        bad = [e["file"] for e, p in zip(entries, patches) if p.shape != (config.N, 3)]
        if bad:
            raise sio.ConfigError(f"patches {bad[:3]} do not hold N={config.N} points")
        return np.stack(patches)
    files = sorted(f for f in glob.glob(os.path.join(dataset_dir, "*")) if f.lower().endswith(POINT_EXTENSIONS))
    if not files:
        raise FileNotFoundError(f"no point files in {dataset_dir!r}")
    return cloud_patches([sio.read_points(f) for f in files], config)


def cmd_train(args):
    config, paths = sio.load_config(args.config)
    out = paths.get("output_dir", ".")
    os.makedirs(out, exist_ok=True)
    ckpt = paths.get("checkpoint_path", os.path.join(out, "checkpoint.npz"))
    log_path = paths.get("log_path", os.path.join(out, "train.log"))
    if "dataset_dir" not in paths:
        raise sio.ConfigError("config lacks dataset_dir")
    patches = load_training_patches(paths["dataset_dir"], config)
    parent_dir(ckpt)
    parent_dir(log_path)
    if args.resume and os.path.exists(ckpt):
        trainer = Trainer.from_checkpoint(ckpt, patches)
        if trainer.config != config:
            raise sio.ConfigError(f"{ckpt} was written with a different config")
        log.info("resuming from step %d", trainer.step)
    else:
        trainer = Trainer(config, patches)
        if os.path.exists(log_path):
            os.unlink(log_path)
    steps = trainer.total_steps - trainer.step
    if args.steps is not None:
        steps = min(steps, args.steps)
    log.info("training on %d patches for %d steps", len(patches), steps)
    trainer.run(steps, log_path=log_path)
    trainer.save(ckpt)
    log.info("checkpoint at step %d written to %s", trainer.step, ckpt)


def cmd_upsample(args):
    net, config, _ = load_checkpoint(args.checkpoint)
    cloud = sio.read_points(args.input)
    dense = upsample_cloud(cloud, net, config, n_patches=args.patches, seed=args.seed)
    sio.write_xyz(parent_dir(args.output), dense)
    log.info("wrote %d points to %s", len(dense), args.output)


def cmd_eval(args):
    pred = sio.read_points(args.pred)
    gt = sio.read_points(args.gt)
    mesh = sio.read_mesh(args.mesh) if args.mesh else None
    report = evaluate(pred, gt, mesh, n_seeds=args.seeds)
    # tables in the literature quote metrics in units of 1e-3
    for key, value in report.flat().items():
        if key.startswith("n_"):
            print(f"{key}\t{value}")
        else:
            print(f"{key}_x1e3\t{value * 1e3!r}")
    if args.report:
        parent_dir(args.report)
        atomic_write_bytes(args.report + ".txt", report.to_text().encode())
        atomic_write_bytes(args.report + ".json", (report.to_json() + "\n").encode())


def cmd_gradcheck(args):
    config = sio.load_config(args.config)[0] if args.config else TrainConfig.desk()
    res = gradcheck_network(config, seed=args.seed, max_slots=args.max_slots)
    verdict = "PASS" if res.max_error < args.tol else "FAIL"
    print(f"max_relative_error={res.max_error!r} probed={res.probed} skipped={res.skipped} "
          f"worst={res.worst_slot or '-'} {verdict}")
    return 0 if verdict == "PASS" else 1


def build_parser():
    parser = Parser(prog="spunet", description="Self-supervised point-cloud upsampling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-mesh", help="sample a point cloud from a mesh surface")
    p.add_argument("mesh")
    p.add_argument("output")
    p.add_argument("-n", type=int, default=2048)
    p.add_argument("--mode", choices=["poisson-disk", "area-weighted"], default="poisson-disk")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample_mesh)

    p = sub.add_parser("make-patches", help="cut normalized geodesic patches out of a cloud")
    p.add_argument("cloud")
    p.add_argument("outdir")
    p.add_argument("--patches", type=int, default=24)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--graph-k", type=int, default=5)
    p.set_defaults(func=cmd_make_patches)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("config")
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--resume", action="store_true", help="continue from the configured checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upsample", help="upsample a whole cloud with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--patches", type=int, help="patch count (default covers the cloud about 3x)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("eval", help="compare a prediction with ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--mesh", help="surface mesh for the point-to-face distance")
    p.add_argument("--report", help="write <REPORT>.txt and <REPORT>.json")
    p.add_argument("--seeds", type=int, default=50, help="seed regions for the uniformity score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network and loss")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-slots", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def fail(kind, message, status):
    text = " ".join(str(message).split())
    print(f"spunet: error: {kind}: {text}", file=sys.stderr)
    return status


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return fail("UsageError", exc, 2)
    except SystemExit as exc:  # --help
        return exc.code or 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args) or 0
    except INPUT_ERRORS as exc:
        return fail(type(exc).__name__, exc, 2)
    except (ValueError, KeyError) as exc:
        return fail(type(exc).__name__, exc, 2)
    except Exception as exc:  # noqa: BLE001 - the CLI contract is one error line
        return fail(type(exc).__name__, exc, 1)


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``voxelrec <command> [flags]``.

Every command accepts ``--config FILE`` (flat ``key=value``); explicit
flags take precedence over the file. Exit codes: 0 success, 1 runtime or
data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ConfigError, RunConfig, coerce, network_from_kv, network_to_kv, read_kv
from .datagen import FACTORS, factor_batches, make_dataset, read_dataset, write_dataset
from .mesh import marching_cubes, write_obj
from .model import Model, NetworkConfig, load_weights, save_weights
from .train import TrainConfig, train

log = logging.getLogger("voxelrec")

WEIGHTS_NAME = "weights.vxrc"
METRICS_NAME = "metrics.csv"
RUN_NAME = "run.cfg"

# key -> (default, help); None default means required
GEN_KEYS = {
    "family": ("head", "shape family: head or chair"),
    "shapes": (None, "number of distinct shapes"),
    "res": (32, "volume resolution: 30, 32 or 80"),
    "image_size": (0, "image size (0: derived from res)"),
    "video": (False, "render 5-frame videos instead of 15 still pairs"),
    "seed": (0, "random seed"),
    "first_shape_id": (0, "id of the first generated shape"),
    "out": (None, "output dataset directory"),
}
TRAIN_KEYS = {
    "data": (None, "training dataset directory"),
    "mode": ("volume", "volume or twin"),
    "batchnorm": (True, "on/off"),
    "fc3000": (None, "on/off (default: on for twin mode, video and chair data)"),
    "epochs": (1, "passes over the data"),
    "lr": (0.001, "Adam learning rate"),
    "batch_size": (10, "examples per batch"),
    "switch_period": (3, "batches per decoder in twin mode"),
    "seed": (0, "random seed for initialisation and ordering"),
    "out": (None, "output directory for weights, metrics and run.cfg"),
}
PREDICT_KEYS = {
    "model": (None, "trained model directory"),
    "data": (None, "dataset directory whose images are reconstructed"),
    "indices": ("", "comma separated item indices (default: all)"),
    "out": (None, "output .npy file of continuous volumes"),
}
MESH_KEYS = {
    "volume": (None, ".npy volume file (R^3 or N x R^3)"),
    "index": (0, "item of a stacked volume file"),
    "family": ("", "head or chair; picks the default threshold"),
    "threshold": (-1.0, "binarization threshold (default 0.01 head, 0.2 chair)"),
    "smooth": (False, "apply 2 Laplacian smoothing iterations"),
    "out": (None, "output .obj file"),
}
EVAL_KEYS = {
    "suite": (None, "nn, invariance, rank, video or interp"),
    "model": (None, "trained model directory"),
    "data": (None, "test dataset directory"),
    "train_data": ("", "training dataset (nn suite)"),
    "image_model": ("", "single-image model directory (video suite)"),
    "threshold": (-1.0, "binarize predictions before scoring (negative: continuous)"),
    "trials": (100, "rank trials"),
    "gallery": (150, "rank gallery size"),
    "factor": ("pose", "rank factor: pose or lighting"),
    "batches": (100, "factor batches per factor (invariance)"),
    "batch_size": (3, "images per factor batch (invariance)"),
    "pairs": (20, "code-swap pairs (interp)"),
    "seed": (0, "random seed"),
    "out": (None, "report directory"),
}
SUITES = ("nn", "invariance", "rank", "video", "interp")

COMMANDS = {
    "gen-data": GEN_KEYS,
    "train": TRAIN_KEYS,
    "predict": PREDICT_KEYS,
    "export-mesh": MESH_KEYS,
    "eval": EVAL_KEYS,
}
CHOICES = {
    ("gen-data", "family"): ("head", "chair"),
    ("gen-data", "res"): (30, 32, 80),
    ("train", "mode"): ("volume", "twin"),
    ("export-mesh", "family"): ("", "head", "chair"),
    ("eval", "suite"): SUITES,
    ("eval", "factor"): ("pose", "lighting"),
}


class UsageError(Exception):
    pass


REQUIRED_TYPES = {"shapes": int}


def _flag_type(key, default):
    if key in REQUIRED_TYPES:
        return REQUIRED_TYPES[key]
    if isinstance(default, bool) or default is None:
        return str
    return type(default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxelrec", description="Voxel reconstruction from images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value configuration file")
        for key, (default, help_) in keys.items():
            flag = "--" + key.replace("_", "-")
            choices = CHOICES.get((name, key))
            if key in ("video", "smooth"):
                p.add_argument(flag, action="store_const", const="true", default=None, help=help_)
            elif isinstance(default, bool) or key == "fc3000":
                p.add_argument(flag, choices=("on", "off"), default=None, help=help_)
            else:
                p.add_argument(flag, type=_flag_type(key, default), choices=choices, default=None, help=help_)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags, coercing file values."""
    keys = COMMANDS[command]
    from_file = read_kv(args.config) if args.config else {}
    unknown = set(from_file) - set(keys)
    if unknown:
        raise UsageError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    out = {}
    for key, (default, _) in keys.items():
        flag = getattr(args, key)
        if flag is not None:
            value = flag
        elif key in from_file:
            value = from_file[key]
        else:
            value = default
        like = REQUIRED_TYPES[key](0) if key in REQUIRED_TYPES else default
        if isinstance(value, str) and like is not None and not isinstance(like, str):
            try:
                value = coerce(value, like)
            except ConfigError as e:
                raise UsageError(f"{key}: {e}") from None
        elif key == "fc3000" and isinstance(value, str):
            value = coerce(value, True)
        if value is None and default is None and key != "fc3000":
            raise UsageError(f"missing required setting --{key.replace('_', '-')}")
        choices = CHOICES.get((command, key))
        if choices and value not in choices:
            raise UsageError(f"{key} must be one of {choices}, got {value!r}")
        out[key] = value
    return out


def _thread_limit():
    n = os.environ.get("VOXELREC_THREADS")
    if not n:
        return nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise UsageError(f"VOXELREC_THREADS must be an integer, got {n!r}") from None
    if limit < 1:
        raise UsageError("VOXELREC_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(s: dict) -> int:
    if s["shapes"] < 1:
        raise UsageError("--shapes must be >= 1")
    ds = make_dataset(s["shapes"], s["family"], s["res"], video=bool(s["video"]), seed=s["seed"],
                      image_size=s["image_size"] or None, first_shape_id=s["first_shape_id"])
    write_dataset(ds, s["out"])
    RunConfig("gen-data", s).write(s["out"])
    print(f"wrote {len(ds)} examples to {s['out']}")
    return 0


def network_for(ds, batchnorm: bool, fc3000, seed: int, twin: bool = False) -> NetworkConfig:
    res = ds.volumes.shape[1]
    kw = dict(image_size=ds.images.shape[-1], volume_res=res, frames=ds.frames, use_batchnorm=batchnorm, seed=seed)
    if res == 30:
        kw.update(shape_len=599, transform_len=1)
    kw["use_fc3000"] = (twin or ds.frames == 5 or res == 30) if fc3000 is None else fc3000
    return NetworkConfig(**kw)


def cmd_train(s: dict) -> int:
    ds = read_dataset(s["data"])
    net = network_for(ds, s["batchnorm"], s["fc3000"], s["seed"], twin=s["mode"] == "twin")
    cfg = TrainConfig(lr=s["lr"], batch_size=s["batch_size"], switch_period=s["switch_period"], epochs=s["epochs"],
                      mode="twin" if s["mode"] == "twin" else "volume_only", seed=s["seed"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    RunConfig("train", {**s, **network_to_kv(net)}).write(out)
    model, tlog = train(Model(net), ds, cfg, log_path=out / METRICS_NAME, progress=True)
    save_weights(model, out / WEIGHTS_NAME)
    print(f"trained {len(tlog)} steps, final loss {tlog.records[-1][2]:.6f}; weights in {out / WEIGHTS_NAME}")
    return 0


def load_model_dir(path) -> Model:
    path = Path(path)
    if not (path / RUN_NAME).exists() or not (path / WEIGHTS_NAME).exists():
        raise FileNotFoundError(f"{path} is not a trained model directory (needs {RUN_NAME} and {WEIGHTS_NAME})")
    net = network_from_kv(RunConfig.read(path / RUN_NAME).values)
    return load_weights(path / WEIGHTS_NAME, net)


def _check_compatible(model: Model, ds) -> None:
    c = model.config
    if ds.images.shape[1:] != (c.in_channels, c.image_size, c.image_size):
        raise ValueError(f"dataset images {ds.images.shape[1:]} do not fit the model input "
                         f"{(c.in_channels, c.image_size, c.image_size)}")
    if ds.volumes.shape[1] != c.volume_res:
        raise ValueError(f"dataset volumes are {ds.volumes.shape[1]}^3, model predicts {c.volume_res}^3")


def cmd_predict(s: dict) -> int:
    model = load_model_dir(s["model"])
    ds = read_dataset(s["data"])
    _check_compatible(model, ds)
    images = ds.images
    if s["indices"]:
        idx = [int(i) for i in s["indices"].split(",")]
        if min(idx) < 0 or max(idx) >= len(ds):
            raise IndexError(f"indices must lie in [0, {len(ds)})")
        images = images[idx]
    vols = ev.predict_volumes(model, images).astype(np.float32)
    Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
    np.save(s["out"], vols)
    print(f"wrote {len(vols)} volumes of {vols.shape[1]}^3 to {s['out']}")
    return 0


def volume_to_mesh(volume: np.ndarray, threshold: float, smooth: bool = False):
    """Binarize, pad with an empty border so the surface closes, triangulate."""
    binary = np.pad(ev.binarize(volume, threshold), 1).astype(np.float64)
    mesh = marching_cubes(binary, 0.5, smooth=smooth)
    mesh.vertices -= 1.0
    return mesh


def cmd_export_mesh(s: dict) -> int:
    vol = np.load(s["volume"])
    if vol.ndim == 4:
        if not 0 <= s["index"] < len(vol):
            raise IndexError(f"--index must lie in [0, {len(vol)})")
        vol = vol[s["index"]]
    if vol.ndim != 3:
        raise ValueError(f"expected an R^3 or N x R^3 volume, got shape {vol.shape}")
    thr = s["threshold"]
    if thr < 0:
        chair = s["family"] == "chair" or (not s["family"] and vol.shape[0] == 30)
        thr = ev.CHAIR_THRESHOLD if chair else ev.FACE_THRESHOLD
    mesh = volume_to_mesh(vol, thr, bool(s["smooth"]))
    Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_obj(mesh, s["out"])
    if mesh.is_empty:
        print(f"warning: no voxel reaches threshold {thr}; wrote an empty mesh", file=sys.stderr)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles to {s['out']}")
    return 0


def cmd_eval(s: dict) -> int:
    suite = s["suite"]
    model = load_model_dir(s["model"])
    ds = read_dataset(s["data"])
    _check_compatible(model, ds)
    thr = s["threshold"] if s["threshold"] >= 0 else None
    out = Path(s["out"])
    if suite == "nn":
        if not s["train_data"]:
            raise FileNotFoundError("the nn suite needs --train-data")
        res = ev.nn_benchmark(model, read_dataset(s["train_data"]), ds, thr)
        summary = ev.write_report(res, out, suite)
        line = "nn: " + res.ttest.summary().replace("M_a", "M_prediction").replace("M_b", "M_nn")
    elif suite == "invariance":
        batches = {f: factor_batches(ds, f, s["batches"], s["batch_size"], s["seed"] + k)
                   for k, f in enumerate(FACTORS)}
        prof = ev.invariance_profile(model, ds, batches)
        ev.write_report(prof, out, suite)
        rel = prof.relative()
        line = "invariance: " + " ".join(
            f"{layer}[" + ",".join(f"{f[0]}={rel[layer][f]:.2f}" for f in rel[layer]) + "]"
            for layer in ("Z_shape", "Z_transform") if layer in rel)
    elif suite == "rank":
        rows, summary = [], {"suite": suite, "factor": s["factor"], "trials": s["trials"], "gallery_size": s["gallery"]}
        codes = ev.encode_codes(model, ds.images)
        k = model.config.shape_len
        for label, c in (("shape_code", codes[:, :k]), ("full_code", codes)):
            r = ev.recognition_rank(None, ds, s["factor"], s["trials"], s["gallery"], s["seed"], codes=c)
            summary[f"mean_rank_{label}"] = r.mean_rank
            rows += [{"code": label, "trial": i, "rank": int(x)} for i, x in enumerate(r.ranks)]
        ev.write_report((rows, summary), out, suite)
        line = (f"rank ({s['factor']}, {s['trials']} trials x {s['gallery']}): shape code "
                f"{summary['mean_rank_shape_code']:.2f}, full code {summary['mean_rank_full_code']:.2f}")
    elif suite == "video":
        if not s["image_model"]:
            raise FileNotFoundError("the video suite needs --image-model")
        res = ev.video_benchmark(model, load_model_dir(s["image_model"]), ds, thr)
        ev.write_report(res, out, suite)
        line = "video: " + res.ttest.summary().replace("M_a", "M_video").replace("M_b", "M_single")
    else:
        study = ev.swap_study(model, ds, s["pairs"], s["seed"])
        summary = ev.write_report(study, out, suite)
        line = (f"interp: {summary['pairs']} pairs, IoU with shape a {summary['mean_iou_shape_a']:.3f}, "
                f"with image b {summary['mean_iou_image_b']:.3f}")
    RunConfig("eval", s).write(out, f"{suite}.cfg")
    print(line)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "export-mesh": cmd_export_mesh,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        settings = resolve(args.command, args)
        with _thread_limit():
            return HANDLERS[args.command](settings)
    except (UsageError, ConfigError) as e:
        print(f"voxelrec {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"voxelrec {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

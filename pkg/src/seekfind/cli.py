"""Command-line entry point: ``seekfind <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error or training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger("seekfind")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# desk-scale width multipliers; 1.0 rebuilds the published layer tables
DEFAULT_WIDTH_Z = 0.5
DEFAULT_WIDTH_P = 0.25


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def git_blob_sha1(data: bytes) -> str:
    """Content hash as ``git hash-object`` computes it."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:         # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    flat = {}
    for k, v in doc.items():
        if isinstance(v, dict):         # [section] tables are flattened
            flat.update(v)
        else:
            flat[k] = v
    return {k.replace("-", "_"): v for k, v in flat.items()}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _csv_ints(text: str) -> list:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _common(p):
    p.add_argument("--config", help="TOML file of option defaults")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default="out", help="output directory (created)")
    p.add_argument("--log-level", default="INFO")


def _data(p, split):
    p.add_argument("--data", required=True, help="dataset directory holding annotations.jsonl")
    p.add_argument("--split", choices=("all", "train", "test"), default=split)
    p.add_argument("--test-fraction", type=float, default=0.05)
    p.add_argument("--limit", type=int, default=None, help="use at most this many frames")


def _model(p):
    p.add_argument("--activation", choices=("selu", "relu"), default="selu")
    p.add_argument("--bn", choices=("on", "off"), default="off")
    p.add_argument("--width-z", type=float, default=DEFAULT_WIDTH_Z)
    p.add_argument("--width-p", type=float, default=DEFAULT_WIDTH_P)


def _weights(p):
    p.add_argument("--weights-z", required=True)
    p.add_argument("--weights-p", required=True)


def _pipeline(p):
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--tau-z", type=float, default=0.5)
    p.add_argument("--tau-p", type=float, default=0.5)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--merge-iou", type=float, default=0.2)
    p.add_argument("--merge-window", type=int, default=32)
    p.add_argument("--window-sizes", type=_csv_ints, default=None)
    p.add_argument("--no-merge", action="store_true")


def _training(p, lr):
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--clip-norm", type=float, default=5.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seekfind", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="render a synthetic annotated dataset")
    _common(p)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--width", type=int, default=384)
    p.add_argument("--height", type=int, default=288)
    p.add_argument("--format", choices=("png", "ppm"), default="png")

    p = sub.add_parser("stats", help="box size histograms and centre density")
    _common(p)
    _data(p, "all")
    p.add_argument("--bin-width", type=int, default=4)

    p = sub.add_parser("train-zone", help="train the zone classifier on grid cells")
    _common(p)
    _data(p, "train")
    _model(p)
    _training(p, 0.01)
    p.add_argument("--max-positive", type=int, default=4000)
    p.add_argument("--max-negative", type=int, default=7200)

    p = sub.add_parser("train-ped", help="train the pedestrian classifier on window crops")
    _common(p)
    _data(p, "train")
    _model(p)
    _training(p, 0.003)
    p.add_argument("--negatives-per-frame", type=int, default=3)
    p.add_argument("--jitter", type=int, default=1)
    p.add_argument("--mined", help="mined negatives (.npz from `mine`) added to the training set")
    p.add_argument("--init", help="start from these weights instead of a fresh network")

    p = sub.add_parser("mine", help="collect false-positive detections as negatives")
    _common(p)
    _data(p, "train")
    _model(p)
    _weights(p)
    _pipeline(p)
    p.add_argument("--cap-per-frame", type=int, default=8)

    p = sub.add_parser("detect", help="run the detector, writing detections.jsonl")
    _common(p)
    _data(p, "test")
    _model(p)
    _weights(p)
    _pipeline(p)
    p.add_argument("--no-timing", action="store_true", help="omit timing fields from the JSON output")

    p = sub.add_parser("eval", help="miss rate, FPPI and per-stage recall")
    _common(p)
    _data(p, "test")
    _model(p)
    _weights(p)
    _pipeline(p)

    p = sub.add_parser("sweep", help="stride sweep: MR and FPS per stride")
    _common(p)
    _data(p, "test")
    _model(p)
    _weights(p)
    _pipeline(p)
    p.add_argument("--strides", type=_csv_ints, default=[3, 5, 8, 12, 16])

    p = sub.add_parser("gradcheck", help="central-difference check of every layer type")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("paramcheck", help="layer parameter counts against the published tables")
    _common(p)

    p = sub.add_parser("compare-activations", help="train SELU and ReLU variants on the same data")
    _common(p)
    _data(p, "train")
    _model(p)
    _training(p, 0.003)
    p.add_argument("--network", choices=("zone", "pedestrian"), default="pedestrian")
    return parser


def parse_args(argv) -> argparse.Namespace:
    """Parse with precedence: command line > config file > built-in defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        overrides = _load_toml(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"{args.config}: unknown option(s) {', '.join(unknown)}")
        for a in sub._actions:
            if a.dest in overrides and isinstance(overrides[a.dest], (list, tuple)) and a.type is _csv_ints:
                overrides[a.dest] = ",".join(str(v) for v in overrides[a.dest])
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

class Run:
    """Output directory plus the manifest written at the end."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def add(self, paths):
        self.outputs += [Path(p) for p in paths]

    def manifest(self) -> Path:
        import PIL

        cfg = {k: v for k, v in vars(self.args).items() if k != "log_level"}
        outputs = {}
        for p in sorted(set(self.outputs)):
            if p.is_file():
                outputs[str(p.relative_to(self.out))] = git_blob_sha1(p.read_bytes())
            elif p.is_dir():
                for f in sorted(p.rglob("*")):
                    if f.is_file():
                        outputs[str(f.relative_to(self.out))] = git_blob_sha1(f.read_bytes())
        doc = {
            "command": self.args.command,
            "seed": self.args.seed,
            "config": cfg,
            "versions": {"seekfind": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "pillow": PIL.__version__},
            "outputs": outputs,
        }
        p = self.out / "manifest.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
        return p


def _frames(args):
    from .data import load_dataset

    frames = load_dataset(args.data)
    if not frames:
        raise DataError(f"{args.data}: dataset is empty")
    if not 0 <= args.test_fraction < 1:
        raise ConfigError("--test-fraction must lie in [0, 1)")
    n_test = int(round(len(frames) * args.test_fraction))
    if args.split == "train":
        frames = frames[: len(frames) - n_test]
    elif args.split == "test":
        frames = frames[len(frames) - n_test:]
    if args.limit is not None:
        frames = frames[: args.limit]
    if not frames:
        raise DataError(f"{args.data}: split {args.split!r} has no frames")
    return frames


def _pipeline_cfg(args):
    from .detection import PipelineConfig

    return PipelineConfig(tau_z=args.tau_z, tau_p=args.tau_p, window=args.window, stride=args.stride,
                          nms_iou=args.nms_iou, merge_window=args.merge_window, merge_iou=args.merge_iou,
                          window_sizes=tuple(args.window_sizes) if args.window_sizes else None,
                          threads=args.threads, merge=not args.no_merge).validate()


def _train_cfg(args, seed_offset: int = 0):
    from .training import TrainConfig

    return TrainConfig(batch_size=args.batch_size, lr=args.lr, momentum=args.momentum, epochs=args.epochs,
                       patience=args.patience, seed=args.seed + seed_offset, activation=args.activation,
                       bn=args.bn == "on", flip=True, clip_norm=args.clip_norm).validate()


def _models(args):
    from .classifiers import build_pedestrian_classifier, build_zone_classifier, load_weights

    bn = args.bn == "on"
    for p in (args.weights_z, args.weights_p):
        if not Path(p).is_file():
            raise DataError(f"weights file not found: {p}")
    cz = load_weights(args.weights_z, build_zone_classifier(args.width_z, args.activation, bn))
    cp = load_weights(args.weights_p, build_pedestrian_classifier(args.width_p, args.activation, bn))
    return cz.eval(), cp.eval()


def _save_mined(crops, path):
    np.savez_compressed(path, pixels=np.stack([c.pixels for c in crops.crops]) if crops.crops
                        else np.zeros((0, 64, 64, 3), np.uint8),
                        rects=np.array([c.rect.as_tuple() for c in crops.crops], dtype=np.int64).reshape(-1, 4),
                        frame_ids=np.array([c.frame_id for c in crops.crops], dtype=str))


def _load_mined(path):
    from .data import NEGATIVE, CropSet, LabeledCrop
    from .geometry import BoundingBox

    try:
        z = np.load(path)
        return CropSet([LabeledCrop(px, NEGATIVE, str(fid), BoundingBox(*map(int, r)))
                        for px, r, fid in zip(z["pixels"], z["rects"], z["frame_ids"])])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, run):
    from .data import SynthConfig, save_dataset, synth_generate

    cfg = SynthConfig(frames=args.frames, width=args.width, height=args.height).validate()
    frames = synth_generate(cfg, seed=args.seed)
    ann = save_dataset(frames, run.out, args.format)
    run.add([ann, run.out / "images"])
    print(f"wrote {len(frames)} frames, {sum(len(f.boxes) for f in frames)} boxes to {run.out}")


def cmd_stats(args, run):
    from .data import stats

    st = stats(_frames(args), bin_width=args.bin_width)
    run.add(st.write(run.out))
    print(f"{st.total_frames} frames, {st.total_boxes} boxes")
    print("centre density per cell:")
    for row in st.density:
        print("  " + " ".join(f"{v:5d}" for v in row))


def cmd_train_zone(args, run):
    from .classifiers import build_zone_classifier, save_weights
    from .data import extract_zone_samples
    from .training import train

    frames = _frames(args)
    crops = extract_zone_samples(frames, max_positive=args.max_positive, max_negative=args.max_negative)
    pos, neg = crops.counts()
    print(f"zone samples: {pos} positive, {neg} negative")
    net = build_zone_classifier(args.width_z, args.activation, args.bn == "on", seed=args.seed)
    net, curve = train(net, crops, _train_cfg(args))
    curve.write_csv(run.path("loss_zone.csv"))
    save_weights(net, run.path("weights_z.bin"))
    print(f"final epoch loss {curve.final_loss:.5f} after {len(curve.epoch_loss)} epoch(s)")


def cmd_train_ped(args, run):
    from .classifiers import build_pedestrian_classifier, load_weights, save_weights
    from .data import extract_pedestrian_samples
    from .training import train

    frames = _frames(args)
    crops = extract_pedestrian_samples(frames, negatives_per_frame=args.negatives_per_frame, seed=args.seed,
                                       positive_mode="window", window=16, jitter_per_box=args.jitter)
    if args.mined:
        crops = crops + _load_mined(args.mined)
    pos, neg = crops.counts()
    print(f"pedestrian samples: {pos} positive, {neg} negative")
    net = build_pedestrian_classifier(args.width_p, args.activation, args.bn == "on", seed=args.seed + 1)
    if args.init:
        load_weights(args.init, net)
    net, curve = train(net, crops, _train_cfg(args, 1))
    curve.write_csv(run.path("loss_ped.csv"))
    save_weights(net, run.path("weights_p.bin"))
    print(f"final epoch loss {curve.final_loss:.5f} after {len(curve.epoch_loss)} epoch(s)")


def cmd_mine(args, run):
    from .evaluation import run_pipeline
    from .training import mine_hard_negatives

    frames = _frames(args)
    cz, cp = _models(args)
    dets, _ = run_pipeline(frames, cz, cp, _pipeline_cfg(args))
    mined = mine_hard_negatives(frames, dets, cap_per_frame=args.cap_per_frame)
    _save_mined(mined, run.path("mined_negatives.npz"))
    print(f"mined {len(mined)} negative crop(s) from {len(frames)} frame(s)")


def _detect_all(args, frames, cz, cp, cfg):
    from .detection import detect

    records, dets, traces = [], [], []
    for fr in frames:
        d, t = detect(fr, cz, cp, cfg)
        dets.append(d)
        traces.append(t)
        records.append((fr, d, t))
    return dets, traces, records


def cmd_detect(args, run):
    from .detection import detection_record, write_detections

    frames = _frames(args)
    cz, cp = _models(args)
    dets, traces, records = _detect_all(args, frames, cz, cp, _pipeline_cfg(args))
    recs = [detection_record(f"images/{fr.source_id}", d, t) for fr, d, t in records]
    write_detections(run.path("detections.jsonl"), recs, include_timing=not args.no_timing)
    print(f"{sum(len(d) for d in dets)} detection(s) over {len(frames)} frame(s)")


def cmd_eval(args, run):
    from .detection import detection_record, write_detections
    from .evaluation import REFERENCE, category_miss_rates, stage_recall, timing_breakdown

    frames = _frames(args)
    cz, cp = _models(args)
    cfg = _pipeline_cfg(args)
    dets, traces, records = _detect_all(args, frames, cz, cp, cfg)
    rep = stage_recall(frames, cz, cp, cfg, results=(dets, traces))
    rep.write_csv(run.path("eval_report.csv"))
    summary = rep.summary()
    summary["by_distance"] = category_miss_rates(dets, [fr.boxes for fr in frames])
    summary["timing"] = timing_breakdown(traces)
    summary["reference"] = {k: REFERENCE[k] for k in ("phase1_recall", "final_recall", "seek_ms", "find_ms",
                                                      "total_ms")}
    run.path("eval_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    recs = [detection_record(f"images/{fr.source_id}", d, t) for fr, d, t in records]
    write_detections(run.path("detections.jsonl"), recs, include_timing=False)
    print(f"MR {rep.miss_rate:.2f}%  recall {rep.recall:.2f}%  FPPI {rep.fppi:.3f}")
    print(f"phase-I recall {rep.stage['phase1_recall']:.2f}% (strict), "
          f"{rep.stage['phase1_recall_relaxed']:.2f}% (any cell)")


def cmd_sweep(args, run):
    from .evaluation import stride_sweep, write_sweep

    frames = _frames(args)
    cz, cp = _models(args)
    points = stride_sweep(frames, cz, cp, args.strides, _pipeline_cfg(args))
    paths = write_sweep(points, run.out)
    run.add(paths.values())
    for p in points:
        print(f"stride {p.stride:3d}: MR {p.miss_rate:6.2f}%  {p.windows_per_frame:8.1f} windows/frame  "
              f"{p.ms_per_frame:8.1f} ms/frame  {p.fps:6.2f} FPS")


def cmd_gradcheck(args, run):
    from .gradcheck import standard_checks

    results = standard_checks(seed=args.seed)
    ok = True
    lines = ["layer,max_rel_error,checked,passed"]
    for name, r in results.items():
        passed = r.passed(args.tol)
        ok &= passed
        print(f"{name:24s} {r.max_rel_error:10.3e}  {'ok' if passed else 'FAIL'}")
        lines.append(f"{name},{r.max_rel_error:.6e},{r.checked},{int(passed)}")
    run.path("gradcheck.csv").write_text("\n".join(lines) + "\n")
    if not ok:
        raise NumericError(f"gradient check exceeded tolerance {args.tol}")


def cmd_paramcheck(args, run):
    from .classifiers import build_pedestrian_classifier, build_zone_classifier
    from .inception import count_params

    ok = True
    lines = ["network,layer,built,table,status"]
    for name, build in (("zone", build_zone_classifier), ("pedestrian", build_pedestrian_classifier)):
        net = build(1.0)
        print(f"{name} classifier")
        for label, built, table in net.layer_param_table():
            inception = label.startswith("inception")
            if table is None:
                status = "n/a"
            elif built == table:
                status = "match"
            else:
                status = "differs (inception, expected)" if inception else "MISMATCH"
                ok &= inception
            print(f"  {label:26s} {built:>9d} {'' if table is None else table:>9}  {status}")
            lines.append(f"{name},{label},{built},{'' if table is None else table},{status}")
        print(f"  {'total':26s} {count_params(net):>9d}")
    run.path("paramcheck.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_DATA


def cmd_compare_activations(args, run):
    from .classifiers import build_pedestrian_classifier, build_zone_classifier
    from .data import extract_pedestrian_samples, extract_zone_samples
    from .training import activation_stats, compare_activations

    frames = _frames(args)
    bn = args.bn == "on"
    if args.network == "zone":
        crops = extract_zone_samples(frames)

        def build(act):
            return build_zone_classifier(args.width_z, act, bn, seed=args.seed)
    else:
        crops = extract_pedestrian_samples(frames, seed=args.seed, positive_mode="window", jitter_per_box=1)

        def build(act):
            return build_pedestrian_classifier(args.width_p, act, bn, seed=args.seed)

    curves = compare_activations(build, crops, _train_cfg(args), out_dir=run.out)
    run.add(run.out / f"loss_{k}.csv" for k in ("selu", "relu", "paired"))
    probe = np.random.default_rng(args.seed).standard_normal((16, 3, 64, 64)).astype(np.float32)
    lines = ["activation,layer,mean,var"]
    for act in ("selu", "relu"):
        for k, _, mean, var in activation_stats(build(act), probe):
            lines.append(f"{act},{k},{mean:.6f},{var:.6f}")
    run.path("activation_stats.csv").write_text("\n".join(lines) + "\n")
    for act, c in curves.items():
        print(f"{act}: final epoch loss {c.final_loss:.5f} over {len(c.steps)} steps")


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "train-zone": cmd_train_zone,
    "train-ped": cmd_train_ped,
    "mine": cmd_mine,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "paramcheck": cmd_paramcheck,
    "compare-activations": cmd_compare_activations,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"seekfind: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:            # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = Run(args)
        code = COMMANDS[args.command](args, run) or EXIT_OK
        run.manifest()
        return code
    except ConfigError as exc:
        print(f"seekfind: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"seekfind: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"seekfind: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

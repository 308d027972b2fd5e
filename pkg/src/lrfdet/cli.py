"""``lrfdet`` command line: data generation, training, evaluation, inference,
profiling and feature dumps.

Every command accepts ``--config`` (a flat ``key=value`` file), ``--seed``
and ``--out``. Keys are the fields of the desk presets (see ``lrfdet
gen-data --help`` for the list); command-line flags override the file.
Each output directory receives ``config.txt`` holding the fully resolved
settings, readable back through ``--config``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import ast
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .backbone import TAP_LAYERS, channel_mean_map, tap_output, to_uint8
from .detector import DESK_DIVISOR, DetectorConfig, build_detector, detect
from .metrics import aggregate, evaluate_detector, report_json, report_table
from .profiler import rfdnet_profile, profile_network, squeezenet_arch
from .synth import (SceneSpec, SyntheticCorpus, letterbox, read_dataset, read_pnm, write_dataset,
                    write_pgm)
from .train import TrainConfig, TrainingDiverged, load_state, save_state, train, TrainState

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
CONFIG_FILE = "config.txt"

log = logging.getLogger("lrfdet")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# settings

SCENE_KEYS = ("width", "height", "fault_probability", "fault_modes", "background_level",
              "stripe_contrast", "illumination", "noise")
DETECTOR_SKIP = ("backbone",)
# None means "derived from divisor"
DERIVED_WIDTHS = ("lateral_width", "mff1_width", "mff2_widths")
TRAIN_SKIP = ("seed",)


def default_settings() -> Dict[str, object]:
    scene, det, tr = SceneSpec(), DetectorConfig.desk(), TrainConfig.desk()
    settings: Dict[str, object] = {"seed": tr.seed, "divisor": DESK_DIVISOR,
                                   "count": 200, "start": 0, "eval_count": 100, "eval_start": 100000,
                                   "threshold": 0.9, "nms_iou": 0.3}
    settings.update({k: getattr(scene, k) for k in SCENE_KEYS})
    settings.update({f.name: getattr(det, f.name) for f in fields(det) if f.name not in DETECTOR_SKIP})
    settings.update(dict.fromkeys(DERIVED_WIDTHS))
    settings.update({f.name: getattr(tr, f.name) for f in fields(tr) if f.name not in TRAIN_SKIP})
    return settings


def parse_value(text: str):
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    return tuple(value) if isinstance(value, list) else value


def read_config(path) -> Dict[str, object]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = parse_value(value.strip())
    return values


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key} must be True or False, got {value!r}")
        return value
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple) and isinstance(value, (tuple, int, float, str)):
        return value if isinstance(value, tuple) else (value,)
    if isinstance(default, str) and isinstance(value, str):
        return value
    raise UsageError(f"{key} expects a value like {default!r}, got {value!r}")


def resolve_settings(config_path: Optional[str], overrides: Dict[str, object]) -> Dict[str, object]:
    settings = default_settings()
    given = read_config(config_path) if config_path else {}
    given.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(given) - set(settings))
    if unknown:
        raise UsageError(f"unknown configuration keys: {', '.join(unknown)}")
    for key, value in given.items():
        settings[key] = _coerce(key, value, settings[key])
    return settings


def write_settings(directory: Path, settings: Dict[str, object]):
    directory.mkdir(parents=True, exist_ok=True)
    text = "".join(f"{k}={v!r}\n" for k, v in sorted(settings.items()))
    (directory / CONFIG_FILE).write_text(text)


def scene_spec(s) -> SceneSpec:
    try:
        return SceneSpec(seed=s["seed"], **{k: s[k] for k in SCENE_KEYS})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid scene settings: {e}") from None


def detector_config(s) -> DetectorConfig:
    names = [f.name for f in fields(DetectorConfig) if f.name not in DETECTOR_SKIP]
    try:
        chosen = {k: s[k] for k in names if not (k in DERIVED_WIDTHS and s[k] is None)}
        return replace(DetectorConfig.desk(s["divisor"]), **chosen)
    except (TypeError, ValueError, ZeroDivisionError) as e:
        raise UsageError(f"invalid detector settings: {e}") from None


def train_config(s) -> TrainConfig:
    names = [f.name for f in fields(TrainConfig) if f.name not in TRAIN_SKIP]
    try:
        return TrainConfig(seed=s["seed"], **{k: s[k] for k in names})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid training settings: {e}") from None


# --------------------------------------------------------------------------
# commands


def _out_dir(args, required: bool = True) -> Optional[Path]:
    if args.out is None:
        if required:
            raise UsageError(f"{args.command} needs --out")
        return None
    return Path(args.out)


def _samples(args, s, count_key: str, start_key: str):
    if args.data:
        if not Path(args.data).is_dir():
            raise UsageError(f"--data {args.data} is not a directory")
        return read_dataset(args.data)
    return SyntheticCorpus(scene_spec(s), s[count_key], s[start_key])


def _load_model(path: str):
    try:
        return load_state(path)
    except FileNotFoundError:
        raise UsageError(f"model {path} does not exist") from None


def cmd_gen_data(args, s) -> int:
    out = _out_dir(args)
    write_settings(out, s)
    anns = write_dataset(scene_spec(s), s["count"], out, s["start"])
    faults = sum(a.has_fault for a in anns)
    print(f"wrote {len(anns)} images ({faults} with faults) to {out}")
    return EXIT_OK


def cmd_train(args, s) -> int:
    out = _out_dir(args)
    write_settings(out, s)
    config = train_config(s)
    data = _samples(args, s, "count", "start")
    state = _load_model(args.resume) if args.resume else TrainState(build_detector(detector_config(s), config.seed))
    try:
        state = train(data, config, state=state, log_path=out / "loss.csv")
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_FAILURE
    save_state(out / "model.rfdn", state, config)
    last = state.log[-1] if state.log else {}
    print(f"trained {state.iteration} iterations; final loss {last.get('total', float('nan')):.4f}; "
          f"model at {out / 'model.rfdn'}")
    return EXIT_OK


def _write_lines(path: Optional[Path], records: List[dict]):
    text = "".join(json.dumps(r) + "\n" for r in records)
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def cmd_eval(args, s) -> int:
    out = _out_dir(args, required=False)
    params = _load_model(args.model).params
    data = _samples(args, s, "eval_count", "eval_start")
    if len(data) == 0:
        raise UsageError("no images to evaluate")
    reports, records = evaluate_detector(params, data, s["threshold"], s["nms_iou"])
    table = report_table(reports)
    print(table, end="")
    if out is not None:
        write_settings(out, s)
        _write_lines(out / "detections.jsonl", records)
        (out / "report.json").write_text(report_json(reports))
        (out / "report.txt").write_text(table)
    mcdr, _, mfdr = aggregate(reports)
    print(f"mCDR {float(mcdr):.4f}  mFDR {float(mfdr):.4f}")
    return EXIT_OK


def _read_image(path: str) -> np.ndarray:
    try:
        image = read_pnm(path)
    except FileNotFoundError:
        raise UsageError(f"input {path} does not exist") from None
    except ValueError as e:
        raise UsageError(str(e)) from None
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return letterbox(image)


def cmd_infer(args, s) -> int:
    if not args.input:
        raise UsageError("infer needs at least one --input image")
    out = _out_dir(args, required=False)
    params = _load_model(args.model).params
    records = []
    for path in args.input:
        dets = detect(params, _read_image(path)[None], s["threshold"], s["nms_iou"])
        records += [d.record(Path(path).stem) for d in dets]
    if out is not None:
        write_settings(out, s)
        _write_lines(out / "detections.jsonl", records)
        print(f"{len(records)} detections in {out / 'detections.jsonl'}")
    else:
        _write_lines(None, records)
    return EXIT_OK


def cmd_profile(args, s) -> int:
    out = _out_dir(args, required=False)
    if args.arch == "rfdnet":
        report = rfdnet_profile(args.input_size)
    else:
        report = profile_network(squeezenet_arch(), args.input_size)
    print(report.table(), end="")
    if args.target:
        name, value, err = report.closest_convention(args.target)
        print(f"closest to {args.target / 1e6:.0f}M: {name} = {value / 1e6:.2f}M ({err:+.1%})")
    if out is not None:
        write_settings(out, s)
        (out / f"profile_{args.arch}.json").write_text(report.to_json())
    return EXIT_OK


def cmd_dump_features(args, s) -> int:
    out = _out_dir(args)
    if not args.input:
        raise UsageError("dump-features needs an --input image")
    taps = args.tap or ["MP1", "MP3", "MP5"]
    unknown = [t for t in taps if t.upper() not in TAP_LAYERS]
    if unknown:
        raise UsageError(f"unknown taps {unknown}; choose from {sorted(TAP_LAYERS)}")
    params = _load_model(args.model).params if args.model else build_detector(detector_config(s), s["seed"])
    image = _read_image(args.input)[None]
    write_settings(out, s)
    stem = Path(args.input).stem
    for tap in taps:
        fmap = channel_mean_map(tap_output(params, image, tap, params.config.inference_mode))
        path = out / f"{stem}_{tap.upper()}.pgm"
        write_pgm(path, to_uint8(fmap))
        print(f"{tap.upper()} {fmap.shape[0]}x{fmap.shape[1]} -> {path}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "profile": cmd_profile, "dump-features": cmd_dump_features}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file")
    common.add_argument("--seed", type=int, help="seed for data, initialization and sampling")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="lrfdet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    keys = ", ".join(sorted(default_settings()))

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset to disk",
                       epilog=f"configuration keys: {keys}")
    p.add_argument("--count", type=int)
    p.add_argument("--start", type=int, help="index of the first scene")

    p = sub.add_parser("train", parents=[common], help="train the detector")
    p.add_argument("--data", help="dataset directory (default: synthetic scenes rendered in memory)")
    p.add_argument("--count", type=int, help="number of synthetic training scenes")
    p.add_argument("--iters", type=int, help="iteration budget (decay interval scales with it)")
    p.add_argument("--resume", help="continue from a training checkpoint")

    p = sub.add_parser("eval", parents=[common], help="image-level CDR/MDR/FDR of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset directory (default: held-out synthetic scenes)")
    p.add_argument("--count", type=int, dest="eval_count", help="number of held-out synthetic scenes")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("infer", parents=[common], help="detections for PPM/PGM images as JSON lines")
    p.add_argument("--model", required=True)
    p.add_argument("--input", nargs="+")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("profile", parents=[common], help="parameter, size and mult-add counts")
    p.add_argument("--arch", choices=("rfdnet", "squeezenet"), default="rfdnet")
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--target", type=float, help="report the compute convention closest to this count")

    p = sub.add_parser("dump-features", parents=[common], help="channel-mean feature maps as PGM")
    p.add_argument("--model", help="checkpoint (default: fresh initialization from --seed)")
    p.add_argument("--input", required=True)
    p.add_argument("--tap", action="append", help=f"tap name, repeatable (default MP1 MP3 MP5); one of {sorted(TAP_LAYERS)}")
    return parser


OVERRIDE_FLAGS = ("seed", "count", "start", "eval_count", "threshold")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {k: getattr(args, k, None) for k in OVERRIDE_FLAGS}
        settings = resolve_settings(args.config, overrides)
        if getattr(args, "iters", None) is not None:
            if args.iters <= 0:
                raise UsageError("--iters must be positive")
            scaled = train_config(settings).with_total_iters(args.iters)
            settings.update(total_iters=scaled.total_iters, lr_decay_every=scaled.lr_decay_every)
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        print(f"lrfdet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"lrfdet {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: simulate, extract, dataset, train, eval.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import cnn
from .aspc import NoLeakageError, correct_iq_imbalance, fast_time_window, process_chirp
from .dataset import (SceneSpec, build_manifest, default_classes, format_confusion, generate,
                      metrics_report, plan, read_dataset, split_counts, write_dataset)
from .mds import PIPELINES, extract_mds, write_ppm
from .signal_model import (FormatError, LeakageSpec, RadarConfig, TargetSpec, apply_iq_imbalance,
                           parse_key_values, read_cube, synthesize_cube, write_cube)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_KEYS = ("seed", "pipeline", "epochs", "batch", "lr", "per_class")
_RADAR_KEYS = {f.name for f in dataclasses.fields(RadarConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _spec_pairs(text: str) -> dict[str, float]:
    """``key=value,key=value`` into a dict of floats (ints where integral)."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        v = float(value)
        out[key.strip()] = int(v) if v.is_integer() and key.strip() in ("blade_count", "scatterers_per_blade") else v
    return out


def load_run_config(path) -> tuple[RadarConfig, dict]:
    """Split a flat key=value file into radar settings and run settings."""
    values = parse_key_values(Path(path).read_text()) if path else {}
    unknown = set(values) - _RADAR_KEYS - set(RUN_KEYS)
    if unknown:
        raise FormatError(f"unknown config keys: {sorted(unknown)}")
    radar = RadarConfig.from_mapping({k: v for k, v in values.items() if k in _RADAR_KEYS})
    run = {k: values[k] for k in RUN_KEYS if k in values}
    return radar, run


def _resolve(args, run: dict, name: str, default, cast):
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    if name in run:
        return cast(run[name])
    return default


def cmd_simulate(args) -> int:
    radar, run = load_run_config(args.config)
    if args.profile == "spark":
        radar = radar.replace(chirps_per_image=1024, stft_window_len=32)
    elif args.profile == "inspire":
        radar = radar.replace(chirps_per_image=256, stft_window_len=16)
    seed = _resolve(args, run, "seed", 0, int)
    leak_kw = dict(args.leakage or {})
    leakage = LeakageSpec.clean(**leak_kw) if args.no_phase_noise else LeakageSpec(**leak_kw)
    targets = [TargetSpec(**t) for t in args.target or []]
    cube = synthesize_cube(radar, leakage, targets, args.thermal_noise, seed)
    if args.iq_gain != 1.0 or args.iq_skew_deg != 0.0:
        cube = apply_iq_imbalance(cube, args.iq_gain, np.deg2rad(args.iq_skew_deg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_cube(cube, out / "cube.iq")
    print(path)
    return EXIT_OK


def _spectra_rows(cube, config):
    """Chirp-averaged range spectra before and after the SPC stage, in dB."""
    w = fast_time_window(config.samples_per_chirp, config.fast_time_window)[:, None]
    pre = correct_iq_imbalance(cube.data, config.fast_time_window)
    post = process_chirp(cube.data, config).data
    n = config.range_fft_len
    p_pre = np.mean(np.abs(np.fft.fft(pre * w, n=n, axis=0)) ** 2, axis=1)
    p_post = np.mean(np.abs(np.fft.fft(post * w, n=n, axis=0)) ** 2, axis=1)
    tiny = np.finfo(float).tiny
    freqs = np.fft.fftfreq(n, 1.0 / config.sample_rate_hz)
    return freqs, 10 * np.log10(p_pre + tiny), 10 * np.log10(p_post + tiny)


def cmd_extract(args) -> int:
    cube = read_cube(args.cube)
    config = cube.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image = extract_mds(cube, config, args.pipeline, target_bin=args.target_bin, label=args.label or "")
    path = write_ppm(image, out / f"mds_{args.pipeline}.ppm")
    print(f"{path} target_bin={image.meta['target_bin']}")
    if args.dump_spectra:
        freqs, pre, post = _spectra_rows(cube, config)
        lines = ["bin,frequency_hz,pre_spc_db,post_spc_db"]
        lines += [f"{k},{f:.17g},{a:.17g},{b:.17g}" for k, (f, a, b) in enumerate(zip(freqs, pre, post))]
        (out / "spectra.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_dataset(args) -> int:
    radar, run = load_run_config(args.config)
    seed = _resolve(args, run, "seed", 0, int)
    pipeline = _resolve(args, run, "pipeline", "proposed", str)
    per_class = _resolve(args, run, "per_class", 700, int)
    if pipeline not in PIPELINES:
        raise UsageError(f"pipeline must be one of {PIPELINES}")
    if per_class < 5:
        raise UsageError("per-class must be >= 5")
    out = Path(args.out)
    classes = default_classes()
    if args.dry_run:
        out.mkdir(parents=True, exist_ok=True)
        manifest = build_manifest(classes, per_class, pipeline, seed, SceneSpec(),
                                  plan(classes, per_class, seed), radar)
        manifest["dry_run"] = True
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    else:
        write_dataset(generate(classes, per_class, pipeline, seed, base_config=radar), out)
    counts = split_counts(per_class)
    print(f"{out}: {per_class * len(classes)} train+validation "
          f"({counts['train'] * len(classes)}/{counts['validation'] * len(classes)}), "
          f"{counts['test'] * len(classes)} test, pipeline={pipeline}")
    return EXIT_OK


def cmd_train(args) -> int:
    _, run = load_run_config(args.config)
    defaults = cnn.TrainConfig()
    try:
        config = cnn.TrainConfig(
            learning_rate=_resolve(args, run, "lr", defaults.learning_rate, float),
            batch_size=_resolve(args, run, "batch", defaults.batch_size, int),
            epochs=_resolve(args, run, "epochs", defaults.epochs, int),
            seed=_resolve(args, run, "seed", defaults.seed, int),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = read_dataset(args.data)
    x_train, y_train = ds.arrays("train")
    x_val, y_val = ds.arrays("validation")
    if len(y_train) == 0:
        raise FormatError("dataset has no training images")
    model = cnn.load_model(args.resume) if args.resume else cnn.init_model(config.seed)

    def report(model, rec):
        finite = np.isfinite(rec["train_loss"]) and all(np.all(np.isfinite(v)) for v in model.params.values())
        if not finite:
            raise FloatingPointError(f"training diverged (non-finite loss or weights) at epoch {rec['epoch']}")
        print(json.dumps(rec), flush=True)

    model, history = cnn.train(model, x_train, y_train, config, x_val if len(y_val) else None,
                               y_val if len(y_val) else None, on_epoch=report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cnn.save_model(model, out / "model.ckpt")
    cnn.write_history(history, out / "history.jsonl")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    model = cnn.load_model(args.model)
    images, labels = ds.arrays(args.split)
    if len(labels) == 0:
        raise FormatError(f"split {args.split!r} is empty")
    cm, acc = cnn.evaluate(model, images, labels)
    report = metrics_report(cm, ds.class_names)
    report.update(confusion=cm.tolist(), classes=ds.class_names, split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    table = format_confusion(cm, ds.class_names)
    (out / "confusion.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aspc-mds", description="Leakage-robust micro-Doppler extraction and drone classification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, pipeline=False):
        sp.add_argument("--config", help="flat key=value file; flags override it")
        sp.add_argument("--out", required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=_u64)
        if pipeline:
            sp.add_argument("--pipeline", choices=PIPELINES)

    s = sub.add_parser("simulate", help="synthesize an IQ cube")
    common(s)
    s.add_argument("--profile", choices=("inspire", "spark"), help="STFT profile preset (M and L)")
    s.add_argument("--target", action="append", type=_spec_pairs,
                   help="target fields as key=value,...; repeatable (e.g. range_m=100,amplitude=1e-3)")
    s.add_argument("--leakage", type=_spec_pairs, help="leakage fields (beat_frequency_hz, amplitude, ...)")
    s.add_argument("--no-phase-noise", action="store_true")
    s.add_argument("--thermal-noise", type=float, default=0.0, help="complex noise power per sample")
    s.add_argument("--iq-gain", type=float, default=1.0)
    s.add_argument("--iq-skew-deg", type=float, default=0.0)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("extract", help="cube file to MDS image")
    e.add_argument("cube")
    e.add_argument("--out", required=True)
    e.add_argument("--pipeline", choices=PIPELINES, default="proposed")
    e.add_argument("--target-bin", type=int)
    e.add_argument("--label")
    e.add_argument("--dump-spectra", action="store_true", help="write pre/post-SPC range spectra to spectra.csv")
    e.set_defaults(func=cmd_extract)

    d = sub.add_parser("dataset", help="generate a labelled dataset directory")
    common(d, pipeline=True)
    d.add_argument("--per-class", dest="per_class", type=int)
    d.add_argument("--dry-run", action="store_true", help="write the manifest only")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train the light CNN on a dataset directory")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="confusion matrix of a checkpoint on a dataset split")
    v.add_argument("--out", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--model", required=True)
    v.add_argument("--split", choices=("train", "validation", "test"), default="test")
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"aspc-mds: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"aspc-mds: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, cnn.CheckpointError, NoLeakageError, KeyError, ValueError, TypeError) as exc:
        print(f"aspc-mds: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

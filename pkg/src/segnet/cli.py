"""Command-line entry point.

Subcommands: ``synth``, ``train``, ``eval``, ``predict``, ``ablate``,
``gradcheck``. Exit codes: 0 success, 1 validation error (bad arguments,
malformed config or files; nothing is written), 2 runtime failure.

Every subcommand accepts ``--threads N`` (env fallback ``SEGNET_THREADS``)
to pin the BLAS thread count for run-to-run determinism. Heavy imports
happen after thread pinning so the limit applies to the numeric backend.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_thread_controller = None  # keeps threadpoolctl limits alive


class CliError(Exception):
    """Validation failure: reported on stderr with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        self.print_usage(sys.stderr)
        raise CliError(message)


def _apply_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("SEGNET_THREADS")
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise CliError(f"SEGNET_THREADS must be an integer, got {env!r}")
    if n < 1:
        raise CliError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)
    global _thread_controller
    try:
        import threadpoolctl
        _thread_controller = threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass  # env vars still apply to libraries loaded afterwards


# ---------------------------------------------------------------------------
# Config file
# ---------------------------------------------------------------------------

def default_config() -> dict:
    return {
        "model": {
            "input_size": 128,
            "input_channels": 4,
            "encoder_tap_widths": [16, 24, 40, 80],
            "decoder_widths": [256, 128, 64, 32],
            "aspp_filters": 256,
            "aspp_dilations": [6, 12, 18],
            "output_channels": 3,
            "variant": "enhanced",
        },
        "aug": {
            "rotation_deg": 25.0,
            "shift_frac": 0.20,
            "zoom_frac": 0.20,
            "hflip_prob": 0.5,
            "fill": "nearest",
            "seed": 0,
        },
        "train": {
            "epochs": 10,
            "batch_size": 4,
            "lr": 1.0e-3,
            "loss": "bce",
            "seed": 0,
            "eval_every": 1,
            "threshold": 0.5,
        },
        "data": {
            "split_ratios": [0.70, 0.15, 0.15],
        },
    }


def _check_value(section: str, key: str, value, default):
    """Type-check `value` against the shape of the default it replaces."""
    where = f"config {section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise CliError(f"{where}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise CliError(f"{where}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CliError(f"{where}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise CliError(f"{where}: expected string, got {value!r}")
        return value
    if isinstance(default, list):  # fixed-length homogeneous list
        if not isinstance(value, list) or len(value) != len(default):
            raise CliError(f"{where}: expected list of {len(default)} values")
        return [_check_value(section, f"{key}[{i}]", v, default[0])
                for i, v in enumerate(value)]
    raise AssertionError(f"bad schema default for {where}")


def merge_config(doc: dict) -> dict:
    """Overlay a user config document onto the defaults, rejecting unknown
    sections and keys and type-checking every leaf."""
    merged = default_config()
    if not isinstance(doc, dict):
        raise CliError("config root must be a JSON object")
    for section, entries in doc.items():
        if section not in merged:
            raise CliError(f"unknown config section {section!r}")
        if not isinstance(entries, dict):
            raise CliError(f"config section {section!r} must be an object")
        for key, value in entries.items():
            if key not in merged[section]:
                raise CliError(f"unknown config key {section}.{key}")
            merged[section][key] = _check_value(section, key, value,
                                                merged[section][key])
    return merged


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}")
    return merge_config(doc)


def _build_train_config(merged: dict, checkpoint_path=None):
    from .model import ModelConfig
    from .augment import AugConfig
    from .pipeline import TrainConfig
    try:
        model = ModelConfig.from_dict(merged["model"])
        aug = AugConfig.from_dict(merged["aug"])
        t = merged["train"]
        return TrainConfig(model=model, aug=aug, epochs=t["epochs"],
                           batch_size=t["batch_size"], lr=t["lr"], loss=t["loss"],
                           seed=t["seed"], eval_every=t["eval_every"],
                           threshold=t["threshold"],
                           checkpoint_path=checkpoint_path,
                           split_ratios=tuple(merged["data"]["split_ratios"]))
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}")


# ---------------------------------------------------------------------------
# Shared validation helpers
# ---------------------------------------------------------------------------

def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"{what} not found: {path}")
    return path


def _load_dataset_checked(directory):
    from .data import FileFormatError, load_dataset
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError(f"dataset directory not found: {directory}")
    try:
        return load_dataset(directory)
    except (FileFormatError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot load dataset: {exc}")


def _load_checkpoint_checked(path):
    from .data import FileFormatError, load_checkpoint
    from .model import ArchitectureMismatchError, ModelConfig
    from .pipeline import params_from_state
    _require_file(path, "checkpoint")
    try:
        state, meta = load_checkpoint(path)
        config = ModelConfig.from_dict(meta["model"])
        params = params_from_state(config, state)
    except (FileFormatError, ArchitectureMismatchError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}")
    return params, config, meta


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    from .data import generate_synthetic_dataset, save_dataset
    if args.n < 1:
        raise CliError("--n must be >= 1")
    if args.size % 32 != 0 or args.size <= 0:
        raise CliError("--size must be a positive multiple of 32")
    samples = generate_synthetic_dataset(args.n, args.size, args.seed)
    save_dataset(samples, args.out, args.seed)
    print(f"wrote {len(samples)} samples of size {args.size} to {args.out}")
    return EXIT_OK


def _print_config(merged: dict) -> int:
    print(json.dumps(merged, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_train(args) -> int:
    from . import pipeline, report
    merged = load_config_file(args.config) if args.config else default_config()
    if args.print_config:
        return _print_config(merged)
    if not args.config or not args.data or not args.out:
        raise CliError("train requires --config, --data and --out")
    samples, manifest = _load_dataset_checked(args.data)
    config = _build_train_config(merged)
    if manifest.get("size") != config.model.input_size:
        raise CliError(
            f"dataset size {manifest.get('size')} != model input_size "
            f"{config.model.input_size}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.checkpoint_path = str(out_dir / "checkpoint.sgc")
    try:
        state, history, split = pipeline.train(config, samples)
    except pipeline.TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.history is not None:
            (out_dir / "history.json").write_text(exc.history.to_json() + "\n")
        return EXIT_RUNTIME
    (out_dir / "history.json").write_text(history.to_json() + "\n")
    report.training_curves(history, out_dir / "training_curves.png")
    print(f"checkpoint: {config.checkpoint_path}")
    print(f"history:    {out_dir / 'history.json'}")
    print(f"split sizes: train={len(split.train)} val={len(split.val)} "
          f"test={len(split.test)}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from . import pipeline, report
    from .data import split_dataset
    if not 0.0 < args.threshold < 1.0:
        raise CliError("--threshold must be in (0,1)")
    params, config, meta = _load_checkpoint_checked(args.checkpoint)
    samples, manifest = _load_dataset_checked(args.data)
    if manifest.get("size") != config.input_size:
        raise CliError(f"dataset size {manifest.get('size')} != model input_size "
                       f"{config.input_size}")
    seed = args.split_seed if args.split_seed is not None else meta.get("train_seed", 0)
    ratios = tuple(meta.get("split_ratios", (0.70, 0.15, 0.15)))
    by_id = {s.id: s for s in samples}
    split = split_dataset(sorted(by_id), ratios=ratios, seed=seed)
    ids = split.ids_for(args.split)
    if not ids:
        raise CliError(f"split {args.split!r} is empty for this dataset")
    chosen = [by_id[i] for i in ids]
    rep = pipeline.evaluate(params, config, chosen, threshold=args.threshold,
                            hd95_method=args.hd95_method,
                            apply_nesting=args.enforce_nesting)
    out = Path(args.out)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    paths = report.write_report_files(rep, out, method=config.variant)
    agg = rep.aggregates()
    for region in ("WT", "TC", "ET"):
        print(f"{region}: DSC {agg[region]['dsc_mean']:.3f}  "
              f"HD95 {agg[region]['hd95_mean']:.2f}")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def _cmd_predict(args) -> int:
    from . import pipeline, report
    from .data import FileFormatError, read_tensor_file, write_tensor_file
    if not 0.0 < args.threshold < 1.0:
        raise CliError("--threshold must be in (0,1)")
    params, config, _ = _load_checkpoint_checked(args.checkpoint)
    _require_file(args.image, "image file")
    try:
        image = read_tensor_file(args.image)
    except FileFormatError as exc:
        raise CliError(f"cannot read image: {exc}")
    if image.ndim != 3 or image.shape[-1] != config.input_channels:
        raise CliError(f"image shape {image.shape} does not match model input "
                       f"(H,W,{config.input_channels})")
    if image.shape[0] % 32 or image.shape[1] % 32:
        raise CliError("image spatial dims must be divisible by 32")
    probs = pipeline.predict_probs(params, config, image.astype("float32"))
    hard = probs > args.threshold
    if args.enforce_nesting:
        hard = pipeline.enforce_nesting(hard)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor_file(probs.astype("float32"), out_dir / "probs.sgt")
    for c, region in enumerate(("wt", "tc", "et")):
        write_tensor_file(hard[:, :, c].astype("uint8"),
                          out_dir / f"mask_{region}.sgt")
    report.prediction_figure(image, probs, hard, None, out_dir / "prediction.png")
    print(f"wrote probabilities and masks to {out_dir}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from . import pipeline, report
    merged = load_config_file(args.config) if args.config else default_config()
    if args.print_config:
        return _print_config(merged)
    if not args.config or not args.data or not args.out:
        raise CliError("ablate requires --config, --data and --out")
    samples, manifest = _load_dataset_checked(args.data)
    config = _build_train_config(merged)
    if manifest.get("size") != config.model.input_size:
        raise CliError(f"dataset size {manifest.get('size')} != model input_size "
                       f"{config.model.input_size}")
    try:
        result, histories = pipeline.ablate(config, samples)
    except pipeline.TrainingDivergedError as exc:
        print(f"ablation diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    paths = report.write_ablation_files(result, histories, args.out)
    print(report.ablation_table(result), end="")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from . import pipeline
    variants = [args.variant] if args.variant else ["baseline", "enhanced"]
    all_pass = True
    for variant in variants:
        result = pipeline.gradcheck(variant=variant, seed=args.seed,
                                    coords_per_param=args.coords,
                                    max_params=args.max_params)
        status = "PASS" if result.passed else "FAIL"
        print(f"{variant}: max relative error {result.max_rel_error:.3e} "
              f"vs 1e-05 -> {status}  ({result.runtime_s:.1f}s)")
        all_pass = all_pass and result.passed
    return EXIT_OK if all_pass else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="pin BLAS thread count (env: SEGNET_THREADS)")

    parser = _Parser(prog="segnet",
                     description="Residual U-Net tumor segmentation toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", required=True, type=int, help="number of samples")
    p.add_argument("--size", type=int, default=128, help="image size (multiple of 32)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--print-config", action="store_true",
                   help="print the merged configuration and exit")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--hd95-method", choices=("directed_max", "union"),
                   default="directed_max")
    p.add_argument("--enforce-nesting", action="store_true")
    p.add_argument("--split-seed", type=int, default=None,
                   help="override the split seed stored in the checkpoint")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", parents=[common],
                       help="segment one image tensor file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input image (.sgt tensor file)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--enforce-nesting", action="store_true",
                   help="force ET <= TC <= WT on the thresholded masks")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("ablate", parents=[common],
                       help="train and compare baseline vs enhanced variants")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient check on miniature configs")
    p.add_argument("--variant", choices=("baseline", "enhanced"), default=None,
                   help="check one variant (default: both)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=20,
                   help="coordinates sampled per parameter tensor")
    p.add_argument("--max-params", type=int, default=None,
                   help="limit checked parameter tensors (smoke testing)")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            print("segnet: a COMMAND is required", file=sys.stderr)
            return EXIT_VALIDATION
        _apply_threads(args.threads)
        return args.func(args)
    except CliError as exc:
        print(f"segnet: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"segnet: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

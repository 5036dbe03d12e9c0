"""Command-line entry point: generate / train / eval / predict / gradcheck.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure. Every command is deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import augment as augmod
from . import config as cfgmod
from . import dataio, datagen, encoders, fusion, trainer
from . import tensor as T
from .config import ConfigError
from .dataio import DataError
from .tensor import NonFiniteError, Tensor
from .trainer import NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit((EXIT_USAGE, f"{self.prog}: error: {message}"))


def _parse_fractions(text: str, n: int, flag: str):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise ConfigError(f"{flag}: {e}") from e
    if len(values) != n:
        raise ConfigError(f"{flag} expects {n} comma-separated values, got {len(values)}")
    return values


def _mode_from_flag(mode: str | None) -> str | None:
    return None if mode is None else mode.replace("-", "_")


# -- commands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    priors = _parse_fractions(args.priors, 3, "--priors")
    manifest = datagen.gen_dataset(args.out, n=args.samples, priors=priors,
                                   seed=args.seed, segment_length=args.segment_len)
    counts = {name: 0 for name in manifest.classes}
    for rec in manifest.records:
        counts[rec.label] += 1
    print(f"wrote {len(manifest.records)} samples in {len(manifest.segments())} segments "
          f"to {args.out}")
    for name in manifest.classes:
        print(f"  {name}: {counts[name]}")
    return EXIT_OK


def _resolve_splits(dataset: dataio.Dataset, args) -> dataio.Dataset:
    has_splits = all(rec.split for rec in dataset.manifest.records)
    if args.auto_split:
        fractions = _parse_fractions(args.auto_split, 3, "--auto-split")
        split_seed = args.seed if args.seed is not None else 0
        manifest = dataio.split_by_segment(dataset.manifest, fractions, seed=split_seed)
        return dataio.Dataset(dataset.root, manifest)
    if not has_splits:
        raise DataError("dataset has no split labels; rerun with --auto-split 0.7,0.2,0.1")
    return dataset


def cmd_train(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    overrides = {}
    if args.mode:
        overrides["mode"] = _mode_from_flag(args.mode)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = trainer.TrainConfig(**{**_train_kwargs(cfg), **overrides})
    dataset = _resolve_splits(dataio.read_dataset(args.data), args)

    result = trainer.train(cfg, dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_checkpoint(out, result.params, cfgmod.config_echo(cfg))
    log_path = out.parent / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as f:
        for entry in result.log:
            f.write(json.dumps(entry) + "\n")
    if result.aborted:
        print(f"training diverged; last good checkpoint written to {out}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {cfg.mode} model: best val acc {result.best_val_acc:.4f} "
          f"at epoch {result.best_epoch} ({len(result.log)} epochs, "
          f"{result.wall_time:.1f}s); checkpoint {out}, log {log_path}")
    return EXIT_OK


def _train_kwargs(cfg: trainer.TrainConfig) -> dict:
    return dict(lr=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                max_epochs=cfg.max_epochs, patience=cfg.patience, seed=cfg.seed,
                mode=cfg.mode, class_weights=cfg.class_weights, encoder=cfg.encoder,
                fusion=cfg.fusion, augment=cfg.augment)


def _load_model(path):
    params, echo = dataio.load_checkpoint(path)
    cfg = cfgmod.train_config_from_echo(echo)
    expected = fusion.init_model_params(cfg.encoder, cfg.fusion, seed=0, mode=cfg.mode)
    dataio.check_config_echo(params, expected, path=str(path))
    return params, cfg


def cmd_eval(args) -> int:
    params, cfg = _load_model(args.ckpt)
    dataset = dataio.read_dataset(args.data)
    records = dataset.split(args.split)
    if not records:
        raise DataError(f"split {args.split!r} is empty")
    report = trainer.evaluate(params, records, dataset, cfg)
    doc = report.to_dict()
    doc["split"] = args.split
    doc["mode"] = cfg.mode
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    print(f"{args.split}: accuracy {report.accuracy:.4f}, macro-F1 {report.macro_f1:.4f} "
          f"({report.confusion.total} samples)")
    for cond, entry in report.per_condition.items():
        print(f"  {cond}: accuracy {entry['accuracy']:.4f} ({entry['count']})")
    return EXIT_OK


def cmd_predict(args) -> int:
    params, cfg = _load_model(args.ckpt)
    image = augmod.preprocess_image(dataio.read_ppm(Path(args.image)), cfg.augment)
    imu = None
    if cfg.mode == fusion.MODE_VISION_ONLY:
        if args.imu:
            print("warning: vision-only checkpoint; --imu is ignored", file=sys.stderr)
    else:
        if not args.imu:
            raise DataError("fused checkpoint requires --imu")
        imu = dataio.read_imu_csv(Path(args.imu))
    out = fusion.forward_full(Tensor(image), None if imu is None else Tensor(imu),
                              params, cfg.encoder, cfg.fusion, mode=cfg.mode)
    classes = list(datagen.CLASSES)[:cfg.fusion.n_classes]
    if cfg.fusion.n_classes != len(datagen.CLASSES):
        classes = [f"class{i}" for i in range(cfg.fusion.n_classes)]
    probs = out.y.data
    pred = int(np.argmax(probs))
    print(f"prediction: {classes[pred]}")
    for name, p in zip(classes, probs):
        print(f"  {name}: {p:.4f}")
    gate = out.mean_gate()
    print(f"mean gate (vision share): {'n/a' if gate is None else f'{gate:.4f}'}")
    return EXIT_OK


def gradcheck_presets():
    tiny = (encoders.tiny_encoder_config(), fusion.tiny_fusion_config())
    small = (encoders.EncoderConfig(image_size=16, vision_widths=(3, 4), d_vis=12,
                                    d_sensor=6, imu_window=40, imu_conv_width=6,
                                    imu_conv_kernel=5, imu_conv_stride=2, blstm_hidden=4),
             fusion.FusionConfig(n_tokens=3, d_latent=8, n_heads=2, n_classes=3))
    return {"tiny": tiny, "default": small}


def run_gradcheck(dims: str = "tiny", tol: float = 1e-4, corrupt: bool = False):
    """Full forward gradcheck (encoders + fusion + loss) in float64."""
    enc_cfg, fus_cfg = gradcheck_presets()[dims]
    params = fusion.init_model_params(enc_cfg, fus_cfg, seed=0, mode=fusion.MODE_FUSED,
                                      dtype=np.float64)
    rng = np.random.default_rng(1)
    img = Tensor(rng.random((3, enc_cfg.image_size, enc_cfg.image_size)), dtype=np.float64)
    imu = Tensor(rng.normal(size=(enc_cfg.d_sensor, enc_cfg.imu_window)), dtype=np.float64)
    label = int(rng.integers(0, fus_cfg.n_classes))

    def f():
        out = fusion.forward_full(img, imu, params, enc_cfg, fus_cfg)
        return trainer.cross_entropy(out.logits, label)

    T.set_debug_corrupt_adjoint(corrupt)
    try:
        return T.gradcheck(f, params, tol=tol)
    finally:
        T.set_debug_corrupt_adjoint(False)


def cmd_gradcheck(args) -> int:
    started = time.time()
    report = run_gradcheck(args.dims, corrupt=args.debug_corrupt)
    elapsed = time.time() - started
    print(f"gradcheck ({args.dims} dims, {len(report.per_param)} tensors, "
          f"{elapsed:.1f}s): max rel err {report.max_err:.3e} "
          f"[worst: {report.worst_param}] tol {report.tol:.0e} "
          f"-> {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roadfuse",
                     description="Camera-IMU road surface classification workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=600)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--priors", default=",".join(str(v) for v in datagen.DEFAULT_PRIORS))
    p.add_argument("--segment-len", type=int, default=10)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["fused", "vision-only"], default=None)
    p.add_argument("--auto-split", default=None, metavar="TRAIN,VAL,TEST")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=list(dataio.SPLITS), default="test")
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one image (+ IMU window)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--imu", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="verify adjoints against finite differences")
    p.add_argument("--dims", choices=["tiny", "default"], default="tiny")
    p.add_argument("--debug-corrupt", action="store_true",
                   help="deliberately corrupt one adjoint (negative control)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if isinstance(e.code, tuple):
            code, message = e.code
            print(message, file=sys.stderr)
            return code
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

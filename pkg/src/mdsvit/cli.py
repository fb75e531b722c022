"""Command-line interface: train, train-merge, eval, predict, synthesize, grad-check.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .codec import IMAGE_EXTENSIONS, decode_image, encode_image
from .data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    AugmentConfig,
    SaliencyDataset,
    load_manifest,
    normalize_image,
    resize_bilinear,
)
from .exceptions import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DecodeError,
    ManifestError,
    MDSViTError,
    ShapeError,
)
from .metrics import LossWeights, MetricReport, evaluate
from .model import ModelConfig, build_model
from .tensor import Tensor

log = logging.getLogger("mdsvit")

DEFAULTS: dict[str, object] = {
    "model.preset": "toy",
    "model.input_h": 0,
    "model.input_w": 0,
    "train.epochs": 15,
    "train.batch_size": 4,
    "train.lr": 1e-4,
    "train.weight_decay": 0.0,
    "train.step_size": 10,
    "train.gamma": 0.5,
    "train.patience": 5,
    "train.augment": False,
    "train.freeze_batchnorm": False,
    "merge.epochs": 15,
    "merge.batch_size": 64,
    "merge.lr": 1e-5,
    "merge.weight_decay": 0.01,
    "loss.sim": 1.0,
    "loss.cc": 2.0,
    "loss.kl": 10.0,
    "synth.n": 8,
    "synth.n_val": 4,
    "synth.height": 96,
    "synth.width": 128,
    "seed": 0,
}


class UsageError(MDSViTError):
    pass


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None


@dataclass
class RunConfig:
    command: str
    config_path: str | None = None
    overrides: list[str] = field(default_factory=list)
    seed: int | None = None
    out: str = "mdsvit_out"
    values: dict = field(default_factory=dict)

    def resolve(self) -> "RunConfig":
        """Defaults, then the JSON file, then --set overrides, then --seed."""
        values = dict(DEFAULTS)
        layered: list[tuple[str, object]] = []
        if self.config_path:
            path = Path(self.config_path)
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file {path} does not exist") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"config file {path} must hold a flat JSON object")
            layered.extend(data.items())
        for item in self.overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            layered.append((k.strip(), v))
        unknown = [k for k, _ in layered if k not in DEFAULTS]
        if unknown:
            raise ConfigError(
                f"unknown config key(s) {', '.join(map(repr, unknown))}; valid keys: {', '.join(sorted(DEFAULTS))}"
            )
        for k, v in layered:
            values[k] = _coerce(k, v)
        if self.seed is not None:
            values["seed"] = int(self.seed)
        self.values = values
        return self

    def __getitem__(self, key):
        return self.values[key]

    def input_hw(self):
        h, w = self["model.input_h"], self["model.input_w"]
        if (h == 0) != (w == 0):
            raise ConfigError("set both model.input_h and model.input_w, or neither")
        return (h, w) if h else None

    def model_config(self) -> ModelConfig:
        return ModelConfig.preset_config(self["model.preset"], self.input_hw())

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(self["loss.sim"], self["loss.cc"], self["loss.kl"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, stage: str = "train"):
        from .training import TrainConfig

        p = "merge" if stage == "merge" else "train"
        cfg = TrainConfig(
            epochs=self[f"{p}.epochs"],
            batch_size=self[f"{p}.batch_size"],
            lr=self[f"{p}.lr"],
            weight_decay=self[f"{p}.weight_decay"],
            step_size=self["train.step_size"],
            gamma=self["train.gamma"],
            patience=self["train.patience"],
            seed=self["seed"],
            augment=AugmentConfig() if self["train.augment"] else None,
            freeze_batchnorm=self["train.freeze_batchnorm"],
            loss_weights=self.loss_weights(),
            checkpoint_dir=self.out,
            log_path=str(Path(self.out) / "log.csv"),
        )
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _splits(root, hw):
    train = SaliencyDataset(load_manifest(root, "train"), hw)
    if (Path(root) / "images" / "val").is_dir():
        val = SaliencyDataset(load_manifest(root, "val"), hw)
    else:
        log.warning("no val split under %s; validating on the train split", root)
        val = train
    return train, val


def _final_report(result, out: Path, keys) -> dict:
    best = result.log.records[[r.val_loss for r in result.log.records].index(min(r.val_loss for r in result.log.records))]
    reports = {k: best.reports[k].to_dict() for k in keys}
    payload = {"epoch": best.epoch, "val_loss": best.val_loss, "reports": reports}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return payload


def cmd_train(args, rc: RunConfig) -> int:
    from .training import train_main

    model_cfg = rc.model_config()
    train, val = _splits(args.data, model_cfg.input_hw)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(model_cfg, seed=rc["seed"])
    result = train_main(model, train, val, rc.train_config())
    payload = _final_report(result, out, ("map1", "map2"))
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_train_merge(args, rc: RunConfig) -> int:
    from .training import load_checkpoint, model_from_checkpoint, train_merge

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    train, val = _splits(args.data, model.config.input_hw)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_merge(model, train, val, rc.train_config("merge"))
    payload = _final_report(result, out, ("merged",))
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _image_files(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise UsageError(f"directory {d} does not exist")
    return {p.stem: p for p in sorted(d.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS}


def load_eval_pairs(pred_dir, gt_dir, fix_dir=None):
    """Decode prediction / ground-truth maps paired by basename."""
    preds, gts = _image_files(Path(pred_dir)), _image_files(Path(gt_dir))
    common = sorted(set(preds) & set(gts))
    if not common:
        raise UsageError(f"no overlapping basenames between {pred_dir} and {gt_dir}")
    fixes = _image_files(Path(fix_dir)) if fix_dir else {}
    p = [decode_image(preds[k]).mean(axis=0) for k in common]
    g = [decode_image(gts[k]).mean(axis=0) for k in common]
    f = None
    if fix_dir:
        missing = [k for k in common if k not in fixes]
        if missing:
            raise UsageError(f"fixation maps missing for: {', '.join(missing)}")
        f = [decode_image(fixes[k]).max(axis=0) > 0.5 for k in common]
    return common, p, g, f


def cmd_eval(args, rc: RunConfig) -> int:
    ids, p, g, f = load_eval_pairs(args.predictions, args.ground_truth, args.fixations)
    report = evaluate(p, g, f)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    print(report.to_text())
    return 0


def cmd_predict(args, rc: RunConfig) -> int:
    from .training import load_checkpoint, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    want = rc.input_hw()
    if want is not None and tuple(want) != tuple(model.config.input_hw):
        raise UsageError(
            f"checkpoint was built for input {tuple(model.config.input_hw)}, requested {tuple(want)}; "
            "positional tables and encoder grids depend on resolution, so retrain (or rebuild) at the new size"
        )
    if args.mode == "merged" and not any(k.startswith("merge.") for k, _ in model.named_parameters()):
        raise UsageError("checkpoint has no merge head")
    keys = ("map1", "map2", "merged") if args.mode == "merged" else ("map1", "map2")
    out = Path(rc.out)
    for k in keys:
        (out / k).mkdir(parents=True, exist_ok=True)
    model.eval()
    hw = model.config.input_hw
    for path in args.images:
        img = decode_image(path)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        x = normalize_image(np.clip(resize_bilinear(img, hw), 0.0, 1.0), IMAGENET_MEAN, IMAGENET_STD)
        with T.no_grad():
            maps = model(Tensor(x[None].astype(np.float32)), args.mode)
        for k in keys:
            m = resize_bilinear(maps[k].data[0], img.shape[1:])
            target = out / k / f"{Path(path).stem}.{args.format}"
            encode_image(target, np.clip(m, 0.0, 1.0))
            print(target)
    return 0


def cmd_synthesize(args, rc: RunConfig) -> int:
    from .synth import synthesize

    n = args.n if args.n is not None else rc["synth.n"]
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    n_val = args.n_val if args.n_val is not None else rc["synth.n_val"]
    hw = (rc["synth.height"], rc["synth.width"])
    synthesize(rc.out, n, hw, seed=rc["seed"], n_val=n_val)
    print(f"wrote {n} train and {n_val} val samples at {hw[0]}x{hw[1]} under {rc.out}")
    return 0


def cmd_grad_check(args, rc: RunConfig) -> int:
    from .gradcheck import format_table, run_suite

    reports = run_suite(args.only or None)
    if args.only and len(reports) != len(set(args.only)):
        raise UsageError("unknown op name in --only")
    print(format_table(reports))
    failing = [r.op_name for r in reports if not r.passed]
    print(f"{len(reports) - len(failing)}/{len(reports)} ops passed")
    if failing:
        print("failing ops: " + ", ".join(failing))
        return 1
    return 0


COMMANDS = {
    "train": cmd_train,
    "train-merge": cmd_train_merge,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "synthesize": cmd_synthesize,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file with dotted keys, e.g. {\"train.lr\": 1e-4}")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="seed for initialisation, shuffling and synthesis")
    common.add_argument("--out", default="mdsvit_out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mdsvit", description="Dual-decoder transformer saliency prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train backbone, encoders and both decoders")
    p.add_argument("--data", required=True, help="dataset root (images/, maps/, fixations/)")

    p = sub.add_parser("train-merge", parents=[common], help="train the merge head on a frozen model")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", parents=[common], help="score predicted maps against ground truth")
    p.add_argument("predictions")
    p.add_argument("ground_truth")
    p.add_argument("--fixations", help="binary fixation maps for AUC (default: binarised ground truth)")

    p = sub.add_parser("predict", parents=[common], help="write saliency heatmaps for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--mode", choices=("dual", "merged"), default="dual")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")

    p = sub.add_parser("synthesize", parents=[common], help="generate a synthetic blob dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--n-val", type=int)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--only", nargs="*", help="restrict to these registry names")
    return parser


def _limit_threads():
    n = os.environ.get("MDSVIT_NUM_THREADS")
    if not n:
        return None
    try:
        count = int(n)
    except ValueError:
        raise ConfigError(f"MDSVIT_NUM_THREADS must be an integer, got {n!r}") from None
    if count < 1:
        raise ConfigError(f"MDSVIT_NUM_THREADS must be >= 1, got {count}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=count)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = RunConfig(args.command, args.config, args.overrides, args.seed, args.out).resolve()
        limiter = _limit_threads()
        try:
            return COMMANDS[args.command](args, rc)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ConfigError, ManifestError, AlignmentError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MDSViTError, CheckpointError, DecodeError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

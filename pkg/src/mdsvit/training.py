"""Optimisation, scheduling, early stopping, checkpoints and the two training loops."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .data import AugmentConfig, DatasetManifest, SaliencyDataset, batch_iter
from .exceptions import (
    CheckpointIntegrityError,
    ConfigError,
    IncompatibleCheckpointError,
    NonFiniteError,
)
from .layers import BatchNorm2d, Module, Parameter
from .metrics import LossWeights, MetricReport, combined_loss, evaluate
from .model import MDSViTNet, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"MDSV"
FORMAT_VERSION = 1
LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_auc", "val_cc", "val_sim", "val_kl")


# ---------------------------------------------------------------------------
# optimiser / scheduler / early stopping
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params: dict[str, Parameter] = dict(named_params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            data = p.data
            if self.weight_decay:
                data = data - self.lr * self.weight_decay * data
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (data - self.lr * update).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.asarray(arrays[f"opt.m.{k}"], dtype=self.params[k].dtype).copy()
            self.v[k] = np.asarray(arrays[f"opt.v.{k}"], dtype=self.params[k].dtype).copy()
        self.step_count = int(step_count)


def adam_step(params: dict[str, Parameter], grads: dict[str, np.ndarray], state: AdamW) -> AdamW:
    """Functional form: install ``grads`` on ``params`` and apply one step of ``state``."""
    for k, p in params.items():
        p.grad = grads[k]
    state.step()
    return state


@dataclass
class StepLR:
    base_lr: float
    step_size: int = 10
    gamma: float = 0.5

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.gamma ** (epoch // self.step_size)


@dataclass
class EarlyStopping:
    patience: int = 5
    min_delta: float = 1e-6
    best: float = math.inf
    epochs_since_improvement: int = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; True means stop now."""
        if val_loss < self.best - self.min_delta:
            self.best = float(val_loss)
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience

    @property
    def improved(self) -> bool:
        return self.epochs_since_improvement == 0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    epoch: int = -1
    best_val_loss: float | None = None
    optimizer: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def model_state(self) -> dict[str, np.ndarray]:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}


def make_checkpoint(model: MDSViTNet, optimizer: AdamW | None = None, epoch: int = -1,
                    best_val_loss=None, seed: int = 0, extra=None) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    opt_meta = {}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
        opt_meta = {
            "step_count": optimizer.step_count,
            "lr": optimizer.lr,
            "betas": list(optimizer.betas),
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
        }
    return Checkpoint(
        config=model.config.to_dict(),
        tensors=tensors,
        epoch=epoch,
        best_val_loss=None if best_val_loss is None or not math.isfinite(best_val_loss) else float(best_val_loss),
        optimizer=opt_meta,
        rng_state={"seed": int(seed), "epoch": int(epoch)},
        extra=dict(extra or {}),
    )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.tensors)
    entries, payloads, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw + struct.pack("<I", zlib.crc32(raw)))
        offset += len(raw) + 4
    header = {
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "best_val_loss": ckpt.best_val_loss,
        "optimizer": ckpt.optimizer,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "tensors": entries,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", ckpt.version, len(hbytes)) + hbytes + b"".join(payloads)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointIntegrityError("not an MDSV checkpoint (bad magic or truncated preamble)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"checkpoint format version {version}; this build reads {FORMAT_VERSION}")
    if len(buf) < 12 + hlen:
        raise CheckpointIntegrityError("truncated checkpoint header")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"corrupt checkpoint header: {exc}") from None
    base = 12 + hlen
    if len(buf) != base + header["payload_bytes"]:
        raise CheckpointIntegrityError(
            f"checkpoint length {len(buf)} != expected {base + header['payload_bytes']}"
        )
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = buf[start : start + e["nbytes"]]
        (crc,) = struct.unpack_from("<I", buf, start + e["nbytes"])
        if zlib.crc32(raw) != crc:
            raise CheckpointIntegrityError(f"checksum mismatch in tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return Checkpoint(
        config=header["config"],
        tensors=tensors,
        epoch=header["epoch"],
        best_val_loss=header["best_val_loss"],
        optimizer=header["optimizer"],
        rng_state=header["rng_state"],
        extra=header["extra"],
        version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def model_from_checkpoint(ckpt: Checkpoint) -> MDSViTNet:
    model = MDSViTNet(ModelConfig.from_dict(ckpt.config), seed=0)
    model.load_state_dict(ckpt.model_state())
    return model


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.0
    step_size: int = 10
    gamma: float = 0.5
    patience: int = 5
    min_delta: float = 1e-6
    seed: int = 0
    augment: AugmentConfig | None = None
    freeze_batchnorm: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_dir: str | None = None
    log_path: str | None = None

    @classmethod
    def merge_defaults(cls, **overrides) -> "TrainConfig":
        params = {"batch_size": 64, "lr": 1e-5, "weight_decay": 0.01}
        params.update(overrides)
        return cls(**params)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.step_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size, step_size and patience must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or not 0 < self.gamma <= 1:
            raise ConfigError("lr and weight_decay must be >= 0 and gamma in (0, 1]")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_auc: float
    val_cc: float
    val_sim: float
    val_kl: float
    reports: dict[str, MetricReport] = field(default_factory=dict)

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.epoch, repr(r.lr)] + [f"{v:.9g}" for v in r.row()[2:]])


@dataclass
class TrainResult:
    log: TrainingLog
    best: Checkpoint | None
    last: Checkpoint | None
    stopped_early: bool = False


def as_dataset(data, hw) -> SaliencyDataset:
    if isinstance(data, SaliencyDataset):
        if tuple(data.target_hw) != tuple(hw):
            raise ConfigError(f"dataset resolution {data.target_hw} != model resolution {tuple(hw)}")
        return data
    if isinstance(data, DatasetManifest) or isinstance(data, (list, tuple)):
        return SaliencyDataset(data, hw)
    raise TypeError(f"cannot build a dataset from {type(data).__name__}")


def _check_finite(value: float, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {batch}")


def _set_bn_frozen(model: Module) -> None:
    for m in model.modules():
        if isinstance(m, BatchNorm2d):
            m.train(False)


def _predict_maps(model: MDSViTNet, dataset: SaliencyDataset, batch_size: int, keys=("map1", "map2")):
    """Eval-mode predictions for the whole dataset, in dataset order."""
    model.eval()
    mode = "merged" if "merged" in keys else "dual"
    maps = {k: [] for k in keys}
    with T.no_grad():
        for batch in batch_iter(dataset, batch_size, shuffle=False):
            out = model(Tensor(batch.images), mode)
            for k in keys:
                maps[k].extend(out[k].data[:, 0].copy())
    return maps


def _val_pass(model, dataset, batch_size, weights, keys):
    """Mean validation loss (summed over ``keys``) and a report per key."""
    maps = _predict_maps(model, dataset, batch_size, keys)
    gts = [dataset[i].saliency[0] for i in range(len(dataset))]
    fix = [dataset[i].fixation for i in range(len(dataset))]
    if any(f is None for f in fix):
        fix = None
    loss = 0.0
    with T.no_grad():
        for k in keys:
            pred = np.stack(maps[k])[:, None]
            loss += float(combined_loss(Tensor(pred), np.stack(gts)[:, None], weights).item())
    reports = {k: evaluate(maps[k], gts, fix) for k in keys}
    return loss, reports


def _record(epoch, lr, train_loss, val_loss, reports) -> EpochRecord:
    mean = MetricReport.mean(list(reports.values()))
    return EpochRecord(epoch, lr, train_loss, val_loss, mean.auc, mean.cc, mean.sim, mean.kl, reports)


def train_main(model: MDSViTNet, train_data, val_data, cfg: TrainConfig | None = None,
               resume: Checkpoint | None = None, callback=None) -> TrainResult:
    """Train backbone, encoders and both decoders on combined_loss(map1) + combined_loss(map2).

    ``callback(record)`` runs after every epoch; returning True ends training.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    hw = model.config.input_hw
    train_ds, val_ds = as_dataset(train_data, hw), as_dataset(val_data, hw)
    named = [(k, p) for k, p in model.named_parameters() if not k.startswith("merge.")]
    return _fit(model, named, train_ds, val_ds, cfg, resume, "main", callback)


def train_merge(model: MDSViTNet, train_data, val_data, cfg: TrainConfig | None = None,
                resume: Checkpoint | None = None, callback=None) -> TrainResult:
    """Train only the merge head on maps from the frozen main model."""
    cfg = cfg or TrainConfig.merge_defaults()
    cfg.validate()
    hw = model.config.input_hw
    train_ds, val_ds = as_dataset(train_data, hw), as_dataset(val_data, hw)
    if len(train_ds) < cfg.batch_size:
        warnings.warn(
            f"batch size {cfg.batch_size} exceeds dataset size {len(train_ds)}; using {len(train_ds)}",
            stacklevel=2,
        )
        cfg = TrainConfig(**{**asdict(cfg), "batch_size": len(train_ds),
                             "augment": cfg.augment, "loss_weights": cfg.loss_weights})
    frozen = [p for k, p in model.named_parameters() if not k.startswith("merge.")]
    flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad = False
        p.grad = None
    try:
        named = [(f"merge.{k}", p) for k, p in model.merge.named_parameters()]
        return _fit(model, named, train_ds, val_ds, cfg, resume, "merge", callback)
    finally:
        for p, f in zip(frozen, flags):
            p.requires_grad = f


def _fit(model, named, train_ds, val_ds, cfg: TrainConfig, resume, stage, callback=None):
    opt = AdamW(named, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = StepLR(cfg.lr, cfg.step_size, cfg.gamma)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.model_state())
        opt.load_state_arrays(resume.tensors, resume.optimizer.get("step_count", 0))
        start = resume.epoch + 1
        stopper.best = math.inf if resume.best_val_loss is None else resume.best_val_loss
        stopper.epochs_since_improvement = int(resume.extra.get("epochs_since_improvement", 0))
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    keys = ("map1", "map2") if stage == "main" else ("merged",)
    cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    result = TrainResult(TrainingLog(), None, None)

    for epoch in range(start, cfg.epochs):
        opt.lr = sched.lr_at(epoch)
        total, count = 0.0, 0
        for b, batch in enumerate(batch_iter(train_ds, cfg.batch_size, cfg.seed, epoch, cfg.augment)):
            if stage == "main":
                model.train()
                if cfg.freeze_batchnorm:
                    _set_bn_frozen(model)
                out = model(Tensor(batch.images), "dual")
                loss = combined_loss(out["map1"], batch.saliency, cfg.loss_weights) + combined_loss(
                    out["map2"], batch.saliency, cfg.loss_weights
                )
            else:
                m1, m2 = _frozen_maps(model, batch, cache if cfg.augment is None else None)
                model.merge.train(not cfg.freeze_batchnorm)
                loss = combined_loss(model.merge(Tensor(m1), Tensor(m2)), batch.saliency, cfg.loss_weights)
            value = loss.item()
            _check_finite(value, epoch, b)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(batch)
            count += len(batch)
        train_loss = total / count

        val_loss, reports = _val_pass(model, val_ds, max(cfg.batch_size, 1), cfg.loss_weights, keys)
        _check_finite(val_loss, epoch, -1)
        stop = stopper.step(val_loss)
        rec = _record(epoch, opt.lr, train_loss, val_loss, reports)
        result.log.append(rec)
        log.info("%s epoch %d lr %.3g train %.5f val %.5f cc %.4f", stage, epoch, opt.lr, train_loss, val_loss, rec.val_cc)

        extra = {"stage": stage, "epochs_since_improvement": stopper.epochs_since_improvement}
        last = make_checkpoint(model, opt, epoch, stopper.best, cfg.seed, extra)
        result.last = last
        if stopper.improved:
            result.best = last
            if ckpt_dir:
                save_checkpoint(ckpt_dir / "best.ckpt", last)
        if ckpt_dir:
            save_checkpoint(ckpt_dir / "last.ckpt", last)
        if cfg.log_path:
            result.log.write_csv(cfg.log_path)
        if stop:
            result.stopped_early = True
            break
        if callback is not None and callback(rec):
            break
    return result


def _frozen_maps(model: MDSViTNet, batch, cache):
    if cache is not None and all(i in cache for i in batch.ids):
        pairs = [cache[i] for i in batch.ids]
    else:
        model.eval()
        with T.no_grad():
            out = model(Tensor(batch.images), "dual")
        pairs = list(zip(out["map1"].data, out["map2"].data))
        if cache is not None:
            cache.update(zip(batch.ids, pairs))
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def parameter_digest(params: Iterable[Parameter]) -> str:
    """Checksum over parameter bytes, for freeze checks."""
    crc = 0
    for p in params:
        crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
    return f"{crc:08x}"

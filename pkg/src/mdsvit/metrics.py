"""Saliency losses (CC, SIM, KL and their weighted sum) and evaluation metrics.

Loss functions take a predicted map as a :class:`~mdsvit.tensor.Tensor` and
stay differentiable in it. Shapes (H, W), (1, H, W) and (N, 1, H, W) are
accepted; 4-D inputs are scored per sample and averaged over the batch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import AlignmentError, DegenerateInputError, ShapeError
from .tensor import Tensor

KL_EPS = 2.2204e-16


@dataclass(frozen=True)
class LossWeights:
    sim: float = 1.0
    cc: float = 2.0
    kl: float = 10.0

    def __post_init__(self):
        if min(self.sim, self.cc, self.kl) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


def _sample_axes(x) -> tuple[int, ...]:
    return tuple(range(1, x.ndim)) if x.ndim == 4 else tuple(range(x.ndim))


def _pair(pred, gt) -> tuple[Tensor, Tensor]:
    pred = T.as_tensor(pred)
    gt = Tensor(np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype))
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return pred, gt


def _batch_mean(per_sample: Tensor) -> Tensor:
    return per_sample.mean() if per_sample.ndim else per_sample


def _spread(total: Tensor, like: Tensor) -> Tensor:
    """Broadcast a per-sample statistic (reduced with keepdims) back over the map."""
    return total.broadcast_to(like.shape)


def normalize_map(m, mode: str = "sum"):
    """Sum-to-one or min-max normalisation, per sample.

    Works on numpy arrays and on tensors (differentiably).
    """
    is_tensor = isinstance(m, Tensor)
    arr = m.data if is_tensor else np.asarray(m, dtype=np.float64)
    axes = _sample_axes(arr)
    if mode == "sum":
        totals = arr.sum(axis=axes, keepdims=True)
        if np.any(totals == 0):
            raise DegenerateInputError("cannot sum-normalise an all-zero map")
        if is_tensor:
            return m / _spread(m.sum(axis=axes, keepdims=True), m)
        return arr / totals
    if mode == "minmax":
        lo = arr.min(axis=axes, keepdims=True)
        span = arr.max(axis=axes, keepdims=True) - lo
        if is_tensor:
            span_t = Tensor(np.where(span == 0, 1.0, span).astype(arr.dtype))
            return (m - _spread(Tensor(lo), m)) / _spread(span_t, m)
        return (arr - lo) / np.where(span == 0, 1.0, span)
    raise ValueError(f"mode must be 'sum' or 'minmax', got {mode!r}")


def loss_cc(pred, gt) -> Tensor:
    """Pearson correlation between prediction and ground truth."""
    p, t = _pair(pred, gt)
    axes = _sample_axes(p)
    for name, arr in (("prediction", p.data), ("ground truth", t.data)):
        if np.any(arr.max(axis=axes) == arr.min(axis=axes)):
            raise DegenerateInputError(f"correlation is undefined for a constant {name} map")
    a = p - _spread(p.mean(axis=axes, keepdims=True), p)
    b = t - _spread(t.mean(axis=axes, keepdims=True), t)
    num = (a * b).sum(axis=axes)
    den = T.sqrt((a * a).sum(axis=axes) * (b * b).sum(axis=axes))
    return _batch_mean(num / den)


def loss_sim(pred, gt) -> Tensor:
    """Histogram intersection of the sum-normalised maps."""
    p, t = _pair(pred, gt)
    axes = _sample_axes(p)
    inter = T.minimum(normalize_map(p, "sum"), normalize_map(t, "sum"))
    return _batch_mean(inter.sum(axis=axes))


def loss_kl(pred, gt, eps: float = KL_EPS) -> Tensor:
    """sum_i gt_i * log(eps + gt_i / (eps + pred_i)) over sum-normalised maps."""
    p, t = _pair(pred, gt)
    axes = _sample_axes(p)
    p_n = normalize_map(p, "sum")
    t_n = normalize_map(t, "sum")
    ratio = t_n / (p_n + eps)
    return _batch_mean((t_n * T.log(ratio + eps)).sum(axis=axes))


def combined_loss(pred, gt, weights: LossWeights = LossWeights()) -> Tensor:
    """w_kl * KL - w_cc * CC - w_sim * SIM."""
    total = None
    for w, fn, sign in ((weights.kl, loss_kl, 1.0), (weights.cc, loss_cc, -1.0), (weights.sim, loss_sim, -1.0)):
        if w == 0:
            continue
        term = fn(pred, gt) * (sign * w)
        total = term if total is None else total + term
    if total is None:
        return T.tensor(0.0, dtype=T.as_tensor(pred).dtype)
    return total


# ---------------------------------------------------------------------------
# evaluation (float64, no graph)
# ---------------------------------------------------------------------------

def _as_map(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ShapeError(f"expected a single 2-D map, got shape {np.shape(x)}")
    return arr


def _metric(fn, pred, gt) -> float:
    with T.no_grad():
        return fn(Tensor(_as_map(pred)), _as_map(gt)).item()


def cc(pred, gt) -> float:
    return _metric(loss_cc, pred, gt)


def sim(pred, gt) -> float:
    return _metric(loss_sim, pred, gt)


def kl(pred, gt) -> float:
    return _metric(loss_kl, pred, gt)


def binarize_ground_truth(gt_map, threshold: float = 0.5) -> np.ndarray:
    """Positive class = ground-truth saliency >= threshold after min-max scaling."""
    return normalize_map(_as_map(gt_map), "minmax") >= threshold


def auc_threshold_sweep(pred, gt_binary, n_thresholds: int = 255) -> float:
    """ROC area from a threshold sweep over the min-max normalised prediction.

    Pixels with ``pred >= t`` are positive. (0, 0) and (1, 1) are added to
    the curve, which is sorted by FPR and integrated with the trapezoid rule.
    """
    p = normalize_map(_as_map(pred), "minmax").ravel()
    g = np.asarray(gt_binary).astype(bool).ravel()
    if p.shape != g.shape:
        raise ShapeError(f"prediction has {p.size} pixels, ground truth {g.size}")
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC is undefined when the ground truth has a single class")
    thresholds = np.linspace(0.0, 1.0, int(n_thresholds))
    pos = np.sort(p[g])
    neg = np.sort(p[~g])
    tp = n_pos - np.searchsorted(pos, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg, thresholds, side="left")
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    order = np.lexsort((tpr, fpr))
    # trapezoid sums can overshoot 1 by an ulp
    return float(np.clip(np.trapezoid(tpr[order], fpr[order]), 0.0, 1.0))


@dataclass
class MetricReport:
    auc: float
    kl: float
    cc: float
    sim: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}" for k, v in self.to_dict().items())

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(**{k: d[k] for k in ("auc", "kl", "cc", "sim", "n_samples")})

    @classmethod
    def mean(cls, reports: Sequence["MetricReport"]) -> "MetricReport":
        n = sum(r.n_samples for r in reports)
        avg = {k: sum(getattr(r, k) * r.n_samples for r in reports) / n for k in ("auc", "kl", "cc", "sim")}
        return cls(n_samples=n, **avg)


def evaluate(pred_maps, gt_maps, gt_fixation_binaries=None, n_thresholds: int = 255) -> MetricReport:
    """Average AUC / KL / CC / SIM over aligned samples.

    AUC uses the fixation map when given, else the binarised ground truth.
    A constant prediction has CC 0 (uncorrelated) rather than raising.
    """
    pred_maps, gt_maps = list(pred_maps), list(gt_maps)
    if len(pred_maps) != len(gt_maps):
        raise AlignmentError(f"{len(pred_maps)} predictions vs {len(gt_maps)} ground-truth maps")
    if not pred_maps:
        raise AlignmentError("nothing to evaluate")
    fix = list(gt_fixation_binaries) if gt_fixation_binaries is not None else [None] * len(gt_maps)
    if len(fix) != len(gt_maps):
        raise AlignmentError(f"{len(fix)} fixation maps vs {len(gt_maps)} ground-truth maps")
    rows = []
    for p, g, f in zip(pred_maps, gt_maps, fix):
        p, g = _as_map(p), _as_map(g)
        if p.shape != g.shape:
            raise AlignmentError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
        positives = binarize_ground_truth(g) if f is None else _as_map(f) > 0.5
        try:
            c = cc(p, g)
        except DegenerateInputError:
            c = 0.0
        rows.append((auc_threshold_sweep(p, positives, n_thresholds), kl(p, g), c, sim(p, g)))
    auc_v, kl_v, cc_v, sim_v = np.mean(np.asarray(rows), axis=0)
    return MetricReport(float(auc_v), float(kl_v), float(cc_v), float(sim_v), len(rows))

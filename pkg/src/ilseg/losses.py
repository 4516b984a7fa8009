"""Label-space remapping and the segmentation / distillation losses.

A stage sees ground truth only for the categories it introduces; every
other structure is annotated as background. Two linear recombinations of
the softmax output reconcile that with a head covering all categories:

- the old view folds the new-category probabilities into background and
  keeps old categories, matching what the previous model can predict;
- the current view folds the old-category probabilities into background
  and keeps the new categories, matching what the stage labels describe.

Both are channel mixes with constant 0/1 matrices whose columns each sum
to one, so probability mass is conserved exactly. The segmentation loss
is voxel-mean cross entropy plus category-mean soft Dice on the current
view; distillation is a voxel-mean KL divergence from the frozen model's
output to the old view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "LabelSpace",
    "remap_hat",
    "remap_tilde",
    "seg_loss",
    "full_softmax_loss",
    "merged_sample_loss",
    "kd_loss",
]

PROB_CLAMP = 1e-8
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LabelSpace:
    """Category ids split by when the model learned them.

    Head channel order is [background, *old, *new]; `old` lists ids in
    registration order from previous stages, `new` the ids introduced by
    the current stage. Background is id 0, channel 0.
    """

    old: tuple[int, ...]
    new: tuple[int, ...]

    def __post_init__(self):
        old = tuple(int(c) for c in self.old)
        new = tuple(int(c) for c in self.new)
        object.__setattr__(self, "old", old)
        object.__setattr__(self, "new", new)
        if 0 in old or 0 in new:
            raise ValueError("category id 0 is reserved for background")
        if len(set(old)) != len(old) or len(set(new)) != len(new):
            raise ValueError(f"duplicate category ids in {old} / {new}")
        if set(old) & set(new):
            raise ValueError(f"old and new categories overlap: {sorted(set(old) & set(new))}")

    @property
    def n_old(self) -> int:
        return len(self.old)

    @property
    def n_new(self) -> int:
        return len(self.new)

    @property
    def width(self) -> int:
        return 1 + self.n_old + self.n_new

    def channel_of(self, category_id: int) -> int:
        if category_id == 0:
            return 0
        ids = self.old + self.new
        try:
            return 1 + ids.index(int(category_id))
        except ValueError:
            raise KeyError(f"category {category_id} not in label space {ids}") from None


def _hat_matrix(space: LabelSpace, dtype) -> np.ndarray:
    """(1 + n_old, width) merge matrix: background absorbs new categories."""
    m = np.zeros((1 + space.n_old, space.width), dtype=dtype)
    m[0, 0] = 1
    for j in range(space.n_new):
        m[0, 1 + space.n_old + j] = 1
    for i in range(space.n_old):
        m[1 + i, 1 + i] = 1
    return m


def _tilde_matrix(space: LabelSpace, dtype) -> np.ndarray:
    """(width, width) merge matrix: background absorbs old categories,
    old output rows are zeroed, new categories pass through."""
    m = np.zeros((space.width, space.width), dtype=dtype)
    m[0, 0] = 1
    for i in range(space.n_old):
        m[0, 1 + i] = 1
    for j in range(space.n_new):
        k = 1 + space.n_old + j
        m[k, k] = 1
    return m


def _check_logits(op: str, logits: Tensor, space: LabelSpace) -> None:
    if logits.data.ndim != 4:
        raise T.ShapeError(f"{op}: expected (B, C, H, W) logits, got {logits.data.shape}")
    if logits.data.shape[1] != space.width:
        raise T.ShapeError(f"{op}: logits have {logits.data.shape[1]} channels, label space needs {space.width}")


def remap_hat(logits: Tensor, space: LabelSpace) -> Tensor:
    """Old-model view of the softmax output.

    Channel 0 carries background plus all current-stage categories; the
    remaining channels are the old-category softmax entries unchanged.
    With no old categories the result is a single channel of ones.
    """
    _check_logits("remap_hat", logits, space)
    probs = T.softmax(logits, axis=1)
    return T.channel_mix(probs, _hat_matrix(space, logits.data.dtype))


def remap_tilde(logits: Tensor, space: LabelSpace) -> Tensor:
    """Current-stage view of the softmax output.

    Channel 0 carries background plus all old categories, old channels
    are zeroed placeholders, and new-category channels pass through. The
    stage must introduce at least one category.
    """
    if space.n_new == 0:
        raise ValueError("remap_tilde: the current stage introduces no categories")
    _check_logits("remap_tilde", logits, space)
    probs = T.softmax(logits, axis=1)
    return T.channel_mix(probs, _tilde_matrix(space, logits.data.dtype))


def _ce_dice(
    probs: Tensor,
    target_idx: np.ndarray,
    n_channels: int,
    ce_weight: float,
    dice_weight: float,
) -> Tensor:
    """Voxel-mean cross entropy plus category-mean soft Dice.

    `probs` is (B, C', H, W), `target_idx` integer (B, H, W) in [0, C').
    Dice statistics pool over the whole batch; the epsilon guards both
    numerator and denominator so an all-empty channel scores 1.
    """
    b, c, h, w = probs.data.shape
    onehot = (target_idx[:, None, :, :] == np.arange(n_channels)[None, :, None, None]).astype(probs.data.dtype)
    oh = T.constant(onehot, probs.data.dtype)
    n_vox = b * h * w
    logp = T.log(T.clamp_min(probs, PROB_CLAMP))
    ce = T.tsum(T.mul(oh, logp)) * (-1.0 / n_vox)
    inter = T.tsum(T.mul(probs, oh), axis=(0, 2, 3))
    psum = T.tsum(probs, axis=(0, 2, 3))
    gsum = T.tsum(oh, axis=(0, 2, 3))
    eps = float(DICE_EPS)
    dice = T.div(inter * 2.0 + eps, psum + gsum + eps)
    dice_term = 1.0 - T.tmean(dice)
    return ce * float(ce_weight) + dice_term * float(dice_weight)


def seg_loss(
    tilde_probs: Tensor,
    labels: np.ndarray,
    space: LabelSpace,
    ce_weight: float = 1.0,
    dice_weight: float = 1.0,
) -> Tensor:
    """Stage supervision on the current view of the output.

    `labels` is (B, H, W) with values in {0} | new category ids; any old
    category id in the ground truth is rejected. The zeroed old channels
    of `tilde_probs` are dropped before scoring, so the loss runs over
    the merged space [background+old, *new].
    """
    if tilde_probs.data.ndim != 4 or tilde_probs.data.shape[1] != space.width:
        raise T.ShapeError(f"seg_loss: expected {space.width}-channel current view, got {tilde_probs.data.shape}")
    labels = np.asarray(labels)
    if labels.shape != (tilde_probs.data.shape[0],) + tilde_probs.data.shape[2:]:
        raise T.ShapeError(f"seg_loss: labels {labels.shape} do not match probabilities {tilde_probs.data.shape}")
    allowed = np.array([0] + list(space.new))
    if not np.isin(labels, allowed).all():
        bad = sorted(set(np.unique(labels).tolist()) - set(allowed.tolist()))
        raise ValueError(f"seg_loss: labels contain categories outside the current stage: {bad}")
    # select [background, *new] channels out of the full-width view
    sel = np.zeros((1 + space.n_new, space.width), dtype=tilde_probs.data.dtype)
    sel[0, 0] = 1
    for j in range(space.n_new):
        sel[1 + j, 1 + space.n_old + j] = 1
    compact = T.channel_mix(tilde_probs, sel)
    target_idx = np.zeros(labels.shape, dtype=np.int64)
    for j, cat in enumerate(space.new):
        target_idx[labels == cat] = 1 + j
    return _ce_dice(compact, target_idx, 1 + space.n_new, ce_weight, dice_weight)


def full_softmax_loss(
    logits: Tensor,
    labels: np.ndarray,
    space: LabelSpace,
    ce_weight: float = 1.0,
    dice_weight: float = 1.0,
) -> Tensor:
    """Plain supervision over every head channel (no remapping).

    Used by the naive fine-tuning baseline: unlabeled structures count
    as background, so old categories are actively unlearned. `labels`
    may contain any registered category id.
    """
    _check_logits("full_softmax_loss", logits, space)
    labels = np.asarray(labels)
    if labels.shape != (logits.data.shape[0],) + logits.data.shape[2:]:
        raise T.ShapeError(f"full_softmax_loss: labels {labels.shape} do not match logits {logits.data.shape}")
    ids = (0,) + space.old + space.new
    if not np.isin(labels, np.array(ids)).all():
        bad = sorted(set(np.unique(labels).tolist()) - set(ids))
        raise ValueError(f"full_softmax_loss: unknown category ids {bad}")
    probs = T.softmax(logits, axis=1)
    target_idx = np.zeros(labels.shape, dtype=np.int64)
    for cat in space.old + space.new:
        target_idx[labels == cat] = space.channel_of(cat)
    return _ce_dice(probs, target_idx, space.width, ce_weight, dice_weight)


def merged_sample_loss(
    logits: Tensor,
    labels: np.ndarray,
    registry: tuple[int, ...],
    annotated: tuple[int, ...],
    ce_weight: float = 1.0,
    dice_weight: float = 1.0,
) -> Tensor:
    """Supervision for one sample with an arbitrary annotated subset.

    Every registered category the sample does not annotate merges into
    background; annotated categories keep their own channel. This is the
    per-sample view used when training jointly over datasets whose
    annotation sets differ. `logits` is (1, 1 + len(registry), H, W).
    """
    registry = tuple(int(c) for c in registry)
    annotated = tuple(int(c) for c in annotated)
    unknown = set(annotated) - set(registry)
    if unknown:
        raise ValueError(f"merged_sample_loss: annotated ids {sorted(unknown)} not in registry {registry}")
    if not annotated:
        raise ValueError("merged_sample_loss: sample annotates no categories")
    width = 1 + len(registry)
    if logits.data.ndim != 4 or logits.data.shape[1] != width:
        raise T.ShapeError(f"merged_sample_loss: expected {width}-channel logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.data.shape[0],) + logits.data.shape[2:]:
        raise T.ShapeError(f"merged_sample_loss: labels {labels.shape} do not match logits {logits.data.shape}")
    if not np.isin(labels, np.array([0] + list(annotated))).all():
        bad = sorted(set(np.unique(labels).tolist()) - {0} - set(annotated))
        raise ValueError(f"merged_sample_loss: labels carry unannotated categories {bad}")
    mat = np.zeros((1 + len(annotated), width), dtype=logits.data.dtype)
    mat[0, 0] = 1
    for i, cat in enumerate(registry):
        if cat not in annotated:
            mat[0, 1 + i] = 1
    for j, cat in enumerate(annotated):
        mat[1 + j, 1 + registry.index(cat)] = 1
    merged = T.channel_mix(T.softmax(logits, axis=1), mat)
    target_idx = np.zeros(labels.shape, dtype=np.int64)
    for j, cat in enumerate(annotated):
        target_idx[labels == cat] = 1 + j
    return _ce_dice(merged, target_idx, 1 + len(annotated), ce_weight, dice_weight)


def kd_loss(hat_probs: Tensor, old_probs: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Voxel-mean KL(frozen || current old view).

    `old_probs` is the frozen model's softmax output, a constant of the
    same (B, 1 + n_old, H, W) shape as `hat_probs`. With a single merged
    channel (first stage) the divergence is exactly zero. A temperature
    other than 1 sharpens or flattens both distributions before scoring.
    """
    old_probs = np.asarray(old_probs, dtype=hat_probs.data.dtype)
    if hat_probs.data.shape != old_probs.shape:
        raise T.ShapeError(f"kd_loss: shape mismatch {hat_probs.data.shape} vs {old_probs.shape}")
    if hat_probs.data.ndim != 4:
        raise T.ShapeError(f"kd_loss: expected (B, C, H, W), got {hat_probs.data.shape}")
    b, c, h, w = old_probs.shape
    if c == 1:
        return T.constant(np.zeros((), dtype=hat_probs.data.dtype))
    n_vox = b * h * w
    log_hat = T.log(T.clamp_min(hat_probs, PROB_CLAMP))
    old = np.clip(old_probs, PROB_CLAMP, None)
    if temperature != 1.0:
        inv_t = 1.0 / float(temperature)
        log_hat = T.log_softmax(log_hat * inv_t, axis=1)
        lo = np.log(old) * inv_t
        lo = lo - lo.max(axis=1, keepdims=True)
        old = np.exp(lo)
        old /= old.sum(axis=1, keepdims=True)
    entropy = float((old * np.log(old)).sum() / n_vox)
    cross = T.tsum(T.mul(T.constant(old, hat_probs.data.dtype), log_hat)) * (1.0 / n_vox)
    return entropy - cross

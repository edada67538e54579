"""Ground-truth region oracles, pixel-wise losses, and the polynomial
learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .context import (FeatureMap, OcrParams, RegionReps, RelationMatrix,
                      SoftRegionSet, augment, ocr_aggregate)
from .errors import ConfigError, DataError, DimensionError, ParameterError

IGNORE_INDEX = 255


@dataclass
class LabelMap:
    """Integer class labels per pixel, (H, W); ``ignore_index`` marks pixels
    excluded from losses, metrics, and ground-truth regions."""

    labels: np.ndarray
    num_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise DimensionError(f"labels must be (H, W), got {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise DataError(f"labels must be integers, got dtype {self.labels.dtype}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        flat = self.labels.ravel()
        bad = flat[(flat != self.ignore_index) & ((flat < 0) | (flat >= self.num_classes))]
        if bad.size:
            raise DataError(
                f"label {int(bad[0])} outside [0, {self.num_classes}) and not "
                f"ignore_index {self.ignore_index}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.labels.ravel()


@dataclass
class LossConfig:
    """Weights of the final and auxiliary pixel-wise cross entropies."""

    final_weight: float = 1.0
    aux_weight: float = 0.4
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self) -> None:
        if self.final_weight < 0 or self.aux_weight < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass
class PolySchedule:
    """Polynomial decay from ``base_lr`` to 0 over ``max_iter`` steps.

    The conventional factor is (1 - iter/max_iter)^power. ``literal`` selects
    the alternative parenthesization 1 - (iter/max_iter)^power.
    """

    base_lr: float
    max_iter: int
    power: float = 0.9
    literal: bool = False

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.power <= 0:
            raise ConfigError(f"power must be > 0, got {self.power}")


def poly_lr(schedule: PolySchedule, iteration: int) -> float:
    """Learning rate at ``iteration``; clamped to 0 past ``max_iter``."""
    if iteration < 0:
        raise ParameterError(f"iteration must be >= 0, got {iteration}")
    frac = min(iteration, schedule.max_iter) / schedule.max_iter
    if schedule.literal:
        factor = 1.0 - frac ** schedule.power
    else:
        factor = (1.0 - frac) ** schedule.power
    return schedule.base_lr * factor


def gt_regions(labels: LabelMap, num_regions: int | None = None) -> SoftRegionSet:
    """One-hot ground-truth regions, spatially normalized: row k weights the
    pixels labeled k uniformly (1/count). Classes with no pixels yield an
    all-zero row and are flagged; ignored pixels belong to no region."""
    k = labels.num_classes if num_regions is None else int(num_regions)
    if k < labels.num_classes:
        raise ConfigError(
            f"num_regions {k} cannot be below num_classes {labels.num_classes}")
    flat = labels.flat
    n = flat.size
    member = np.zeros((k, n))
    valid = flat != labels.ignore_index
    member[flat[valid], np.where(valid)[0]] = 1.0
    counts = member.sum(axis=1)
    normalized = np.zeros_like(member)
    empty = []
    for c in range(k):
        if counts[c] > 0:
            normalized[c] = member[c] / counts[c]
        else:
            empty.append(c)
    return SoftRegionSet(T.Tensor(member), T.Tensor(normalized),
                         labels.height, labels.width, tuple(empty))


def gt_relations(labels: LabelMap, num_regions: int | None = None) -> RelationMatrix:
    """One-hot ground-truth relations: pixel i relates only to the region of
    its own label. Ignored pixels get a zero row and are flagged."""
    k = labels.num_classes if num_regions is None else int(num_regions)
    if k < labels.num_classes:
        raise ConfigError(
            f"num_regions {k} cannot be below num_classes {labels.num_classes}")
    flat = labels.flat
    n = flat.size
    weights = np.zeros((n, k))
    valid = flat != labels.ignore_index
    weights[np.where(valid)[0], flat[valid]] = 1.0
    zero_rows = tuple(int(i) for i in np.where(~valid)[0])
    return RelationMatrix(T.Tensor(weights), labels.height, labels.width, zero_rows)


def gt_ocr_forward(x: FeatureMap, labels: LabelMap,
                   params: OcrParams) -> tuple[FeatureMap, SoftRegionSet]:
    """The context pipeline with oracle regions and relations substituted.
    Pixels sharing a label receive identical contextual features. The value,
    output, and fuse transforms (and the optional stem) stay learned."""
    if (labels.height, labels.width) != (x.height, x.width):
        raise DimensionError(
            f"labels {labels.height}x{labels.width} do not match features "
            f"{x.height}x{x.width}")
    regions = gt_regions(labels)
    relations = gt_relations(labels)
    feats = x if params.stem is None else FeatureMap(params.stem(x.tensor))
    reps = RegionReps(T.matmul(regions.normalized, T.transpose(feats.pixels())))
    y = ocr_aggregate(relations, reps, params.value_transform, params.output_transform)
    z = augment(feats, y, params.fuse_transform)
    return z, regions


def pixel_cross_entropy(logits: T.Tensor, labels: LabelMap,
                        ignore_index: int | None = None) -> T.Tensor:
    """Mean cross entropy of (K, N) logits against the label map."""
    ignore = labels.ignore_index if ignore_index is None else ignore_index
    if logits.data.shape[0] < labels.num_classes:
        raise DimensionError(
            f"{logits.data.shape[0]} logit rows for {labels.num_classes} classes")
    return T.cross_entropy_logits(logits, labels.flat, ignore_index=ignore)


def combined_loss(final_logits: T.Tensor, aux_logits: T.Tensor | None,
                  labels: LabelMap, cfg: LossConfig) -> T.Tensor:
    """final_weight * CE(final) + aux_weight * CE(aux). ``aux_logits`` may be
    None (models without a coarse head), dropping the auxiliary term."""
    loss = T.scale(pixel_cross_entropy(final_logits, labels, cfg.ignore_index),
                   cfg.final_weight)
    if aux_logits is not None and cfg.aux_weight > 0:
        aux = T.scale(pixel_cross_entropy(aux_logits, labels, cfg.ignore_index),
                      cfg.aux_weight)
        loss = T.add(loss, aux)
    return loss

"""Training loop, evaluation metrics, ablation grid, checkpoints.

Everything here is deterministic given the run config: scene sampling, init,
and the update order all draw from seeded generators, and the emitted CSV and
checkpoint bytes are reproducible across runs on the same platform.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .config import RunConfig
from .context import FeatureMap
from .blocks import Sgd
from .data import SyntheticScene, lift_weights, scene_features, scene_label_map
from .errors import ConfigError, DataError, TrainingDiverged
from .models import SegmentationModel, build_model
from .supervision import LabelMap, LossConfig, PolySchedule, combined_loss, poly_lr

ABLATION_SCHEMES = ("ocr", "da", "acf")


def prepare_features(scenes: list[SyntheticScene],
                     cfg: RunConfig) -> list[tuple[FeatureMap, LabelMap]]:
    """Lift every scene once; training then reuses the cached tensors."""
    lift = lift_weights(cfg.seed, cfg.feat_channels)
    pairs = []
    for scene in scenes:
        pairs.append((scene_features(scene, lift),
                      scene_label_map(scene, cfg.classes)))
    return pairs


@dataclass
class TrainRow:
    iteration: int
    lr: float
    loss: float


def train_model(cfg: RunConfig,
                pairs: list[tuple[FeatureMap, LabelMap]],
                ) -> tuple[SegmentationModel, list[TrainRow]]:
    if not pairs:
        raise DataError("no training scenes")
    model = build_model(cfg.model_config(), image_size=cfg.grid)
    opt = Sgd(model.parameters(), momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    # iterations=0 means "checkpoint the initialization"; the schedule is
    # never consulted then, but its constructor still wants max_iter >= 1.
    schedule = PolySchedule(cfg.base_lr, max(cfg.iterations, 1), cfg.poly_power,
                            literal=cfg.poly_literal)
    loss_cfg = LossConfig(
        final_weight=cfg.final_weight,
        aux_weight=cfg.aux_weight if cfg.aux_supervision else 0.0)
    order = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    rows = []
    for it in range(cfg.iterations):
        feats, labels = pairs[int(order.integers(len(pairs)))]
        out = model.forward(feats, labels)
        aux = out.aux_logits if cfg.aux_supervision else None
        loss = combined_loss(out.final_logits, aux, labels, loss_cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at iteration {it}")
        lr = poly_lr(schedule, it)
        T.backward(loss)
        opt.step(lr)
        opt.zero_grad()
        rows.append(TrainRow(it, lr, value))
    return model, rows


def train_log_csv(rows: list[TrainRow]) -> str:
    lines = ["iteration,lr,loss"]
    for r in rows:
        lines.append(f"{r.iteration},{r.lr:.10g},{r.loss:.10g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    pixel_accuracy: float
    mean_iou: float
    per_class_iou: tuple  # None for classes absent from both gt and pred
    confusion: np.ndarray  # (K, K), rows gt, cols predicted

    def csv(self) -> str:
        header = ["pixel_accuracy", "mean_iou"]
        row = [f"{self.pixel_accuracy:.6f}", f"{self.mean_iou:.6f}"]
        for k, iou in enumerate(self.per_class_iou):
            header.append(f"iou_{k}")
            row.append("" if iou is None else f"{iou:.6f}")
        return ",".join(header) + "\n" + ",".join(row) + "\n"


def evaluate_model(model: SegmentationModel,
                   pairs: list[tuple[FeatureMap, LabelMap]]) -> EvalResult:
    if not pairs:
        raise DataError("no evaluation scenes")
    num_classes = pairs[0][1].num_classes
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    with T.no_grad():
        for feats, labels in pairs:
            out = model.forward(feats, labels)
            # ties go to the lowest class index
            pred = np.argmax(out.final_logits.data, axis=0)
            gt = labels.labels.reshape(-1)
            valid = gt != labels.ignore_index
            np.add.at(conf, (gt[valid].astype(np.int64), pred[valid]), 1)
    total = int(conf.sum())
    if total == 0:
        raise DataError("every evaluation pixel is ignored")
    ious = []
    for k in range(num_classes):
        inter = int(conf[k, k])
        union = int(conf[k, :].sum() + conf[:, k].sum()) - inter
        ious.append(inter / union if union > 0 else None)
    present = [v for v in ious if v is not None]
    mean_iou = sum(present) / len(present) if present else 0.0
    return EvalResult(
        pixel_accuracy=float(np.trace(conf)) / total,
        mean_iou=mean_iou, per_class_iou=tuple(ious), confusion=conf)


# ---------------------------------------------------------------------------
# ablation grid: context scheme x auxiliary supervision, shared data and seeds


@dataclass
class AblationCell:
    scheme: str
    aux_supervision: bool
    mean_iou: float | None
    pixel_accuracy: float | None
    error: str | None = None


def run_ablation(cfg: RunConfig,
                 train_pairs: list[tuple[FeatureMap, LabelMap]],
                 eval_pairs: list[tuple[FeatureMap, LabelMap]],
                 schemes: tuple[str, ...] = ABLATION_SCHEMES,
                 ) -> list[AblationCell]:
    cells = []
    for aux in (True, False):
        for scheme in schemes:
            run = replace(cfg, module=scheme, aux_supervision=aux)
            try:
                model, _ = train_model(run, train_pairs)
                result = evaluate_model(model, eval_pairs)
                cells.append(AblationCell(scheme, aux, result.mean_iou,
                                          result.pixel_accuracy))
            except (TrainingDiverged, DataError, ConfigError) as exc:
                cells.append(AblationCell(scheme, aux, None, None, str(exc)))
    return cells


def ablation_csv(cells: list[AblationCell],
                 schemes: tuple[str, ...] = ABLATION_SCHEMES) -> str:
    by_key = {(c.scheme, c.aux_supervision): c for c in cells}
    lines = ["supervision," + ",".join(schemes)]
    for aux, name in ((True, "with"), (False, "without")):
        row = [name]
        for scheme in schemes:
            cell = by_key.get((scheme, aux))
            if cell is None or cell.mean_iou is None:
                row.append("")
            else:
                row.append(f"{cell.mean_iou:.4f}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints: tiny self-describing binary, byte-stable across runs

_CKPT_MAGIC = b"OCRSEG1\n"


def save_checkpoint(path: str, model: SegmentationModel) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, param in model.named_parameters():
        raw = np.ascontiguousarray(param.data).tobytes()
        entries.append({"name": name, "shape": list(param.data.shape),
                        "dtype": str(param.data.dtype),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format": 1, "entries": entries},
                        sort_keys=True).encode("ascii")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(b"".join(blobs))


def load_checkpoint(path: str, model: SegmentationModel) -> None:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode("ascii"))
        body = f.read()
    state = {}
    for entry in header["entries"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(body):
            raise DataError(f"truncated checkpoint: {path}")
        flat = np.frombuffer(body[start:start + nbytes],
                             dtype=np.dtype(entry["dtype"]))
        state[entry["name"]] = flat.reshape(entry["shape"]).copy()
    model.load_state(state)

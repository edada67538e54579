"""Trainable segmentation heads, one per context scheme.

Each model owns its parameters, exposes ``forward`` (final logits plus
optional coarse/auxiliary logits) and a closed-form ``flop_breakdown`` used by
the profiler. The same assemblies are trained at desk scale and profiled at
full scale, so the analytic counts describe exactly the code that runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flopcount as F
from . import tensor as T
from .blocks import Conv1x1Head, Conv3x3Block, TransformBlock, uniform_init
from .context import (DilatedConvSpec, FeatureMap, OcrConfig, OcrParams,
                      aspp_lite, augment, global_context, ocr_forward, ppm_lite,
                      scaled_rates, self_attention_context)
from .errors import ConfigError
from .supervision import LabelMap, gt_ocr_forward

MODULE_CHOICES = ("ocr", "da", "acf", "gt_ocr", "self_attn", "global",
                  "aspp_lite", "ppm_lite")


@dataclass
class ModelConfig:
    """Widths and scheme switches for one segmentation head."""

    module: str = "ocr"
    in_channels: int = 16
    num_classes: int = 4
    key_channels: int = 16
    mid_channels: int = 32
    attention_scale: str = "unit"
    da_regions: int = 0
    use_stem: bool = True
    aspp_rates: tuple[int, ...] = (1, 6, 12)
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    seed: int = 0
    dtype: str = "double"

    def __post_init__(self) -> None:
        if self.module not in MODULE_CHOICES:
            raise ConfigError(f"module must be one of {MODULE_CHOICES}, "
                              f"got {self.module!r}")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigError("in_channels and num_classes must be >= 1")
        if self.dtype not in ("double", "single"):
            raise ConfigError(f"dtype must be 'double' or 'single', got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "double" else np.float32


@dataclass
class ModelOutput:
    final_logits: T.Tensor          # (K, N)
    aux_logits: T.Tensor | None     # coarse segmentation, when the scheme has one


class SegmentationModel:
    """Base: named parameters, forward, and analytic cost breakdown."""

    name = "base"
    needs_labels = False

    def __init__(self, cfg: ModelConfig) -> None:
        self.cfg = cfg
        self._named: list[tuple[str, T.Tensor]] = []

    def _register(self, prefix: str, obj) -> None:
        self._named.extend(obj.named_parameters(prefix + "."))

    def named_parameters(self) -> list[tuple[str, T.Tensor]]:
        return list(self._named)

    def parameters(self) -> list[T.Tensor]:
        return [t for _, t in self._named]

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self._named)
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ConfigError(f"checkpoint mismatch; missing={missing} extra={extra}")
        for name, tensor in own.items():
            if tensor.data.shape != state[name].shape:
                raise ConfigError(
                    f"checkpoint entry {name} has shape {state[name].shape}, "
                    f"model expects {tensor.data.shape}")
            tensor.data[...] = state[name]

    def forward(self, x: FeatureMap, labels: LabelMap | None = None) -> ModelOutput:
        raise NotImplementedError

    def flop_breakdown(self, height: int, width: int) -> dict[str, int]:
        raise NotImplementedError

    def analytic_flops(self, height: int, width: int) -> int:
        return sum(self.flop_breakdown(height, width).values())


def _final_head_flops(cfg: ModelConfig, c_in: int, n: int) -> int:
    return F.conv1x1_flops(c_in, cfg.num_classes, n, bias=True)


class OcrModel(SegmentationModel):
    """Region-context pipeline; relation scheme per config (ocr / da / acf) or
    oracle regions and relations (gt_ocr)."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.name = cfg.module
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        dt = cfg.np_dtype
        scheme = "ocr" if cfg.module == "gt_ocr" else cfg.module
        self.ocr_config = OcrConfig(
            num_classes=cfg.num_classes, key_channels=cfg.key_channels,
            mid_channels=cfg.mid_channels, attention_scale=cfg.attention_scale,
            relation_scheme=scheme, da_regions=cfg.da_regions)
        pipe_in = cfg.mid_channels if cfg.use_stem else cfg.in_channels
        self.pipe_in = pipe_in

        stem = None
        if cfg.use_stem:
            stem = Conv3x3Block.create(rng, cfg.in_channels, cfg.mid_channels, dt)
        region_head = Conv1x1Head.create(rng, cfg.in_channels, cfg.num_classes,
                                         bias=False, dtype=dt)
        pixel_t = region_t = None
        if scheme == "ocr":
            # only the learned-relation scheme compares pixel and region keys
            pixel_t = TransformBlock.create(rng, pipe_in, cfg.key_channels, dt)
            region_t = TransformBlock.create(rng, pipe_in, cfg.key_channels, dt)
        value_t = TransformBlock.create(rng, pipe_in, cfg.key_channels, dt)
        output_t = TransformBlock.create(rng, cfg.key_channels, cfg.mid_channels, dt)
        fuse_t = TransformBlock.create(rng, pipe_in + cfg.mid_channels,
                                       cfg.mid_channels, dt)
        da_predictor = da_maps = None
        if scheme == "da":
            regions = cfg.da_regions or cfg.num_classes
            da_predictor = Conv1x1Head.create(rng, pipe_in, regions, bias=True, dtype=dt)
            if regions != cfg.num_classes:
                da_maps = Conv1x1Head.create(rng, pipe_in, regions, bias=False, dtype=dt)
        self.params = OcrParams(self.ocr_config, region_head, pixel_t, region_t,
                                value_t, output_t, fuse_t, stem, da_predictor, da_maps)
        self.final_head = Conv1x1Head.create(rng, cfg.mid_channels, cfg.num_classes,
                                             bias=True, dtype=dt)
        self.needs_labels = cfg.module == "gt_ocr"

        gt = cfg.module == "gt_ocr"
        if stem is not None:
            self._register("stem", stem)
        if not gt:
            # Under oracle regions and relations the classifier and both key
            # transforms never receive gradients, so they are not state.
            self._register("region_head", region_head)
            if pixel_t is not None:
                self._register("pixel_transform", pixel_t)
                self._register("region_transform", region_t)
        self._register("value_transform", value_t)
        self._register("output_transform", output_t)
        self._register("fuse_transform", fuse_t)
        if da_predictor is not None:
            self._register("da_predictor", da_predictor)
        if da_maps is not None:
            self._register("da_maps", da_maps)
        self._register("final_head", self.final_head)

    def forward(self, x: FeatureMap, labels: LabelMap | None = None) -> ModelOutput:
        if self.cfg.module == "gt_ocr":
            if labels is None:
                raise ConfigError("gt_ocr forward requires a label map")
            z, regions = gt_ocr_forward(x, labels, self.params)
            aux = None
        else:
            z, regions = ocr_forward(x, self.params)
            aux = regions.logits
        final = self.final_head(z.pixels())
        return ModelOutput(final, aux)

    def flop_breakdown(self, height: int, width: int) -> dict[str, int]:
        cfg = self.cfg
        n = height * width
        k = cfg.num_classes
        pipe_regions = k
        scheme = self.ocr_config.relation_scheme
        if scheme == "da":
            pipe_regions = cfg.da_regions or k
        out: dict[str, int] = {}
        if cfg.use_stem:
            out["stem"] = F.block_flops(cfg.in_channels, cfg.mid_channels, n, kernel=3)
        if cfg.module != "gt_ocr":
            out["region_head"] = F.conv1x1_flops(cfg.in_channels, k, n)
            out["region_softmax"] = F.softmax_flops(k, n)
        if scheme == "da" and self.params.da_maps is not None:
            out["da_maps"] = (F.conv1x1_flops(self.pipe_in, pipe_regions, n)
                              + F.softmax_flops(pipe_regions, n))
        out["region_pool"] = F.matmul_flops(pipe_regions, n, self.pipe_in)
        if scheme == "ocr" and cfg.module != "gt_ocr":
            out["pixel_keys"] = F.block_flops(self.pipe_in, cfg.key_channels, n)
            out["region_keys"] = F.block_flops(self.pipe_in, cfg.key_channels,
                                               pipe_regions)
            out["relation_logits"] = F.matmul_flops(n, cfg.key_channels, pipe_regions)
            out["relation_softmax"] = F.softmax_flops(n, pipe_regions)
        elif scheme == "da":
            out["relation_predictor"] = F.conv1x1_flops(
                self.pipe_in, pipe_regions, n, bias=True)
            out["relation_softmax"] = F.softmax_flops(n, pipe_regions)
        elif scheme == "acf":
            out["relation_softmax"] = F.softmax_flops(n, k)
        out["region_values"] = F.block_flops(self.pipe_in, cfg.key_channels,
                                             pipe_regions)
        out["aggregation"] = F.matmul_flops(n, pipe_regions, cfg.key_channels)
        out["output_transform"] = F.block_flops(cfg.key_channels, cfg.mid_channels, n)
        out["fuse"] = F.block_flops(self.pipe_in + cfg.mid_channels,
                                    cfg.mid_channels, n)
        out["final_head"] = _final_head_flops(cfg, cfg.mid_channels, n)
        return out


class SelfAttentionModel(SegmentationModel):
    """Dense pairwise attention context: the quadratic-cost baseline."""

    name = "self_attn"

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        dt = cfg.np_dtype
        pipe_in = cfg.mid_channels if cfg.use_stem else cfg.in_channels
        self.pipe_in = pipe_in
        self.stem = Conv3x3Block.create(rng, cfg.in_channels, cfg.mid_channels, dt) \
            if cfg.use_stem else None
        self.pixel_t = TransformBlock.create(rng, pipe_in, cfg.key_channels, dt)
        self.context_t = TransformBlock.create(rng, pipe_in, cfg.key_channels, dt)
        self.value_t = TransformBlock.create(rng, pipe_in, cfg.key_channels, dt)
        self.output_t = TransformBlock.create(rng, cfg.key_channels, cfg.mid_channels, dt)
        self.fuse_t = TransformBlock.create(rng, pipe_in + cfg.mid_channels,
                                            cfg.mid_channels, dt)
        self.final_head = Conv1x1Head.create(rng, cfg.mid_channels, cfg.num_classes,
                                             bias=True, dtype=dt)
        self.scale = 1.0 if cfg.attention_scale == "unit" else \
            1.0 / float(np.sqrt(cfg.key_channels))
        if self.stem is not None:
            self._register("stem", self.stem)
        for prefix, obj in (("pixel_transform", self.pixel_t),
                            ("context_transform", self.context_t),
                            ("value_transform", self.value_t),
                            ("output_transform", self.output_t),
                            ("fuse_transform", self.fuse_t),
                            ("final_head", self.final_head)):
            self._register(prefix, obj)

    def forward(self, x: FeatureMap, labels: LabelMap | None = None) -> ModelOutput:
        feats = x if self.stem is None else FeatureMap(self.stem(x.tensor))
        y = self_attention_context(feats, self.pixel_t, self.context_t,
                                   self.value_t, self.output_t, scale=self.scale)
        z = augment(feats, y, self.fuse_t)
        return ModelOutput(self.final_head(z.pixels()), None)

    def flop_breakdown(self, height: int, width: int) -> dict[str, int]:
        cfg = self.cfg
        n = height * width
        out: dict[str, int] = {}
        if cfg.use_stem:
            out["stem"] = F.block_flops(cfg.in_channels, cfg.mid_channels, n, kernel=3)
        out["pixel_keys"] = F.block_flops(self.pipe_in, cfg.key_channels, n)
        out["context_keys"] = F.block_flops(self.pipe_in, cfg.key_channels, n)
        out["values"] = F.block_flops(self.pipe_in, cfg.key_channels, n)
        out["relation_logits"] = F.matmul_flops(n, cfg.key_channels, n)
        out["relation_softmax"] = F.softmax_flops(n, n)
        out["aggregation"] = F.matmul_flops(n, n, cfg.key_channels)
        out["output_transform"] = F.block_flops(cfg.key_channels, cfg.mid_channels, n)
        out["fuse"] = F.block_flops(self.pipe_in + cfg.mid_channels,
                                    cfg.mid_channels, n)
        out["final_head"] = _final_head_flops(cfg, cfg.mid_channels, n)
        return out


class GlobalContextModel(SegmentationModel):
    """Single pooled context shared by every pixel."""

    name = "global"

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        dt = cfg.np_dtype
        pipe_in = cfg.mid_channels if cfg.use_stem else cfg.in_channels
        self.pipe_in = pipe_in
        self.stem = Conv3x3Block.create(rng, cfg.in_channels, cfg.mid_channels, dt) \
            if cfg.use_stem else None
        self.value_t = TransformBlock.create(rng, pipe_in, cfg.key_channels, dt)
        self.output_t = TransformBlock.create(rng, cfg.key_channels, cfg.mid_channels, dt)
        self.fuse_t = TransformBlock.create(rng, pipe_in + cfg.mid_channels,
                                            cfg.mid_channels, dt)
        self.final_head = Conv1x1Head.create(rng, cfg.mid_channels, cfg.num_classes,
                                             bias=True, dtype=dt)
        if self.stem is not None:
            self._register("stem", self.stem)
        for prefix, obj in (("value_transform", self.value_t),
                            ("output_transform", self.output_t),
                            ("fuse_transform", self.fuse_t),
                            ("final_head", self.final_head)):
            self._register(prefix, obj)

    def forward(self, x: FeatureMap, labels: LabelMap | None = None) -> ModelOutput:
        feats = x if self.stem is None else FeatureMap(self.stem(x.tensor))
        y = global_context(feats, self.value_t, self.output_t)
        z = augment(feats, y, self.fuse_t)
        return ModelOutput(self.final_head(z.pixels()), None)

    def flop_breakdown(self, height: int, width: int) -> dict[str, int]:
        cfg = self.cfg
        n = height * width
        out: dict[str, int] = {}
        if cfg.use_stem:
            out["stem"] = F.block_flops(cfg.in_channels, cfg.mid_channels, n, kernel=3)
        out["values"] = F.block_flops(self.pipe_in, cfg.key_channels, n)
        out["pool"] = F.mean_flops(cfg.key_channels, n)
        out["output_transform"] = F.block_flops(cfg.key_channels, cfg.mid_channels, 1)
        out["fuse"] = F.block_flops(self.pipe_in + cfg.mid_channels,
                                    cfg.mid_channels, n)
        out["final_head"] = _final_head_flops(cfg, cfg.mid_channels, n)
        return out


class AsppModel(SegmentationModel):
    """Parallel dilated convolutions, concatenated, then classified."""

    name = "aspp_lite"

    def __init__(self, cfg: ModelConfig, image_size: int = 64) -> None:
        super().__init__(cfg)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        dt = cfg.np_dtype
        self.branch_channels = cfg.key_channels
        rates, self.rates_clipped = scaled_rates(cfg.aspp_rates, image_size, image_size)
        kernels = []
        for i, _ in enumerate(rates):
            kern = T.Tensor(uniform_init(rng, (self.branch_channels, cfg.in_channels,
                                               3, 3), cfg.in_channels * 9, dt),
                            requires_grad=True)
            kernels.append(kern)
            self._named.append((f"branch_{i}.weight", kern))
        self.spec = DilatedConvSpec(rates, tuple(kernels))
        cat_channels = self.branch_channels * len(rates)
        self.final_head = Conv1x1Head.create(rng, cat_channels, cfg.num_classes,
                                             bias=True, dtype=dt)
        self._register("final_head", self.final_head)

    def forward(self, x: FeatureMap, labels: LabelMap | None = None) -> ModelOutput:
        z = aspp_lite(x, self.spec)
        return ModelOutput(self.final_head(z.pixels()), None)

    def flop_breakdown(self, height: int, width: int) -> dict[str, int]:
        cfg = self.cfg
        n = height * width
        out: dict[str, int] = {}
        for i, _ in enumerate(self.spec.rates):
            out[f"branch_{i}"] = F.conv_kxk_flops(cfg.in_channels,
                                                  self.branch_channels, n, 3)
        cat = self.branch_channels * len(self.spec.rates)
        out["final_head"] = _final_head_flops(cfg, cat, n)
        return out


class PpmModel(SegmentationModel):
    """Pooling pyramid with the standard 3x3 fuse conv on the concatenation."""

    name = "ppm_lite"

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        dt = cfg.np_dtype
        bins = tuple(cfg.ppm_bins)
        self.bins = bins
        self.branch_channels = max(1, cfg.in_channels // len(bins))
        self.projections = []
        for i, _ in enumerate(bins):
            proj = Conv1x1Head.create(rng, cfg.in_channels, self.branch_channels,
                                      bias=False, dtype=dt)
            self.projections.append(proj)
            self._register(f"branch_{i}", proj)
        cat_channels = cfg.in_channels + self.branch_channels * len(bins)
        self.cat_channels = cat_channels
        self.fuse = Conv3x3Block.create(rng, cat_channels, cfg.mid_channels, dt)
        self._register("fuse", self.fuse)
        self.final_head = Conv1x1Head.create(rng, cfg.mid_channels, cfg.num_classes,
                                             bias=True, dtype=dt)
        self._register("final_head", self.final_head)

    def forward(self, x: FeatureMap, labels: LabelMap | None = None) -> ModelOutput:
        cat = ppm_lite(x, self.bins, self.projections)
        z = FeatureMap(self.fuse(cat.tensor))
        return ModelOutput(self.final_head(z.pixels()), None)

    def flop_breakdown(self, height: int, width: int) -> dict[str, int]:
        cfg = self.cfg
        n = height * width
        out: dict[str, int] = {}
        for i, b in enumerate(self.bins):
            cells = b * b
            out[f"pool_{i}"] = F.pool_flops(cfg.in_channels, n, cells)
            out[f"branch_{i}"] = F.conv1x1_flops(cfg.in_channels,
                                                 self.branch_channels, cells)
        out["fuse"] = F.block_flops(self.cat_channels, cfg.mid_channels, n, kernel=3)
        out["final_head"] = _final_head_flops(cfg, cfg.mid_channels, n)
        return out


def build_model(cfg: ModelConfig, image_size: int = 64) -> SegmentationModel:
    if cfg.module in ("ocr", "da", "acf", "gt_ocr"):
        return OcrModel(cfg)
    if cfg.module == "self_attn":
        return SelfAttentionModel(cfg)
    if cfg.module == "global":
        return GlobalContextModel(cfg)
    if cfg.module == "aspp_lite":
        return AsppModel(cfg, image_size=image_size)
    if cfg.module == "ppm_lite":
        return PpmModel(cfg)
    raise ConfigError(f"unknown module {cfg.module!r}")  # pragma: no cover


def full_scale_config(module: str, num_classes: int = 19) -> ModelConfig:
    """Widths of the published full-scale heads: 2048-channel input features,
    512 mid channels, 256 key channels, 64 regions for the double-attention
    style scheme."""
    return ModelConfig(module=module, in_channels=2048, num_classes=num_classes,
                       key_channels=256, mid_channels=512,
                       da_regions=64 if module == "da" else 0, use_stem=True)

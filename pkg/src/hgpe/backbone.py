"""H-GPE model family: stem, four stages, classifier head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import IRB, ConvBN, GPEBlock
from .nn import Linear, Module, ParamStore, Recorder, Sequential, initialize
from .tensor import Tensor


@dataclass
class ModelConfig:
    variant: str = "custom"
    stack_count: tuple[int, int, int, int] = (3, 2, 4, 3)
    out_channels: tuple[int, int, int, int] = (64, 128, 192, 256)
    expansion: int = 6
    # 0 = no GPE-Block in that stage
    window_sizes: tuple[int, int, int, int] = (0, 14, 14, 7)
    gig_kernel: int = 7
    num_classes: int = 1000
    input_size: tuple[int, int] = (224, 224)
    use_gig: bool = True
    use_lsae: bool = True
    use_asa_cra: bool = True
    num_heads: int = 1
    lsae_spatial: bool = True

    def __post_init__(self):
        for name in ("stack_count", "out_channels", "window_sizes", "input_size"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))

    def validate(self) -> "ModelConfig":
        if len(self.stack_count) != 4 or len(self.out_channels) != 4 or len(self.window_sizes) != 4:
            raise ValueError("stack_count, out_channels and window_sizes need 4 entries each")
        if any(s < 1 for s in self.stack_count):
            raise ValueError(f"stack counts must be >= 1, got {list(self.stack_count)}")
        if any(c < 1 for c in self.out_channels):
            raise ValueError(f"channel widths must be >= 1, got {list(self.out_channels)}")
        if any(w < 0 for w in self.window_sizes):
            raise ValueError(f"window sizes must be >= 0, got {list(self.window_sizes)}")
        if self.window_sizes[0]:
            raise ValueError("stage 1 holds IRBs only; window_sizes[0] must be 0")
        for i, (c, w) in enumerate(zip(self.out_channels, self.window_sizes), start=1):
            if w and c % 2:
                raise ValueError(f"stage {i}: GPE-Blocks need an even channel width, got {c}")
            if w and (c // 2) % self.num_heads:
                raise ValueError(f"stage {i}: {self.num_heads} heads do not divide {c // 2}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.gig_kernel < 1 or self.gig_kernel % 2 == 0:
            raise ValueError(f"gig_kernel must be a positive odd int, got {self.gig_kernel}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be (H, W), got {self.input_size}")
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


# Published variant hyperparameters; expansion ratios 6 / 2 / 2.
PRESETS = {
    "S": ModelConfig("S", (3, 2, 4, 3), (64, 128, 192, 256), 6),
    "T": ModelConfig("T", (3, 2, 4, 3), (64, 96, 128, 160), 2),
    "N": ModelConfig("N", (3, 2, 4, 3), (48, 64, 80, 112), 2),
}

# Reported (params M, GFLOPs) for the backbones.
REPORTED_COMPLEXITY = {"S": (5.6, 1.4), "T": (2.3, 0.5), "N": (1.2, 0.3)}

MICRO = ModelConfig("micro", (1, 1, 1, 1), (8, 12, 16, 20), 2, (0, 4, 4, 2),
                    num_classes=2, input_size=(32, 32))


def preset(name: str) -> ModelConfig:
    key = name.upper()
    if key == "MICRO":
        return MICRO.replace()
    if key not in PRESETS:
        raise ValueError(f"unknown variant {name!r}; choose from S, T, N, micro")
    return PRESETS[key].replace()


def stage_window_size(stage_index: int, cfg: ModelConfig) -> int:
    if stage_index not in (2, 3, 4):
        raise ValueError(f"GPE stages are 2..4, got {stage_index}")
    return cfg.window_sizes[stage_index - 1]


class HGpeModel(Module):
    """Stem -> stage1..stage4 -> global average pool + linear head.

    Parameter order: stem/conv, stem/irb, stage1/block*, then per GPE stage
    stage{i}/down, stage{i}/block{j} (GPE-Block), stage{i}/irb{j}; head last.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.out_channels
        t = cfg.expansion
        gpm_kwargs = dict(gig_kernel=cfg.gig_kernel, use_gig=cfg.use_gig, use_lsae=cfg.use_lsae,
                          use_asa_cra=cfg.use_asa_cra, num_heads=cfg.num_heads,
                          lsae_spatial=cfg.lsae_spatial)
        self.stem = Sequential(conv=ConvBN(3, c[0], 3, stride=2, padding=1, act="h_swish"),
                               irb=IRB(c[0], c[0], t))
        stage1 = Sequential()
        for j in range(cfg.stack_count[0]):
            stage1.add(f"block{j}", IRB(c[0], c[0], t))
        self.stage1 = stage1
        for i in range(1, 4):
            stage = Sequential(down=IRB(c[i - 1], c[i], t, stride=2))
            w = cfg.window_sizes[i]
            for j in range(cfg.stack_count[i]):
                if w:
                    stage.add(f"block{j}", GPEBlock(c[i], w, t, **gpm_kwargs))
                stage.add(f"irb{j}", IRB(c[i], c[i], t))
            setattr(self, f"stage{i + 1}", stage)
        self.head = Linear(c[3], cfg.num_classes)
        self.assign_paths()

    @property
    def stages(self) -> list[Sequential]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def top_level(self) -> list[tuple[str, Module]]:
        """Shape-chaining units in execution order (head excluded)."""
        units = list(self.stem.children())
        for stage in self.stages:
            units.extend(stage.children())
        return [(m.path, m) for _, m in units]

    def _run(self, m: Module, x: Tensor) -> Tensor:
        expected = getattr(m, "cin", None) or getattr(m, "channels", None)
        if expected is None and isinstance(m, ConvBN):
            expected = m.conv.cin
        if expected is not None and x.shape[1] != expected:
            raise ValueError(f"{m.path}: expected {expected} input channels, got shape {x.shape}")
        return m(x)

    def features(self, x: Tensor, trace: list | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"model input must be N x 3 x H x W, got shape {x.shape}")
        for _, m in self.stem.children():
            x = self._run(m, x)
        if trace is not None:
            trace.append(("stem", x.shape))
        for i, stage in enumerate(self.stages, start=1):
            for _, m in stage.children():
                x = self._run(m, x)
            if trace is not None:
                trace.append((f"stage{i}", x.shape))
        return x

    def forward(self, x: Tensor, mode: str = "infer", trace: list | None = None) -> Tensor:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        self.set_mode(mode == "train")
        f = self.features(x, trace)
        pooled = ops.pool_global_avg(f).reshape(f.shape[0], f.shape[1])
        return self.head(pooled)

    def __call__(self, x: Tensor, mode: str = "infer") -> Tensor:
        return self.forward(x, mode)

    def trace(self, shape, rec: Recorder, include_head: bool = True):
        shape = self.stem.trace(shape, rec)
        for stage in self.stages:
            shape = stage.trace(shape, rec)
        if include_head:
            shape = self.head.trace((shape[0], shape[1]), rec)
        return shape

    @property
    def params(self) -> ParamStore:
        return self.param_store()


def build_model(cfg: ModelConfig, seed: int = 0) -> HGpeModel:
    model = HGpeModel(cfg)
    initialize(model, seed)
    return model


def model_forward(m: HGpeModel, x: Tensor, mode: str = "infer") -> Tensor:
    return m.forward(x, mode)


def random_input(cfg: ModelConfig, batch: int = 1, seed: int = 0, dtype=np.float64) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((batch, 3, *cfg.input_size)).astype(dtype))

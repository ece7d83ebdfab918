"""Flat key=value run configuration with '#' comments.

Unknown keys and out-of-range values are rejected up front, before any
output file is written.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .evaluation import EvalConfig
from .fusion import FusionConfig
from .model import ModelConfig
from .rpn import AnchorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 2000
    seed: int = 7
    loss_lambda: float = 1.0
    image_size: int = 128
    lr_drop: bool = False
    pre_nms_top_n: int = 2000
    post_nms_top_n: int = 300
    rpn_nms_thresh: float = 0.7
    min_size: float = 4.0
    # anchors
    base_stride: int = 16
    anchor_scales: tuple = (1.0, 2.0, 4.0)
    anchor_ratios: tuple = (1.0, 1.3)
    # fusion
    shrink_channels: int = 64
    roi_pool_size: int = 7
    gamma_init: float = 10.0
    fusion_mode: str = "multi"
    # evaluation / detection
    iou_threshold: float = 0.5
    split_small_max: float = 24.0
    split_medium_max: float = 64.0
    score_thresh: float = 0.8
    det_nms_thresh: float = 0.3
    # paths (may also come from CLI flags, which win)
    data_dir: str = ""
    out_dir: str = ""
    checkpoint: str = ""
    annotations: str = ""
    detections: str = ""

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            iterations=self.iterations,
            seed=self.seed,
            loss_lambda=self.loss_lambda,
            image_size=self.image_size,
            lr_drop=self.lr_drop,
            pre_nms_top_n=self.pre_nms_top_n,
            post_nms_top_n=self.post_nms_top_n,
            rpn_nms_thresh=self.rpn_nms_thresh,
            min_size=self.min_size,
        )
        cfg.validate()
        return cfg

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            fusion=FusionConfig(
                shrink_channels=self.shrink_channels,
                roi_pool_size=self.roi_pool_size,
                gamma_init=self.gamma_init,
            ),
            anchors=AnchorConfig(
                base_stride=self.base_stride,
                scales=tuple(self.anchor_scales),
                ratios=tuple(self.anchor_ratios),
            ),
            fusion_mode=self.fusion_mode,
        )

    def eval_config(self) -> EvalConfig:
        cfg = EvalConfig(
            iou_threshold=self.iou_threshold,
            split_small_max=self.split_small_max,
            split_medium_max=self.split_medium_max,
        )
        cfg.validate()
        return cfg

    def validate(self):
        self.train_config()
        self.eval_config()
        if not (0.0 <= self.score_thresh < 1.0):
            raise ConfigError(f"score_thresh {self.score_thresh} outside [0, 1)")
        if not (0.0 < self.det_nms_thresh < 1.0):
            raise ConfigError(f"det_nms_thresh {self.det_nms_thresh} outside (0, 1)")
        if self.roi_pool_size < 1 or self.shrink_channels < 1 or self.base_stride < 1:
            raise ConfigError("roi_pool_size, shrink_channels and base_stride must be positive")
        if self.gamma_init <= 0:
            raise ConfigError("gamma_init must be positive")
        if not self.anchor_scales or not self.anchor_ratios:
            raise ConfigError("anchor_scales and anchor_ratios must be non-empty")
        if any(s <= 0 for s in self.anchor_scales) or any(r <= 0 for r in self.anchor_ratios):
            raise ConfigError("anchor scales and ratios must be positive")
        try:
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None


def _parse_value(key: str, raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip() != "")
        return raw
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    kinds = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, raw, kinds[key]))
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    from pathlib import Path

    return parse_run_config(Path(path).read_text(), source=str(path))

"""Run configuration: nested dataclasses addressed by flat dotted keys."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


@dataclass
class AnchorConfig:
    feat_h: int = 14
    feat_w: int = 14
    stride: int = 16
    scales: tuple = (32, 64, 128)
    ratios: tuple = (0.5, 1.0, 2.0)
    image_size: int = 224


@dataclass
class NmsConfig:
    iou_threshold: float = 0.7
    keep: int = 5


@dataclass
class LabelConfig:
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    neg_ratio: int = 3
    # "valid": divide the regression sum by the valid-anchor count; "positive": by positives
    reg_normalizer: str = "valid"


@dataclass
class BackboneConfig:
    widths: tuple = (8, 16, 32, 32)
    trainable: bool = True
    # leading blocks kept at their seeded initialisation; their outputs are cached during training
    frozen_blocks: int = 0


@dataclass
class MaskNetConfig:
    conv3d_channels: tuple = (8, 16)
    temporal_kernel: int = 2
    conv2d_channels: int = 16
    fc_channels: int = 16
    fc_kernel: int = 1


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 20
    iterations: int = 2000
    record_every: int = 5
    seed: int = 0


@dataclass
class MaskConfig:
    enabled: bool = True
    fusion: bool = False
    heatmap_threshold: float = 0.3
    p0: float = 0.5
    history_len: int = 3


@dataclass
class EvalConfig:
    # seed the heat-map history with the first frame's ground truth and score frames 1..n-1
    init_from_gt: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    masknet: MaskNetConfig = field(default_factory=MaskNetConfig)
    train_rpn: TrainConfig = field(default_factory=TrainConfig)
    train_mask: TrainConfig = field(default_factory=TrainConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        a, lab = self.anchors, self.labels
        if min(a.feat_h, a.feat_w, a.stride) < 1 or not a.scales or not a.ratios:
            raise ValueError("anchor settings out of range")
        if not 0 <= lab.neg_iou < lab.pos_iou <= 1 or lab.neg_ratio < 1:
            raise ValueError("labelling thresholds out of range")
        if lab.reg_normalizer not in ("valid", "positive"):
            raise ValueError(f"labels.reg_normalizer must be 'valid' or 'positive', got {lab.reg_normalizer!r}")
        if not 0 < self.nms.iou_threshold <= 1 or self.nms.keep < 1:
            raise ValueError("nms settings out of range")
        if not 0 <= self.mask.heatmap_threshold < 1 or not 0 < self.mask.p0 < 1:
            raise ValueError("mask thresholds out of range")
        if not 0 <= self.backbone.frozen_blocks <= len(self.backbone.widths):
            raise ValueError("backbone.frozen_blocks out of range")
        if self.masknet.fc_kernel not in (1, 3):
            raise ValueError("masknet.fc_kernel must be 1 or 3")
        for t in (self.train_rpn, self.train_mask):
            if t.lr < 0 or t.batch_size < 1 or t.iterations < 0 or t.record_every < 1:
                raise ValueError("training settings out of range")
        return self

    def to_flat(self) -> dict:
        return flatten(asdict(self))

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        cfg = cls()
        for key, value in flat.items():
            set_dotted(cfg, key, value)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Read flat dotted keys; a run manifest is accepted too (its resolved config is used)."""
        data = json.loads(Path(path).read_text())
        if "config" in data and "argv" in data:
            data = data["config"]
        return cls.from_flat(data)


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def set_dotted(cfg, key: str, value) -> None:
    """Assign ``value`` to a dotted path such as ``"anchors.stride"`` with type coercion."""
    *path, leaf = key.split(".")
    obj = cfg
    for part in path:
        if not is_dataclass(obj) or part not in {f.name for f in fields(obj)}:
            raise KeyError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    names = {f.name: f for f in fields(obj)} if is_dataclass(obj) else {}
    if leaf not in names or is_dataclass(getattr(obj, leaf)):
        raise KeyError(f"unknown config key {key!r}")
    current = getattr(obj, leaf)
    setattr(obj, leaf, _coerce(current, value, key))


def _coerce(current, value, key):
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("on", "true", "1", "yes"):
                return True
            if value.lower() in ("off", "false", "0", "no"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        kind = type(current[0]) if current else float
        return tuple(kind(v) for v in value)
    if isinstance(current, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        return float(value)
    return type(current)(value)

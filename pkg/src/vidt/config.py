"""Run configuration: an INI file with fixed sections and keys.

Unknown sections or keys are errors. Every value has a default, so an empty
file is a valid (swin-nano, COCO-scale) configuration.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from .backbone import BACKBONE_KEYS, config_from_mapping, config_to_mapping
from .errors import ConfigurationError
from .losses import LossConfig, LossWeights, MatcherWeights
from .model import DetectorConfig
from .neck import NeckConfig

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}

MODEL_KEYS = BACKBONE_KEYS + ("num_classes", "epff", "uqr", "mask_resolution", "mask_coeffs", "iou_aware",
                              "token_label")
NECK_KEYS = ("enabled", "num_layers", "width", "heads", "points", "ffn_dim", "dropout", "aux_loss", "box_refine",
             "n_drop")
LOSS_KEYS = ("mode", "eos_coef", "cls", "l1", "giou", "seg", "aware", "token", "match_cls", "match_l1",
             "match_giou", "aware_all_layers")
TRAIN_KEYS = ("seed", "epochs", "batch_size", "lr", "weight_decay", "clip", "warmup_steps", "augment", "dtype",
              "checkpoint_every", "eval_every", "max_steps")
DATA_KEYS = ("source", "train_count", "val_count", "image_size", "train_seed", "val_seed", "train_json",
             "val_json", "image_root")
SECTIONS = {"model": MODEL_KEYS, "neck": NECK_KEYS, "loss": LOSS_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS}


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    clip: float = 0.1
    warmup_steps: int = 0
    augment: bool = True
    dtype: str = "float32"
    checkpoint_every: int = 1   # epochs
    eval_every: int = 1         # epochs; 0 disables
    max_steps: int = 0          # 0 means epochs * steps_per_epoch

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.clip < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be positive; clip and weight_decay non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"  # synth | coco
    train_count: int = 500
    val_count: int = 100
    image_size: int = 64
    train_seed: int = 0
    val_seed: int = 1
    train_json: str = ""
    val_json: str = ""
    image_root: str = ""

    def __post_init__(self):
        if self.source not in ("synth", "coco"):
            raise ConfigurationError(f"data source must be synth or coco, got {self.source!r}")
        if self.source == "coco" and not self.train_json:
            raise ConfigurationError("coco source needs train_json")


@dataclass(frozen=True)
class RunConfig:
    model: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    n_drop: int = 0

    def to_ini(self) -> str:
        return dump_config(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def _bool(v: str, key: str) -> bool:
    try:
        return _BOOL[v.strip().lower()]
    except KeyError:
        raise ConfigurationError(f"{key}: expected a boolean, got {v!r}") from None


def _num(conv, v: str, key: str):
    try:
        return conv(v)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {v!r}") from None


def config_from_sections(sections: Mapping[str, Mapping[str, str]]) -> RunConfig:
    for name, values in sections.items():
        if name not in SECTIONS:
            raise ConfigurationError(f"unknown section [{name}]")
        unknown = sorted(set(values) - set(SECTIONS[name]))
        if unknown:
            raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    m = dict(sections.get("model", {}))
    n = dict(sections.get("neck", {}))
    lo = dict(sections.get("loss", {}))
    tr = dict(sections.get("train", {}))
    da = dict(sections.get("data", {}))

    backbone = config_from_mapping({k: v for k, v in m.items() if k in BACKBONE_KEYS})
    neck = None
    if _bool(n.get("enabled", "true"), "neck.enabled"):
        neck = NeckConfig(
            num_layers=_num(int, n.get("num_layers", "6"), "neck.num_layers"),
            width=_num(int, n.get("width", "256"), "neck.width"),
            heads=_num(int, n.get("heads", "8"), "neck.heads"),
            points=_num(int, n.get("points", "4"), "neck.points"),
            ffn_dim=_num(int, n.get("ffn_dim", "1024"), "neck.ffn_dim"),
            dropout=_num(float, n.get("dropout", "0.1"), "neck.dropout"),
            aux_loss=_bool(n.get("aux_loss", "true"), "neck.aux_loss"),
            box_refine=_bool(n.get("box_refine", "true"), "neck.box_refine"),
        )
    n_drop = _num(int, n.get("n_drop", "0"), "neck.n_drop")
    if n_drop and (neck is None or not 0 <= n_drop < neck.num_layers or n_drop > 5):
        raise ConfigurationError(f"n_drop {n_drop} incompatible with the neck configuration")
    weights = LossWeights(**{k: _num(float, lo[k], f"loss.{k}") for k in ("cls", "l1", "giou", "seg", "aware", "token")
                             if k in lo})
    matcher = MatcherWeights(**{k[6:]: _num(float, lo[k], f"loss.{k}") for k in ("match_cls", "match_l1", "match_giou")
                                if k in lo})
    loss = LossConfig(weights=weights, matcher=matcher, mode=lo.get("mode", "focal"),
                      eos_coef=_num(float, lo.get("eos_coef", "0.1"), "loss.eos_coef"),
                      aux=neck.aux_loss if neck is not None else False,
                      aware_all_layers=_bool(lo.get("aware_all_layers", "false"), "loss.aware_all_layers"))
    model = DetectorConfig(
        backbone=backbone, preset_name=m.get("preset", "swin-nano"),
        num_classes=_num(int, m.get("num_classes", "2"), "model.num_classes"), neck=neck,
        epff=_bool(m.get("epff", "false"), "model.epff"), uqr=_bool(m.get("uqr", "false"), "model.uqr"),
        mask_resolution=_num(int, m.get("mask_resolution", "64"), "model.mask_resolution"),
        mask_coeffs=_num(int, m.get("mask_coeffs", "256"), "model.mask_coeffs"),
        iou_aware=_bool(m.get("iou_aware", "false"), "model.iou_aware"),
        token_label=_bool(m.get("token_label", "false"), "model.token_label"), loss=loss)
    ints = ("seed", "epochs", "batch_size", "warmup_steps", "checkpoint_every", "eval_every", "max_steps")
    floats = ("lr", "weight_decay", "clip")
    train = TrainConfig(**{k: (_num(int, v, f"train.{k}") if k in ints else _num(float, v, f"train.{k}") if k in floats
                               else _bool(v, f"train.{k}") if k == "augment" else v) for k, v in tr.items()})
    data = DataConfig(**{k: (_num(int, v, f"data.{k}") if k in ("train_count", "val_count", "image_size",
                                                                "train_seed", "val_seed") else v)
                         for k, v in da.items()})
    return RunConfig(model, train, data, n_drop)


def _read_sections(texts) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        for text in texts:
            parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config syntax error: {exc}") from exc
    return {s: dict(parser[s]) for s in parser.sections()}


def parse_config(text: str) -> RunConfig:
    return config_from_sections(_read_sections([text]))


def with_overrides(texts: list[str], overrides: Mapping[str, Mapping[str, str]]) -> RunConfig:
    """Layer INI texts (later wins per key), then apply {section: {key: value}} on top."""
    sections = _read_sections(texts)
    for section, values in overrides.items():
        sections.setdefault(section, {}).update(values)
    return config_from_sections(sections)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    m = cfg.model
    lines = ["[model]"]
    for k, v in config_to_mapping(m.backbone, m.preset_name).items():
        lines.append(f"{k} = {v}")
    lines += [f"num_classes = {m.num_classes}", f"epff = {str(m.epff).lower()}", f"uqr = {str(m.uqr).lower()}",
              f"mask_resolution = {m.mask_resolution}", f"mask_coeffs = {m.mask_coeffs}",
              f"iou_aware = {str(m.iou_aware).lower()}", f"token_label = {str(m.token_label).lower()}", "", "[neck]"]
    if m.neck is None:
        lines.append("enabled = false")
    else:
        nk = m.neck
        lines += ["enabled = true", f"num_layers = {nk.num_layers}", f"width = {nk.width}", f"heads = {nk.heads}",
                  f"points = {nk.points}", f"ffn_dim = {nk.ffn_dim}", f"dropout = {nk.dropout!r}",
                  f"aux_loss = {str(nk.aux_loss).lower()}", f"box_refine = {str(nk.box_refine).lower()}"]
    lines.append(f"n_drop = {cfg.n_drop}")
    lo = m.loss
    lines += ["", "[loss]", f"mode = {lo.mode}", f"eos_coef = {lo.eos_coef!r}"]
    lines += [f"{k} = {getattr(lo.weights, k)!r}" for k in ("cls", "l1", "giou", "seg", "aware", "token")]
    lines += [f"match_{k} = {getattr(lo.matcher, k)!r}" for k in ("cls", "l1", "giou")]
    lines.append(f"aware_all_layers = {str(lo.aware_all_layers).lower()}")
    lines += ["", "[train]"]
    for k in TRAIN_KEYS:
        v = getattr(cfg.train, k)
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
    lines += ["", "[data]"]
    lines += [f"{k} = {getattr(cfg.data, k)}" for k in DATA_KEYS]
    return "\n".join(lines) + "\n"


def toy_config(vidt_plus: bool = False, **train_overrides) -> RunConfig:
    """The desk-scale setup: swin-pico, window 4, 3 decoder layers on 64x64 shapes."""
    text = TOY_PLUS_INI if vidt_plus else TOY_INI
    cfg = parse_config(text)
    return replace(cfg, train=replace(cfg.train, **train_overrides)) if train_overrides else cfg


TOY_INI = """\
[model]
preset = swin-pico
window_size = 4
num_det_tokens = 100
num_classes = 2

[neck]
num_layers = 3
width = 128
heads = 4
ffn_dim = 512
dropout = 0

[train]
epochs = 24
batch_size = 8
lr = 4e-4
warmup_steps = 50
clip = 0.1
augment = false
eval_every = 4

[data]
source = synth
train_count = 500
val_count = 100
image_size = 64
"""

TOY_PLUS_INI = TOY_INI.replace("num_det_tokens = 100", "num_det_tokens = 300").replace(
    "num_classes = 2", "num_classes = 2\nepff = true\nuqr = true\niou_aware = true\ntoken_label = true")

"""Training loop, prediction and evaluation over datasets."""
from __future__ import annotations

import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .boxes import cxcywh_to_xyxy
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .data import DetectionSample, ShapeSpec, collate, load_coco_json, scale_augment, synth_shapes
from .errors import ConfigurationError, TrainingDivergedError
from .evaluation import evaluate_detections
from .losses import joint_loss
from .model import Detector, drop_layers, postprocess
from .tensor.optim import AdamW, clip_grad_norm, cosine_lr
from .uqr import paste_instance


def load_datasets(cfg: RunConfig) -> tuple[list[DetectionSample], list[DetectionSample]]:
    d = cfg.data
    if d.source == "synth":
        spec = ShapeSpec(image_size=d.image_size)
        return synth_shapes(d.train_seed, d.train_count, spec), synth_shapes(d.val_seed, d.val_count, spec)
    train = list(load_coco_json(d.train_json, d.image_root or None))
    val = list(load_coco_json(d.val_json, d.image_root or None)) if d.val_json else []
    return train, val


def build_model(cfg: RunConfig) -> Detector:
    return Detector(cfg.model, seed=cfg.train.seed, dtype=np.dtype(cfg.train.dtype))


def make_batch(model: Detector, samples: Sequence[DetectionSample], training: bool):
    mc = model.cfg
    return collate(samples, mc.num_classes, dtype=model.backbone.patch_proj.weight.dtype,
                   mask_vectors=mc.uqr and training, class_masks=mc.token_label and training,
                   mask_resolution=mc.mask_resolution, mask_coeffs=mc.mask_coeffs)


def compute_loss(model: Detector, batch) -> tuple[T.Tensor, dict[str, float]]:
    out = model(T.Tensor(batch.images), batch.image_sizes)
    for i, layer in enumerate(out["layers"]):
        if not (np.isfinite(layer["logits"].data).all() and np.isfinite(layer["boxes"].data).all()):
            raise TrainingDivergedError(f"non-finite predictions from decoding layer {i}")
    return joint_loss(out["layers"], batch.targets, model.cfg.loss, {"token_logits": out["token_logits"]})


# -- inference ------------------------------------------------------------------------

def predict(model: Detector, samples: Sequence[DetectionSample], batch_size: int = 8, n_drop: int = 0,
            masks: bool = False, top_k: int = 100) -> list[dict]:
    """Per-sample detections (pixel xyxy boxes) from the final head of the possibly truncated neck."""
    net = drop_layers(model, n_drop) if n_drop else model
    was_training = net.training
    net.eval()
    focal = model.cfg.loss.mode == "focal"
    results = []
    try:
        with T.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                batch = make_batch(model, chunk, training=False)
                out = net(T.Tensor(batch.images), batch.image_sizes)
                final = out["layers"][-1]
                dets = postprocess(final, batch.image_sizes, focal=focal, top_k=top_k)
                if masks and "masks" in final:
                    vecs = final["masks"].data.astype(np.float64)
                    for i, det in enumerate(dets):
                        det["masks"] = [paste_instance(vecs[i, s], b, batch.image_sizes[i], model.cfg.mask_resolution)
                                        for s, b in zip(det["slots"], det["boxes"])]
                results.extend(dets)
    finally:
        net.train(was_training)
    return results


def ground_truth(samples: Sequence[DetectionSample], masks: bool = False) -> list[dict]:
    out = []
    for s in samples:
        h, w = s.size
        g = {"labels": s.labels, "boxes": cxcywh_to_xyxy(s.boxes) * np.array([w, h, w, h])}
        if masks and s.masks is not None:
            g["masks"] = list(s.masks)
        out.append(g)
    return out


def evaluate(model: Detector, samples: Sequence[DetectionSample], n_drop: int = 0, batch_size: int = 8,
             masks: bool = False) -> dict[str, float]:
    use_masks = masks and model.mask_head is not None and all(s.masks is not None for s in samples)
    dets = predict(model, samples, batch_size, n_drop, masks=use_masks)
    return evaluate_detections(dets, ground_truth(samples, use_masks), model.cfg.num_classes, masks=use_masks)


# -- training -------------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0           # optimizer steps taken
    position: int = 0       # batches consumed in the current epoch
    order: np.ndarray | None = None
    history: list[dict] = field(default_factory=list)


class Trainer:
    """Single-threaded trainer whose full state (weights, moments, RNGs, data order) is checkpointable."""

    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None, log: Callable[[str], None] | None = None,
                 datasets=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log = log or (lambda msg: None)
        self.train_set, self.val_set = datasets if datasets is not None else load_datasets(cfg)
        if not self.train_set:
            raise ConfigurationError("training set is empty")
        self.model = build_model(cfg)
        self.model.train()
        tc = cfg.train
        self.optimizer = AdamW(self.model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
        self.order_rng = np.random.default_rng([tc.seed, 2])
        self.aug_rng = np.random.default_rng([tc.seed, 3])
        self.state = TrainState()
        self.steps_per_epoch = math.ceil(len(self.train_set) / tc.batch_size)
        self.total_steps = tc.max_steps or tc.epochs * self.steps_per_epoch
        self.last_good: Path | None = None

    # state capture ----------------------------------------------------------------
    def _rng_states(self) -> dict:
        return {"order": self.order_rng.bit_generator.state, "aug": self.aug_rng.bit_generator.state,
                "dropout": self.model.dropout_rng.bit_generator.state}

    def checkpoint(self) -> Checkpoint:
        opt = self.optimizer.state()
        optim = {f"m.{i}": m for i, m in enumerate(opt["m"])}
        optim.update({f"v.{i}": v for i, v in enumerate(opt["v"])})
        if self.state.order is not None:
            optim["epoch_order"] = self.state.order.astype(np.int64)
        meta = {"epoch": self.state.epoch, "step": self.state.step, "position": self.state.position,
                "optimizer_steps": opt["step_count"], "lr": opt["lr"], "seed": self.cfg.train.seed,
                "rng": self._rng_states(), "config_digest": self.cfg.digest(), "history": self.state.history}
        return Checkpoint(self.cfg.to_ini(), dict(self.model.state_dict()), optim, meta)

    def restore(self, ckpt: Checkpoint) -> None:
        self.model.load_state_dict(ckpt.params)
        n = len(self.optimizer.params)
        self.optimizer.load_state({"step_count": ckpt.meta["optimizer_steps"], "lr": ckpt.meta["lr"],
                                   "m": [ckpt.optim[f"m.{i}"] for i in range(n)],
                                   "v": [ckpt.optim[f"v.{i}"] for i in range(n)]})
        rng = ckpt.meta["rng"]
        self.order_rng.bit_generator.state = rng["order"]
        self.aug_rng.bit_generator.state = rng["aug"]
        self.model.dropout_rng.bit_generator.state = rng["dropout"]
        self.state = TrainState(ckpt.meta["epoch"], ckpt.meta["step"], ckpt.meta["position"],
                                ckpt.optim.get("epoch_order"), list(ckpt.meta.get("history", [])))

    @classmethod
    def resume(cls, path: str | Path, out_dir=None, log=None, datasets=None) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(parse_config(ckpt.config_text), out_dir, log, datasets)
        trainer.restore(ckpt)
        return trainer

    def save(self, name: str = "last.ckpt") -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        save_checkpoint(path, self.checkpoint())
        self.last_good = path
        return path

    def write_manifest(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"config_digest": self.cfg.digest(), "seed": self.cfg.train.seed, "code_version": __version__,
                    "numpy": np.__version__, "python": platform.python_version(), "config": self.cfg.to_ini()}
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        (self.out_dir / "config.ini").write_text(self.cfg.to_ini())

    # stepping -----------------------------------------------------------------------
    def _next_batch(self) -> list[DetectionSample]:
        st = self.state
        if st.order is None or st.position >= self.steps_per_epoch:
            if st.order is not None:
                st.epoch += 1
            st.order = self.order_rng.permutation(len(self.train_set))
            st.position = 0
        bs = self.cfg.train.batch_size
        idx = st.order[st.position * bs:(st.position + 1) * bs]
        st.position += 1
        samples = [self.train_set[i] for i in idx]
        if self.cfg.train.augment:
            samples = [scale_augment(s, self.aug_rng) for s in samples]
        return samples

    def train_step(self) -> dict[str, float]:
        samples = self._next_batch()
        batch = make_batch(self.model, samples, training=True)
        where = f"; last good checkpoint: {self.last_good}" if self.last_good else ""
        try:
            loss, parts = compute_loss(self.model, batch)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"step {self.state.step}: {exc}{where}") from None
        if not all(math.isfinite(v) for v in parts.values()):
            raise TrainingDivergedError(f"non-finite loss at step {self.state.step}: {parts}{where}")
        self.optimizer.zero_grad()
        loss.backward()
        parts["grad_norm"] = clip_grad_norm(self.optimizer.params, self.cfg.train.clip)
        self.optimizer.lr = cosine_lr(self.cfg.train.lr, self.state.step, self.total_steps, self.cfg.train.warmup_steps)
        self.optimizer.step()
        self.state.step += 1
        return parts

    def run(self, time_budget: float | None = None, eval_samples: Sequence[DetectionSample] | None = None) -> list[dict]:
        """Train until ``total_steps`` or the wall-clock budget; returns per-epoch records."""
        tc = self.cfg.train
        self.write_manifest()
        start = time.monotonic()
        val = list(eval_samples) if eval_samples is not None else self.val_set
        sums: dict[str, float] = {}
        count = 0
        while self.state.step < self.total_steps:
            if time_budget is not None and time.monotonic() - start > time_budget:
                self.log(f"time budget reached at step {self.state.step}")
                break
            parts = self.train_step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
            epoch_done = self.state.position >= self.steps_per_epoch or self.state.step >= self.total_steps
            if epoch_done:
                record = {"epoch": self.state.epoch, "step": self.state.step,
                          "elapsed": round(time.monotonic() - start, 2)}
                record.update({k: v / count for k, v in sums.items()})
                last = self.state.step >= self.total_steps
                if val and tc.eval_every and ((self.state.epoch + 1) % tc.eval_every == 0 or last):
                    record.update(evaluate(self.model, val, self.cfg.n_drop, tc.batch_size))
                self.state.history.append(record)
                self.log(json.dumps(record))
                if self.out_dir is not None:
                    with open(self.out_dir / "metrics.jsonl", "a") as fh:
                        fh.write(json.dumps(record) + "\n")
                    if (self.state.epoch + 1) % tc.checkpoint_every == 0 or last:
                        self.save()
                sums, count = {}, 0
        return self.state.history


def train(cfg: RunConfig, out_dir=None, log=None, time_budget: float | None = None, datasets=None) -> Trainer:
    trainer = Trainer(cfg, out_dir, log, datasets)
    trainer.run(time_budget)
    return trainer

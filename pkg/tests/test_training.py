import json
import math

import numpy as np
import pytest

from vidt.config import parse_config
from vidt.data import ShapeSpec, synth_shapes
from vidt.errors import TrainingDivergedError
from vidt.training import Trainer, evaluate, ground_truth, predict

TINY_INI = """\
[model]
preset = swin-pico
window_size = 4
num_det_tokens = 12
num_classes = 2
{extra}

[neck]
num_layers = 2
width = 32
heads = 2
points = 2
ffn_dim = 64

[train]
epochs = 1
batch_size = 4
lr = 1e-3
clip = 0.1
dtype = float64

[data]
train_count = 8
val_count = 4
image_size = 32
"""


def tiny(extra=""):
    cfg = parse_config(TINY_INI.format(extra=extra))
    spec = ShapeSpec(image_size=32, min_size=6, max_size=14)
    return cfg, (synth_shapes(0, 8, spec), synth_shapes(1, 4, spec))


@pytest.mark.parametrize("extra", ["", "epff = true\nuqr = true\nmask_coeffs = 16\niou_aware = true\ntoken_label = true"])
def test_one_epoch_smoke_run(tmp_path, extra):
    cfg, data = tiny(extra)
    trainer = Trainer(cfg, out_dir=tmp_path, datasets=data)
    history = trainer.run()
    assert trainer.state.step == 2 and len(history) == 1
    record = history[0]
    for key in ("cls", "l1", "giou", "total", "grad_norm", "ap50", "ap"):
        assert math.isfinite(record[key])
    if extra:
        assert {"seg", "aware", "token"} <= set(record)
    assert (tmp_path / "last.ckpt").exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_digest"] == cfg.digest() and manifest["seed"] == 0 and manifest["code_version"]
    assert json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[0])["step"] == 2


def test_resume_reproduces_next_step_exactly(tmp_path):
    cfg, data = tiny()
    cfg = parse_config(TINY_INI.format(extra="").replace("epochs = 1", "epochs = 3"))
    reference = Trainer(cfg, datasets=data)
    for _ in range(3):
        reference.train_step()
    (tmp_path / "a").mkdir()
    reference.out_dir = tmp_path / "a"
    path = reference.save()
    expected = [reference.train_step()["total"] for _ in range(2)]

    resumed = Trainer.resume(path, datasets=data)
    got = [resumed.train_step()["total"] for _ in range(2)]
    assert got == expected
    for (name, a), (_, b) in zip(sorted(reference.model.state_dict().items()), sorted(resumed.model.state_dict().items())):
        assert np.array_equal(a, b), name


def test_non_finite_loss_aborts(tmp_path):
    cfg, data = tiny()
    trainer = Trainer(cfg, out_dir=tmp_path, datasets=data)
    trainer.save()
    trainer.model.backbone.patch_proj.bias.data[:] = np.nan
    with np.errstate(invalid="ignore"):
        with pytest.raises(TrainingDivergedError, match="last good checkpoint"):
            trainer.train_step()


def test_non_finite_loss_terms_abort(monkeypatch):
    import vidt.training as training

    cfg, data = tiny()
    trainer = Trainer(cfg, datasets=data)
    real = training.compute_loss

    def poisoned(model, batch):
        loss, parts = real(model, batch)
        return loss, dict(parts, giou=float("inf"))

    monkeypatch.setattr(training, "compute_loss", poisoned)
    with pytest.raises(TrainingDivergedError, match="non-finite loss"):
        trainer.train_step()


def test_time_budget_stops_early():
    cfg, data = tiny()
    trainer = Trainer(cfg, datasets=data)
    trainer.run(time_budget=0.0)
    assert trainer.state.step <= 1


def test_prediction_format_and_layer_drop():
    cfg, data = tiny()
    trainer = Trainer(cfg, datasets=data)
    samples = data[1]
    dets = predict(trainer.model, samples, top_k=5)
    assert len(dets) == len(samples)
    for d, s in zip(dets, samples):
        assert len(d["scores"]) == 5 and np.all(np.diff(d["scores"]) <= 0)
        boxes = np.asarray(d["boxes"])
        assert boxes.shape == (5, 4) and (boxes >= 0).all() and (boxes <= 32).all()
    gts = ground_truth(samples)
    np.testing.assert_allclose(gts[0]["boxes"][:, 2:] - gts[0]["boxes"][:, :2], samples[0].boxes[:, 2:] * 32)
    dropped = predict(trainer.model, samples, n_drop=1, top_k=5)
    assert any(not np.allclose(a["boxes"], b["boxes"]) for a, b in zip(dets, dropped))
    report = evaluate(trainer.model, samples)
    assert 0 <= report["ap50"] <= 1 and 0 <= report["ap"] <= report["ap50"] + 1e-12

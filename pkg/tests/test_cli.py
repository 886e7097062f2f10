import json

import numpy as np
import pytest
from PIL import Image

from vidt import backbone as bb
from vidt.attention_maps import cross_attention_stages, export_attention
from vidt.checkpoint import load_checkpoint
from vidt.cli import build_parser, main
from vidt.config import parse_config
from vidt.data import ShapeSpec, load_coco_json, synth_shapes
from vidt.errors import AttentionUnavailableError
from vidt.training import build_model

TINY_INI = """\
[model]
preset = swin-pico
window_size = 4
num_det_tokens = 6
num_classes = 2

[neck]
num_layers = 2
width = 32
heads = 2
points = 2
ffn_dim = 64

[train]
epochs = 1
batch_size = 2
max_steps = 2
dtype = float64

[data]
train_count = 4
val_count = 2
image_size = 32
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "tiny.ini").write_text(TINY_INI)
    assert main(["train", "--config", str(root / "tiny.ini"), "--out", str(root / "out"), "--quiet"]) == 0
    return root


@pytest.mark.parametrize("cmd", ["train", "eval", "profile", "export-attn", "synth-data"])
def test_every_subcommand_has_help(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args([cmd, "--help"])
    assert info.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_train_writes_checkpoint_manifest_and_metrics(trained):
    out = trained / "out"
    ckpt = load_checkpoint(out / "last.ckpt")
    assert ckpt.meta["step"] == 2
    assert parse_config(ckpt.config_text) == parse_config(TINY_INI)
    assert json.loads((out / "manifest.json").read_text())["config_digest"] == parse_config(TINY_INI).digest()
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 1


def test_set_overrides_and_config_errors(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text(TINY_INI.replace("[train]", "[train]\nlearning_rate = 1"))
    assert main(["train", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    with pytest.raises(SystemExit):
        main(["train", "--set", "lr=1"])


def test_resume_continues_the_step_count(trained, tmp_path):
    src = trained / "out" / "last.ckpt"
    assert main(["train", "--resume", str(src), "--out", str(tmp_path), "--quiet",
                 "--time-budget", "0"]) == 0
    assert load_checkpoint(tmp_path / "last.ckpt").meta["step"] == 2


def test_eval_prints_a_report(trained, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(trained / "out" / "last.ckpt"), "--count", "2", "--n-drop", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"ap50", "ap", "n_drop"} and report["n_drop"] == 1


def test_eval_rejects_future_checkpoints(trained, tmp_path, capsys):
    data = bytearray((trained / "out" / "last.ckpt").read_bytes())
    data[4] = 99
    (tmp_path / "f.ckpt").write_bytes(bytes(data))
    assert main(["eval", "--checkpoint", str(tmp_path / "f.ckpt")]) == 2
    assert "version" in capsys.readouterr().err


def test_profile_tsv(tmp_path, capsys):
    out = tmp_path / "t.tsv"
    assert main(["profile", "--tokens", "64,144,256", "--format", "tsv", "--output", str(out), "--audit"]) == 0
    lines = out.read_text().strip().split("\n")
    assert len(lines) == 7 and lines[0].startswith("mode\t")
    assert capsys.readouterr().out.count(" ok") == 6


def test_synth_data(tmp_path, capsys):
    assert main(["synth-data", "--seed", "3", "--count", "4", "--size", "48", "--out", str(tmp_path)]) == 0
    back = list(load_coco_json(tmp_path / "annotations.json", tmp_path / "images"))
    want = synth_shapes(3, 4, ShapeSpec(image_size=48))
    assert len(back) == 4
    for a, b in zip(back, want):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_allclose(a.boxes, b.boxes, atol=1e-12)


def test_export_attn_writes_normalized_pngs(trained, tmp_path, capsys):
    assert main(["export-attn", "--checkpoint", str(trained / "out" / "last.ckpt"), "--tokens", "0,3",
                 "--out", str(tmp_path)]) == 0
    pngs = sorted(tmp_path.glob("*.png"))
    assert [p.name for p in pngs] == ["stage4_token000.png", "stage4_token003.png"]
    img = np.asarray(Image.open(pngs[0]))
    assert img.shape == (32, 32) and img.max() == 255 and img.min() >= 0


def test_export_attn_rejects_stages_without_cross_attention():
    ini = TINY_INI.replace("num_classes = 2", "num_classes = 2\ncross_attention_stages = 2,3,4")
    cfg = parse_config(ini)
    model = build_model(cfg)
    assert cross_attention_stages(model) == [2, 3, 4]
    image = synth_shapes(0, 1)[0].image[:32, :32]
    with pytest.raises(AttentionUnavailableError, match="stage 1 has no cross-attention"):
        export_attention(model, image, stages=[1])


def _patch_side_mass(block, x, det, det_pos, spatial_pos, valid, mode):
    """Recompute head-mean PATCH-side softmax mass with one explicit softmax over [DET, PATCH] keys."""
    b, h, w, c = x.shape
    xn = block.norm1(x).data.reshape(b, h * w, c)
    dn = block.norm1(det).data
    pos = det_pos.data
    heads = block.attn.heads
    hd = c // heads
    wt, bias = block.attn.qkv.weight.data, block.attn.qkv.bias.data
    q = (dn + pos) @ wt[:, :c] + bias[:c]
    k_det = (dn + pos) @ wt[:, c:2 * c] + bias[c:2 * c]
    sp = spatial_pos.data.reshape(-1, h * w, c) if spatial_pos is not None else 0.0
    if mode == "pre_addition":
        k_patch = (xn + sp) @ wt[:, c:2 * c] + bias[c:2 * c]
    else:
        k_patch = xn @ wt[:, c:2 * c] + bias[c:2 * c] + sp
    keys = np.concatenate([k_det, k_patch], axis=1)
    d = det.shape[1]
    masses = []
    for hh in range(heads):
        sl = slice(hh * hd, (hh + 1) * hd)
        logits = q[..., sl] @ np.swapaxes(keys[..., sl], -1, -2) / np.sqrt(hd)
        logits[:, :, d:] = np.where(valid.reshape(b, 1, -1), logits[:, :, d:], -np.inf)
        e = np.exp(logits - logits.max(-1, keepdims=True))
        p = e / e.sum(-1, keepdims=True)
        masses.append(p[0, :, d:].sum(-1))
    return np.mean(masses, axis=0)


@pytest.mark.parametrize("mode", ["pre_addition", "post_addition"])
def test_heatmap_mass_equals_recomputed_softmax_mass(mode, monkeypatch):
    extra = f"num_classes = 2\ncross_attention_stages = 1,2,3,4\nspatial_encoding = {mode}"
    cfg = parse_config(TINY_INI.replace("num_classes = 2", extra))
    model = build_model(cfg)
    captured = {}
    real = bb.RamBlock.forward

    def spy(self, x, det, det_pos, valid, cross, det_self, spatial_pos=None, policy=None, ledger=None, stage=0,
            record=None):
        if cross:
            captured[stage] = (self, x, det, det_pos, spatial_pos, valid)
        return real(self, x, det, det_pos, valid, cross, det_self, spatial_pos, policy, ledger, stage, record)

    monkeypatch.setattr(bb.RamBlock, "forward", spy)
    image = synth_shapes(5, 1)[0].image[:28, :30]
    maps = export_attention(model, image, tokens=[0, 2, 5])
    assert {hm.stage for hm in maps} == {1, 2, 3, 4}
    for hm in maps:
        block, x, det, det_pos, spatial_pos, valid = captured[hm.stage]
        want = _patch_side_mass(block, x, det, det_pos, spatial_pos, valid, mode)[hm.token]
        assert hm.mass == pytest.approx(want, abs=1e-9)
        assert hm.raw.sum() == pytest.approx(hm.mass, abs=1e-9)
        assert 0 < hm.mass < 1
        norm = hm.normalized
        assert norm.max() == pytest.approx(1.0) and norm.min() >= 0

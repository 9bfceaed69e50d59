import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from retr3d.datasets import make_toy_dataset, render_view
from retr3d.encoder import ConfigError
from retr3d.model import PRESETS, count_params
from retr3d.pipeline import checkpoint as ckpt_mod
from retr3d.pipeline.ablation import ablation_config, format_ablation, spec
from retr3d.pipeline.checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from retr3d.pipeline.cli import main
from retr3d.pipeline.config import resolve
from retr3d.pipeline.evaluate import (
    TABLE2_VIEWS,
    EvalReport,
    aggregate,
    evaluate,
    format_sweep,
    multi_view_cross_table,
    sweep,
)
from retr3d.pipeline.predict import predict
from retr3d.pipeline.train import TrainingError, make_source, read_metrics, train
from retr3d.voxgrid import load_binvox

TOY = ["data.toy_n=4", "data.toy_views=4", "train.batch_size=2", "train.max_steps=2"]


def toy_exp(*extra):
    return resolve(preset="toy", overrides=[*TOY, *extra])


class Oracle(torch.nn.Module):
    """Returns the ground truth of whichever object the first view belongs to."""

    def __init__(self, source):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(1))
        self.lookup = {}
        for i in range(len(source)):
            for im in source.samples[i][0].images:
                self.lookup[im.numpy().tobytes()] = source.target(i)

    def forward(self, images):
        return torch.stack([self.lookup[views[0].numpy().tobytes()] for views in images])


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "exp.yaml"
    cfg_file.write_text("preset: toy\ntrain:\n  learning_rate: 1e-3\n  batch_size: 4\n")
    exp = resolve(str(cfg_file), ["train.batch_size=2"])
    assert exp.train.learning_rate == 1e-3
    assert exp.train.batch_size == 2
    assert exp.model == PRESETS["toy"]
    assert resolve(preset="small").train.learning_rate == 1e-4
    with pytest.raises(ConfigError):
        resolve(overrides=["train.nonsense=1"])
    with pytest.raises(ConfigError):
        resolve(overrides=["train.batch_size"])
    with pytest.raises(ConfigError):
        resolve(preset="enormous")


def test_config_dict_round_trip():
    exp = toy_exp("train.loss.kind=cross_entropy")
    assert type(exp).from_dict(json.loads(json.dumps(exp.to_dict()))) == exp


def test_checkpoint_round_trip(tmp_path):
    exp = toy_exp()
    torch.manual_seed(0)
    model = ckpt_mod.build_model(exp).eval()
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    model(torch.randn(1, 1, 3, 32, 32)).mean().backward()
    opt.step()
    path = save_checkpoint(tmp_path / "c.safetensors", model, exp, 7, opt, {"note": [1, 2]})
    ck = load_checkpoint(path)
    assert ck.step == 7 and ck.extra == {"note": [1, 2]} and ck.experiment == exp
    restored = model_from_checkpoint(ck)
    x = torch.randn(2, 2, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(restored(x), model(x))
    opt2 = torch.optim.AdamW(restored.parameters(), lr=1e-3)
    opt2.load_state_dict(ck.optim_state)
    sa, sb = opt.state_dict()["state"], opt2.state_dict()["state"]
    assert sorted(sa) == sorted(sb)
    for i in sa:
        assert all(torch.equal(torch.as_tensor(sa[i][k]), torch.as_tensor(sb[i][k])) for k in sa[i])
    assert [p.name for p in tmp_path.iterdir()] == ["c.safetensors"]


def test_failed_checkpoint_write_leaves_no_temp_file(tmp_path, monkeypatch):
    def disk_full(*a, **k):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(ckpt_mod, "save_file", disk_full)
    exp = toy_exp()
    with pytest.raises(OSError):
        save_checkpoint(tmp_path / "c.safetensors", ckpt_mod.build_model(exp), exp, 1)
    assert list(tmp_path.iterdir()) == []


def test_not_a_checkpoint(tmp_path):
    from safetensors.torch import save_file

    save_file({"x": torch.zeros(1)}, tmp_path / "other.safetensors")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "other.safetensors")


def test_zero_learning_rate_keeps_parameters(tmp_path):
    exp = toy_exp("train.learning_rate=0.0", "train.max_steps=3")
    source = make_source(exp)
    torch.manual_seed(0)
    model = ckpt_mod.build_model(exp)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(exp, source, tmp_path, model=model)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_non_finite_loss_aborts(tmp_path):
    exp = toy_exp()
    source = make_source(exp)

    class Broken(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.ones(1))

        def forward(self, images):
            return torch.full((images.shape[0], 32, 32, 32), float("nan")) * self.w

    with pytest.raises(TrainingError, match=r"step 1.*toy000"):
        train(exp, source, tmp_path, model=Broken())


def test_metrics_and_resume(tmp_path):
    exp = toy_exp("train.max_steps=4", "train.checkpoint_every=2")
    source = make_source(exp)
    paths = train(exp, source, tmp_path / "full")
    assert [p.name for p in paths] == ["ckpt_0000002.safetensors", "ckpt_0000004.safetensors"]
    rows = read_metrics(tmp_path / "full" / "metrics.jsonl")
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert all(set(r) == {"step", "loss", "iou"} for r in rows)

    resumed = train(exp, source, tmp_path / "full", resume=paths[0])
    assert load_checkpoint(resumed[-1]).step == 4
    with open(tmp_path / "full" / "metrics.jsonl", "a") as f:
        f.write('{"step": 5, "lo')
    assert len(read_metrics(tmp_path / "full" / "metrics.jsonl")) == 6


def test_evaluate_single_category_and_oracle():
    exp = toy_exp("data.toy_n=6")
    source = make_source(exp)
    oracle = Oracle(source)
    report = evaluate(oracle, source, views=2)
    assert report.overall_iou == 1.0 and report.sample_count == 6
    one = aggregate(["chair"] * 3, [0.2, 0.4, 0.9], 1, 0.5)
    assert one.overall_iou == one.per_category_iou["chair"]
    two = aggregate(["a", "b", "b"], [0.2, 0.4, 0.6], 1, 0.5)
    assert abs(two.overall_iou - np.mean(list(two.per_category_iou.values()))) < 1e-12
    assert two.overall_iou == pytest.approx(0.35) and two.per_example_iou == pytest.approx(0.4)
    with pytest.raises(ValueError):
        evaluate(oracle, source, views=5)
    with pytest.raises(ValueError):
        evaluate(oracle, [], views=1)


def test_evaluate_is_reproducible(tmp_path):
    exp = toy_exp()
    source = make_source(exp)
    ck = train(exp, source, tmp_path)[-1]
    a, b = evaluate(ck, source, 2), evaluate(ck, source, 2)
    assert a.to_json() == b.to_json()
    assert EvalReport(**json.loads(a.to_json())) == a


def test_sweep_table():
    exp = toy_exp("data.toy_views=20", "data.toy_n=2")
    source = make_source(exp)
    reports = sweep(Oracle(source), source, TABLE2_VIEWS)
    assert [r.views_used for r in reports] == list(TABLE2_VIEWS)
    table = format_sweep(reports, "oracle")
    assert table.splitlines()[0].count("|") == len(TABLE2_VIEWS) + 2
    assert "| oracle | 1.000 |" in table


def test_cross_table(tmp_path):
    exp = toy_exp("train.max_steps=1")
    source = make_source(exp)
    c1 = train(exp, source, tmp_path / "v1")[-1]
    c2 = train(replace(exp, train=replace(exp.train, views_per_sample=2)), source, tmp_path / "v2")[-1]
    single = multi_view_cross_table({1: c1}, source, [1])
    assert single.train_views == [1] and len(single.cells) == 1 and len(single.cells[0]) == 1
    table = multi_view_cross_table({1: c1, 2: c2}, source, [1, 2, 4])
    assert len(table.cells) == 2 and all(len(r) == 3 for r in table.cells)
    assert table.to_markdown().count("\n") == 3
    other = toy_exp("model.decoder.layers=1", "train.max_steps=1")
    c3 = train(other, source, tmp_path / "v3")[-1]
    with pytest.raises(ValueError, match="geometry"):
        multi_view_cross_table({1: c1, 3: c3}, source, [1])


def test_parameter_counts():
    base, small = count_params(PRESETS["base"]), count_params(PRESETS["small"])
    assert abs(base - 163e6) / 163e6 <= 0.05
    assert abs(small - 11e6) / 11e6 <= 0.10
    tiny_dec = ablation_config(1, resolve(preset="base")).model
    assert count_params(tiny_dec) < base


def test_ablation_deltas():
    exp = resolve(preset="base")
    base = exp.to_dict()

    def diff(a, b, prefix=""):
        out = []
        for k in a:
            if isinstance(a[k], dict):
                out += diff(a[k], b[k], f"{prefix}{k}.")
            elif a[k] != b[k]:
                out.append(prefix + k)
        return out

    assert diff(base, ablation_config(5, exp).to_dict()) == ["train.loss.kind"]
    pre = replace(exp, model=replace(exp.model, encoder=replace(exp.model.encoder, pretrained=True, weights_path="w")))
    assert diff(pre.to_dict(), ablation_config(2, pre).to_dict()) == [
        "model.encoder.pretrained",
        "model.encoder.weights_path",
    ]
    assert diff(base, ablation_config(1, exp).to_dict()) == ["model.decoder.layers", "model.decoder.heads"]
    assert diff(base, ablation_config(6, exp).to_dict()) == ["model.head"]
    assert ablation_config(3, exp).model.encoder.variant == "resnet50"
    with pytest.raises(ValueError):
        spec(7)
    rows = [(s, EvalReport({}, 0.5, 1, 0.5, 1)) for s in range(7)]
    assert format_ablation(rows).count("\n") == 8


def write_pngs(tmp_path, n):
    _, grid = make_toy_dataset(1, 0)[0]
    paths = []
    for v in range(n):
        p = tmp_path / f"v{v}.png"
        Image.fromarray(np.round(render_view(np.array(grid.occupancy), v) * 255).astype(np.uint8)).save(p)
        paths.append(str(p))
    return paths


def test_predict(tmp_path):
    exp = toy_exp("train.max_steps=1")
    ck = train(exp, make_source(exp), tmp_path / "run")[-1]
    images = write_pngs(tmp_path, 21)
    a = predict(ck, images[:1], tmp_path / "a.binvox", sidecar=True)
    b = predict(ck, images[:1], tmp_path / "b.binvox")
    assert load_binvox(a).resolution == 32
    assert a.read_bytes() == b.read_bytes()
    assert np.load(tmp_path / "a.npy").shape == (32, 32, 32)
    with pytest.raises(ValueError):
        predict(ck, images, tmp_path / "c.binvox")
    with pytest.raises(OSError, match="missing.png"):
        predict(ck, [str(tmp_path / "missing.png")], tmp_path / "d.binvox")


def test_cli(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["toy-data", "--out", str(data), "--n", "5", "--views", "3"]) == 0
    common = ["--preset", "toy", "--set", "data.kind=shapenet", "--set", f"data.root={data}"]
    assert main(["preprocess", *common]) == 0
    assert main(["train", *common, "--set", "train.max_steps=1", "--set", "train.batch_size=2",
                 "--out", str(tmp_path / "run")]) == 0
    ck = str(tmp_path / "run" / "ckpt_0000001.safetensors")
    assert main(["eval", ck, "--split", "test", "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["views_used"] == 1
    assert main(["sweep", ck, "--split", "train", "--views", "1,2"]) == 0
    capsys.readouterr()
    assert main(["params", "--preset", "small"]) == 0
    assert int(capsys.readouterr().out.strip()) == count_params(PRESETS["small"])
    png = next((data).glob("*/*/rendering/00.png"))
    assert main(["predict", ck, str(png), "--out", str(tmp_path / "p.binvox")]) == 0
    assert main(["eval", str(tmp_path / "nope.safetensors")]) == 2


def test_two_stage_plumbing(tmp_path):
    from retr3d.pipeline.twostage import train_two_stage

    exp = toy_exp()
    source = make_source(exp)
    ck = train_two_stage(exp, source, tmp_path, stage1_steps=3, stage2_steps=2)
    assert {p.name for p in tmp_path.iterdir()} >= {"vqvae.safetensors", "metrics_stage1.jsonl", "metrics.jsonl"}
    assert len(read_metrics(tmp_path / "metrics_stage1.jsonl")) == 3
    report = evaluate(ck, source, 1)
    assert 0.0 <= report.overall_iou <= 1.0
    model = model_from_checkpoint(ck)
    assert not any(p.requires_grad for p in model.vqvae.parameters())

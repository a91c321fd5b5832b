import json

import numpy as np
import pytest
import torch

from pipeloc import cli
from pipeloc.datamodel import read_manifest
from pipeloc.encoders import load_checkpoint
from pipeloc.errors import NumericError

TINY = """\
gen: {n_videos: 20, mean_duration_s: 60.0}
encoder: {d_model: 16, n_layers_seq: 1, n_heads: 2, ffn_dim: 32, n_latents_video: 2, n_layers_decoder: 1}
pretext: {epochs: 1, queue_size: 16, batch_size: 4}
pointsup: {epochs: 2, k_d: 2, k_b: 2, bkg_stride: 5}
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    assert run("gen-data", "--config", cfg, "--out", root / "data") == 0
    assert run("pretrain", "--config", cfg, "--data", root / "data", "--out", root / "pre") == 0
    assert run("train", "--config", cfg, "--data", root / "data", "--pretext", root / "pre" / "pretext.pt",
               "--out", root / "tr") == 0
    return root


def _jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_artifacts_and_logs(tiny):
    for name in ("data/manifest.json", "pre/pretext.pt", "pre/config.yaml", "tr/model.pt", "tr/config.yaml"):
        assert (tiny / name).exists(), name
    h = load_checkpoint(tiny / "tr" / "model.pt", "pointsup")["config_hash"]
    for log in ("pre/pretext_log.jsonl", "tr/train_log.jsonl"):
        recs = _jsonl(tiny / log)
        assert recs and all(r["config_hash"] == h for r in recs)
    assert any("val_score" in r for r in _jsonl(tiny / "tr" / "train_log.jsonl"))
    assert json.loads((tiny / "data" / "manifest.json").read_text())["meta"]["config_hash"] == h
    assert (tiny / "tr" / "config.yaml").read_text().startswith(f"# config_hash: {h}")


def test_eval_outputs_and_bit_identical_rerun(tiny):
    for out in ("ev1", "ev2"):
        assert run("eval", "--checkpoint", tiny / "tr" / "model.pt", "--data", tiny / "data",
                   "--out", tiny / out, "--per-video") == 0
    a = (tiny / "ev1" / "report.json").read_bytes()
    assert a == (tiny / "ev2" / "report.json").read_bytes()
    rep = json.loads(a)
    assert abs(rep["avg_01_07"] - np.mean(list(rep["ap_at_iou"].values()))) < 1e-9
    assert "config_hash" in rep["meta"]
    test_ids = [s.id for s in read_manifest(tiny / "data" / "manifest.json").load_split("test")]
    assert sorted(p.stem for p in (tiny / "ev1" / "timelines").glob("*.png")) == sorted(test_ids)
    assert (tiny / "ev1" / "pr_curves.png").stat().st_size > 0
    assert run("report", tiny / "ev1" / "report.json") == 0


def test_training_is_deterministic(tiny):
    cfg = tiny / "tiny.yaml"
    assert run("train", "--config", cfg, "--data", tiny / "data", "--pretext", tiny / "pre" / "pretext.pt",
               "--out", tiny / "tr2") == 0
    a = load_checkpoint(tiny / "tr" / "model.pt")
    b = load_checkpoint(tiny / "tr2" / "model.pt")
    assert a["best_epoch"] == b["best_epoch"]
    assert all(torch.equal(a["state_dict"][k], b["state_dict"][k]) for k in a["state_dict"])


def test_disable_pretext_writes_untrained_checkpoint(tiny):
    assert run("pretrain", "--config", tiny / "tiny.yaml", "--set", "ablation.disable_pretext=true",
               "--data", tiny / "data", "--out", tiny / "pre_off") == 0
    assert load_checkpoint(tiny / "pre_off" / "pretext.pt", "pretext")["trained"] is False
    assert not (tiny / "pre_off" / "pretext_log.jsonl").read_text().strip()


def test_ablate_rows_and_deltas(tiny):
    assert run("ablate", "--config", tiny / "tiny.yaml", "--data", tiny / "data", "--out", tiny / "abl",
               "--presets", "no_vo_gate", "no_pe") == 0
    doc = json.loads((tiny / "abl" / "ablation.json").read_text())
    rows = {r["name"]: r for r in doc["rows"]}
    assert list(rows) == ["full", "no_vo_gate", "no_pe"]
    for r in rows.values():
        assert abs(r["delta_avg_01_07"] - (r["avg_01_07"] - rows["full"]["avg_01_07"])) < 1e-9
    assert len(set(doc["variant_config_hashes"].values())) == 3
    assert run("report", tiny / "abl" / "ablation.json") == 0


def test_out_root_env(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path))
    assert run("gen-data", "--config", tiny / "tiny.yaml", "--set", "gen.n_videos=10", "--out", "d") == 0
    assert (tmp_path / "d" / "manifest.json").exists()
    assert run("report", "missing.json") == 3


def test_exit_codes(tiny, tmp_path, capsys):
    cfg = tiny / "tiny.yaml"
    assert run("gen-data", "--config", cfg, "--out", tiny / "data") == 3
    assert "not empty" in capsys.readouterr().err
    assert run("gen-data", "--config", cfg, "--set", "gen.bogus=1", "--out", tmp_path / "x") == 2
    assert run("pretrain", "--config", cfg, "--data", tmp_path / "nowhere", "--out", tmp_path / "p") == 3
    assert run("train", "--config", cfg, "--set", "encoder.d_model=8", "--data", tiny / "data",
               "--pretext", tiny / "pre" / "pretext.pt", "--out", tmp_path / "t") == 2
    assert "d_model" in capsys.readouterr().err
    assert run("eval", "--checkpoint", tiny / "pre" / "pretext.pt", "--data", tiny / "data",
               "--out", tmp_path / "e") == 3
    (tmp_path / "junk.json").write_text("{}")
    assert run("report", tmp_path / "junk.json") == 3


def test_nan_loss_exit_code(tiny, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite pretext loss nan")

    monkeypatch.setattr("pipeloc.pretext.pretext_step", boom)
    assert run("pretrain", "--config", tiny / "tiny.yaml", "--data", tiny / "data", "--out", tmp_path / "p") == 4

from __future__ import annotations

import csv
import json

import pytest

from probprompt.cli import main
from probprompt.config import RunConfig, acceptance_config
from probprompt.encoders import save_embedding_file

SMALL = dict(n_scenes=4, rois_per_scene_gen=3, dim=8, dim_v=8, n_prompts=6, k_sample=3, epochs=2, stage2_epochs=2, lr=1e-2, stage2_lr=1e-2)


def _config(tmp_path, name="cfg.json", **kw):
    path = tmp_path / name
    RunConfig(**{**SMALL, **kw}).save(path)
    return path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_data_digest_is_deterministic(tmp_path, capsys):
    cfg = _config(tmp_path)
    code, first, _ = _run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "a")
    assert code == 0
    _, second, _ = _run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "b")
    assert first == second and len(first.strip()) == 64
    assert (tmp_path / "a" / "scenes.json").read_bytes() == (tmp_path / "b" / "scenes.json").read_bytes()
    assert RunConfig.load(tmp_path / "a" / "config.json") == RunConfig(**SMALL)
    _, other, _ = _run(capsys, "gen-data", "--config", cfg, "--seed", 1, "--out", tmp_path / "c")
    assert other != first


def test_gen_data_acceptance_counts(tmp_path, capsys):
    path = tmp_path / "acc.json"
    acceptance_config().save(path)
    assert _run(capsys, "gen-data", "--config", path, "--out", tmp_path / "d")[0] == 0
    doc = json.loads((tmp_path / "d" / "scenes.json").read_text())
    assert len(doc["scenes"]) == 20
    assert sum(len(s["rois"]) for s in doc["scenes"]) == 120


def test_validation_errors_exit_2(tmp_path, capsys):
    code, _, err = _run(capsys, "gen-data", "--config", _config(tmp_path, n_scenes=0), "--out", tmp_path / "x")
    assert code == 2 and "n_scenes" in err
    (tmp_path / "bad.json").write_text('{"n_scenes": 3, "wat": 1}')
    assert _run(capsys, "gen-data", "--config", tmp_path / "bad.json", "--out", tmp_path / "x")[0] == 2
    assert _run(capsys, "gen-data", "--config", tmp_path / "missing.json", "--out", tmp_path / "x")[0] == 2


def test_zero_epochs_writes_initial_state_only(tmp_path, capsys):
    out = tmp_path / "s1"
    assert _run(capsys, "train-stage1", "--config", _config(tmp_path, epochs=0), "--out", out)[0] == 0
    assert (out / "loss_stage1.csv").read_text() == "step,epoch,l_contrast,l_div,kl,l_prompt,l_stage1,tau\n"
    assert (out / "image_init.emb").exists() and (out / "text_init.emb").exists()
    assert not (out / "image_final.emb").exists()


def test_stage1_outputs_and_determinism(tmp_path, capsys):
    cfg = _config(tmp_path)
    for name in ("r1", "r2"):
        assert _run(capsys, "train-stage1", "--config", cfg, "--out", tmp_path / name)[0] == 0
    for f in ("loss_stage1.csv", "image_final.emb", "text_final.emb", "image_init.emb", "config.json"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
    rows = list(csv.reader(open(tmp_path / "r1" / "loss_stage1.csv")))
    assert len(rows) == 1 + 2 * 1  # 4 scenes fit in one 16-scene batch per epoch
    assert (tmp_path / "r1" / "checkpoint" / "manifest.json").exists()
    for row in rows[1:]:
        l_c, l_div, kl, l_prompt, l_s1 = map(float, row[2:7])
        assert abs(l_prompt - (l_div + kl)) < 1e-8 * max(1, abs(l_prompt))
        assert abs(l_s1 - (l_c + 0.1 * l_prompt)) < 1e-8 * max(1, abs(l_s1))


def test_gaussian_sampling_toggle_changes_losses(tmp_path, capsys):
    _run(capsys, "train-stage1", "--config", _config(tmp_path, "on.json"), "--out", tmp_path / "on")
    _run(capsys, "train-stage1", "--config", _config(tmp_path, "off.json", gaussian_sampling=False), "--out", tmp_path / "off")
    assert (tmp_path / "on" / "loss_stage1.csv").read_text() != (tmp_path / "off" / "loss_stage1.csv").read_text()


def _stage2(tmp_path, capsys, name, **kw):
    s1 = tmp_path / "s1"
    if not s1.exists():
        assert _run(capsys, "train-stage1", "--config", _config(tmp_path), "--out", s1)[0] == 0
    code, out, err = _run(capsys, "train-stage2", "--config", _config(tmp_path, f"{name}.json", **kw), "--stage1", s1, "--out", tmp_path / name)
    return code, tmp_path / name / "loss_stage2.csv"


def _column(path, name):
    rows = list(csv.DictReader(open(path)))
    return [float(r[name]) for r in rows]


def test_stage2_loss_selection_and_gt_init(tmp_path, capsys):
    code, weak = _stage2(tmp_path, capsys, "weak")
    assert code == 0
    _, gga = _stage2(tmp_path, capsys, "gga", pseudo3d_loss="gga")
    assert _column(weak, "l_3d") != _column(gga, "l_3d")
    _, gt = _stage2(tmp_path, capsys, "gt", box_init="gt", lambda_center=0.0)
    assert _column(gt, "l_3d")[0] < 1e-6
    head = open(weak).readline().strip()
    assert head == "step,epoch,l_mse,l_3d,l_stage2"


def test_stage2_requires_3d_data(tmp_path, capsys):
    s1 = tmp_path / "s1"
    _run(capsys, "train-stage1", "--config", _config(tmp_path, with_3d=False), "--out", s1)
    code, _, err = _run(capsys, "train-stage2", "--config", _config(tmp_path, "no3d.json", with_3d=False), "--stage1", s1, "--out", tmp_path / "s2")
    assert code == 2 and "3D" in err
    code, _, _ = _run(capsys, "train-stage2", "--config", _config(tmp_path, "lam0.json", with_3d=False, lam=0.0), "--stage1", s1, "--out", tmp_path / "s2")
    assert code == 0


def test_eval_single_category_noiseless(tmp_path, capsys):
    cfg = _config(tmp_path, n_categories=1, noise_scale=0.0)
    _run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "d")
    code, out, _ = _run(capsys, "eval", "--embeddings", tmp_path / "d" / "features.emb", "--scenes", tmp_path / "d" / "scenes.json", "--out", tmp_path / "e")
    assert code == 0
    row = list(csv.DictReader(open(tmp_path / "e" / "metrics.csv")))[0]
    assert row["label"] == "features" and row["ch"] == "degenerate"
    assert abs(float(row["silhouette_mean"]) - 1.0) < 1e-9
    assert (tmp_path / "e" / "scatter_features.csv").exists()
    dist = list(csv.reader(open(tmp_path / "e" / "distances_features.csv")))
    assert len(dist) == 1 + 4 * 3 // 2


def test_eval_errors(tmp_path, capsys):
    one = tmp_path / "one.emb"
    save_embedding_file(one, [("s000/r0", [1, 2]), ("s000/r1", [3, 4])])
    code, _, err = _run(capsys, "eval", "--embeddings", one, "--out", tmp_path / "e")
    assert code == 2 and "2 scenes" in err
    bad = tmp_path / "bad.emb"
    save_embedding_file(bad, [("noslash", [1, 2]), ("s001/r1", [3, 4])])
    code, _, err = _run(capsys, "eval", "--embeddings", bad, "--out", tmp_path / "e")
    assert code == 2 and "noslash" in err


def test_ablate_small_grid(tmp_path, capsys):
    code, out, _ = _run(capsys, "ablate", "--config", _config(tmp_path, epochs=1), "--out", tmp_path / "ab")
    assert code == 0 and "24 cells, 0 non-finite" in out
    rows = list(csv.DictReader(open(tmp_path / "ab" / "ablation.csv")))
    assert len(rows) == 24 and all(r["finite"] == "1" for r in rows)
    assert (tmp_path / "ab" / "config.json").exists()


def test_selfcheck_tight_tolerance_fails(capsys):
    code, out, _ = _run(capsys, "selfcheck", "--quick", "--tol", "1e-12")
    assert code == 1 and "FAIL" in out


@pytest.mark.parametrize("seed", range(5))
def test_selfcheck_passes_across_seeds(capsys, seed):
    code, out, _ = _run(capsys, "selfcheck", "--quick", "--seed", seed)
    assert code == 0, out

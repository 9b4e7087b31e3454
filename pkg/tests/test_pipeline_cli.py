from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from delta_lab import arithmetic as ar
from delta_lab import cli
from delta_lab import container
from delta_lab import pipeline as pl
from delta_lab.errors import ConfigError

SMALL_DATA = ["--samples", "150", "--hint-rate", "0.15"]
SMALL_NET = ["--hidden", "8", "--features", "4", "--steps", "40", "--head-scale", "3"]
SMALL_TRAIN = ["--steps", "20", "--batch-size", "16"]


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def outputs(d: Path) -> dict:
    return json.loads((d / pl.MANIFEST).read_text())["outputs"]


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    assert run("gen-data", "--out", root / "data", *SMALL_DATA) == 0
    assert run("pretrain", "--data", root / "data", "--out", root / "pre", *SMALL_NET) == 0
    assert run("curvature", "--data", root / "data", "--checkpoint", root / "pre", "--out", root / "curv") == 0
    for m in ("delta", "nonlinear_ft"):
        assert run("train", "--data", root / "data", "--checkpoint", root / "pre", "--curvature", root / "curv",
                   "--out", root / m, "--method", m, *SMALL_TRAIN) == 0
    return root


def common(root):
    return ["--data", root / "data", "--checkpoint", root / "pre"]


def test_gen_data_layout_and_rerun(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d", *SMALL_DATA) == 0
    files = sorted(p.name for p in (tmp_path / "d").iterdir())
    assert files == ["manifest.json", "reference.dlab", "task_0.dlab", "task_1.dlab", "task_2.dlab", "task_3.dlab"]
    first = outputs(tmp_path / "d")
    assert run("gen-data", "--out", tmp_path / "d", *SMALL_DATA) == ConfigError.exit_code
    assert run("gen-data", "--out", tmp_path / "d", "--force", *SMALL_DATA) == 0
    assert outputs(tmp_path / "d") == first


def test_gen_data_refuses_foreign_directory(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "notes.txt").write_text("keep me")
    assert run("gen-data", "--out", tmp_path / "d", "--force", *SMALL_DATA) == ConfigError.exit_code
    assert (tmp_path / "d" / "notes.txt").exists()


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"gen-data": {"samples": 120, "seed": 5}, "tasks": 2}))
    cfg = pl.effective_config("gen-data", pl.load_config_file(cfg_file), {"seed": 9, "dim": None})
    assert cfg["samples"] == 120 and cfg["seed"] == 9 and cfg["tasks"] == 2 and cfg["dim"] == 16
    with pytest.raises(ConfigError):
        pl.effective_config("gen-data", {}, {"bogus": 1})
    with pytest.raises(ConfigError):
        pl.load_config_file(tmp_path / "missing.json")


def test_worker_resolution(monkeypatch):
    monkeypatch.setenv(pl.THREADS_ENV, "3")
    assert pl.resolve_workers(None) == 3 and pl.resolve_workers(2) == 2
    monkeypatch.setenv(pl.THREADS_ENV, "x")
    with pytest.raises(ConfigError):
        pl.resolve_workers(None)
    monkeypatch.delenv(pl.THREADS_ENV)
    assert pl.resolve_workers(None) >= 1
    with pytest.raises(ConfigError):
        pl.resolve_workers(0)


def test_pmap_keeps_order():
    assert pl.pmap(lambda x: x * x, range(10), 4) == [x * x for x in range(10)]


def test_checkpoint_is_32_bit(mini):
    model = pl.load_model(mini / "pre")
    assert np.array_equal(model.theta0.values, ar.round_f32(model.theta0.values))
    header, arrays = container.read(mini / "pre" / pl.CHECKPOINT)
    assert arrays["theta"].dtype == np.dtype("<f4")


def test_curvature_damping_and_oracle(mini, tmp_path):
    base = common(mini)
    assert run("curvature", *base, "--out", tmp_path / "c0", "--damping", "0", "--oracle") == 0
    m = json.loads((tmp_path / "c0" / pl.MANIFEST).read_text())
    oracle = m["extra"]["oracle"]
    assert oracle["ekfac_frobenius_gap"] <= oracle["kfac_frobenius_gap"] + 1e-9
    model = pl.load_model(mini / "pre")
    a = pl.load_curvature(tmp_path / "c0", model)
    b = pl.load_curvature(mini / "curv", model)
    for sa, sb in zip(a.S, b.S):
        assert np.allclose(sb - sa, 1e-4, rtol=0, atol=1e-12)


def test_curvature_for_other_model_rejected(mini, tmp_path):
    base = common(mini)
    assert run("pretrain", "--data", mini / "data", "--out", tmp_path / "p2", *SMALL_NET, "--seed", "3") == 0
    code = run("train", "--data", mini / "data", "--checkpoint", tmp_path / "p2", "--curvature", mini / "curv",
               "--out", tmp_path / "t", *SMALL_TRAIN)
    assert code == 3


def test_train_requires_curvature(mini, tmp_path):
    assert run("train", *common(mini), "--out", tmp_path / "t", "--method", "delta", *SMALL_TRAIN) == 2
    assert run("train", *common(mini), "--out", tmp_path / "t", "--method", "delta_no_reg", *SMALL_TRAIN) == 0


def test_zero_steps_gives_zero_vectors(mini, tmp_path):
    assert run("train", *common(mini), "--out", tmp_path / "t", "--method", "nonlinear_ft", "--steps", "0") == 0
    tau = ar.load_task_vector(tmp_path / "t" / "task_0.student.dlab")
    assert not tau.values.any()


def test_train_outputs(mini):
    names = set(outputs(mini / "delta"))
    assert {"task_0.student.dlab", "task_0.teacher.dlab", "task_0.trace.csv"} <= names
    assert not any(n.endswith("teacher.dlab") for n in outputs(mini / "nonlinear_ft"))


def test_merge_alpha_zero_is_pretrained(mini, tmp_path):
    assert run("merge", *common(mini), "--vectors", mini / "delta", "--out", tmp_path / "m", "--alpha", "0") == 0
    rep = json.loads((tmp_path / "m" / "merge.json").read_text())
    ev = pl.Evaluator(pl.load_model(mini / "pre"), pl.load_suite(mini / "data"))
    assert rep["absolute"] == pytest.approx(ev.pretrained(), abs=1e-6)


def test_merge_sweep_writes_curve(mini, tmp_path):
    assert run("merge", *common(mini), "--vectors", mini / "delta", "--out", tmp_path / "m", "--sweep") == 0
    lines = (tmp_path / "m" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("alpha,mean_accuracy,task_0") and len(lines) == 11
    assert run("merge", *common(mini), "--vectors", mini / "delta", "--out", tmp_path / "e", "--sweep", "--grid", "") == 2


def test_negation_selection_rules():
    r = pl.select_negation("t", [0.5, 1.0, 1.5], [0.6, 0.2, 0.2], [0.9, 0.88, 0.86], 0.8, 0.9, 0.03)
    assert r.feasible and r.alpha == 1.0
    r = pl.select_negation("t", [0.5, 1.0], [0.6, 0.2], [0.5, 0.6], 0.8, 0.9, 0.03)
    assert not r.feasible and r.relaxed_alpha == 1.0 and r.needed_budget == pytest.approx(0.3)
    assert r.to_dict()["feasible"] is False


def test_negate_reports_infeasible(mini, tmp_path):
    assert run("negate", *common(mini), "--vectors", mini / "nonlinear_ft", "--out", tmp_path / "n",
               "--sweep", "--budget", "0") == 0
    text = (tmp_path / "n" / "negation.txt").read_text()
    summary = json.loads((tmp_path / "n" / "negation.json").read_text())
    if not summary["all_feasible"]:
        assert "infeasible" in text


def test_report_contents_and_rerun(mini, tmp_path):
    args = ["report", mini / "delta", mini / "nonlinear_ft", *common(mini)]
    assert run(*args, "--out", tmp_path / "r1", "--workers", "1") == 0
    assert run(*args, "--out", tmp_path / "r2", "--workers", "3") == 0
    assert outputs(tmp_path / "r1") == outputs(tmp_path / "r2")
    s = json.loads((tmp_path / "r1" / "summary.json").read_text())
    assert set(s["runs"]) == {"delta", "nonlinear_ft"}
    assert "teacher_individual" in s["runs"]["delta"]
    assert (tmp_path / "r1" / "delta.heatmap.task_0-task_1.csv").exists()


def test_report_rejects_runs_from_other_suite(mini, tmp_path):
    run("gen-data", "--out", tmp_path / "d2", *SMALL_DATA, "--seed", "1")
    assert run("report", mini / "delta", "--data", tmp_path / "d2", "--checkpoint", mini / "pre", "--out", tmp_path / "r") == 3


def test_report_duplicate_labels_rejected(mini, tmp_path):
    assert run("report", mini / "delta", mini / "delta", *common(mini), "--out", tmp_path / "r") == 2


def test_single_task_refuses_pairwise(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d", "--tasks", "1", *SMALL_DATA) == 0
    assert run("pretrain", "--data", tmp_path / "d", "--out", tmp_path / "p", *SMALL_NET) == 0
    assert run("train", "--data", tmp_path / "d", "--checkpoint", tmp_path / "p", "--out", tmp_path / "t",
               "--method", "nonlinear_ft", *SMALL_TRAIN) == 0
    assert run("report", tmp_path / "t", "--data", tmp_path / "d", "--checkpoint", tmp_path / "p", "--out", tmp_path / "r") == 0
    s = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert any("at least 2 tasks" in n for n in s["notes"])
    assert "disentanglement" not in s["runs"]["nonlinear_ft"]


def test_missing_inputs_exit_codes(tmp_path, capsys):
    assert run("pretrain", "--data", tmp_path / "nothing", "--out", tmp_path / "p") == 3
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        run("train")

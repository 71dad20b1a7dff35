import dataclasses
import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from neuroforget import toydiff as td
from neuroforget.cli import (
    STAGES,
    ConfigError,
    PipelineConfig,
    StageError,
    compute_saliencies,
    load_config,
    main,
    parse_config,
    parse_fraction,
    parse_percent,
    parse_sweep_values,
    run_pipeline,
    run_stage,
    run_sweep,
    trace_model,
    train_model,
)
from neuroforget.evaluate import RunReport
from neuroforget.fusion import ConceptMask
from neuroforget.selection import Granularity, channel_candidates, global_candidates
from neuroforget.sensitivity import read_sensitivity_csv

SMALL = """
[data]
samples_per_concept = 200
[train]
steps = 300
[trace]
prompts_per_group = 3
points_per_prompt = 8
[eval]
samples = 60
"""


@pytest.fixture(scope="module")
def small_cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.ini"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def small_cfg(small_cfg_path):
    return load_config(small_cfg_path)


@pytest.fixture(scope="module")
def small_run(small_cfg, tmp_path_factory):
    return run_pipeline(small_cfg, tmp_path_factory.mktemp("run") / "a")


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- config -----------------------------------------------------------------


def test_percent_parsing():
    assert parse_fraction("5%") == pytest.approx(0.05)
    assert parse_fraction("0.6") == 0.6
    assert parse_percent("0.7") == pytest.approx(0.007)
    assert parse_percent("3%") == pytest.approx(0.03)
    with pytest.raises(ConfigError):
        parse_fraction("five")


def test_bundled_defaults():
    cfg = load_config()
    assert cfg == PipelineConfig()
    assert (cfg.r1, cfg.r2, cfg.alpha, cfg.window) == (0.05, 0.01, 0.6, (1, 10))
    assert cfg.target_layers == ("ffn2",) and cfg.granularity is Granularity.BOTH


def test_config_text_roundtrip_and_overrides():
    cfg = parse_config("[select]\nr2 = 0.7%\nr2_per_concept = 1: 3%\n[sensitivity]\nr1 = 10%\n")
    assert cfg.r2 == pytest.approx(0.007) and cfg.r1 == pytest.approx(0.1)
    assert cfg.r2_for(1) == pytest.approx(0.03) and cfg.r2_for(0) == pytest.approx(0.007)
    assert parse_config(cfg.to_ini()) == cfg
    seeded = load_config(seed=7)
    assert (seeded.data_seed, seeded.train_seed, seeded.trace_seed, seeded.eval_seed) == (7, 7, 8, 107)
    assert seeded.digest() != load_config().digest()


@pytest.mark.parametrize(
    "text",
    [
        "[fuse]\nalpha = 0\n",
        "[sensitivity]\nr1 = 150%\n",
        "[saliency]\nwindow = 0, 10\n",
        "[saliency]\nwindow = 12, 10\n",
        "[eval]\nforget = 0, 1\npreserve = 1, 2\n",
        "[saliency]\ntarget_layers = attn\n",
        "[select]\ngranularity = row\n",
        "not an ini file",
    ],
)
def test_invalid_configs(text, tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)
    assert main(["run", "--config", str(path), "--out-dir", str(tmp_path)]) == 2


def test_flag_validation_exit_codes(tmp_path, capsys):
    assert main(["run", "--alpha", "0", "--out-dir", str(tmp_path)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 2
    assert "config error" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())


# -- end to end -------------------------------------------------------------


def test_run_writes_every_stage_artifact(small_run):
    names = {p.name for p in small_run.iterdir()}
    for f in ("trace.fiat", "saliency.csv", "sensitivity.csv", "pruned.fiam", "concepts.csv", "aggregate.csv"):
        assert f in names
    assert {p.name for p in (small_run / "masks").iterdir()} == {"ffn2__concept0.json", "ffn2__concept1.json"}
    assert {p.name for p in (small_run / "plans").iterdir()} == {"ffn2.json"}
    report = RunReport.from_json((small_run / "report.json").read_text())
    assert report.forget == ["0", "1"] and report.preserve == ["2", "3"]
    assert (small_run / "concepts.csv").read_text().startswith("concept_id,role,acc_pre,acc_post\n")


def test_main_run_uses_hashed_directory(small_cfg_path, small_cfg, tmp_path, capsys):
    assert main(["run", "--config", str(small_cfg_path), "--out-dir", str(tmp_path)]) == 0
    run_dir = Path(capsys.readouterr().out.strip().splitlines()[-1])
    assert run_dir.parent == tmp_path and run_dir.name.endswith(small_cfg.digest()[:12])
    assert load_config(run_dir / "config.ini") == small_cfg


def test_stage_chain_equals_run(small_cfg_path, small_run, tmp_path, capsys):
    out = tmp_path / "chain"
    for stage in STAGES:
        assert main([stage, "--config", str(small_cfg_path), "--out-dir", str(out)]) == 0
    capsys.readouterr()
    expected = tree(small_run)
    expected.pop("config.ini")
    assert tree(out) == expected


def test_rerun_is_identical(small_cfg, small_run, tmp_path):
    again = run_pipeline(small_cfg, tmp_path / "b")
    assert tree(again) == tree(small_run)


def test_workers_do_not_change_results(small_cfg):
    model, _ = train_model(small_cfg)
    trace = trace_model(small_cfg, model)
    two = dataclasses.replace(small_cfg, target_layers=("ffn1", "ffn2"))
    trace2 = trace_model(two, model)
    for cfg, tr in ((small_cfg, trace), (two, trace2)):
        a = compute_saliencies(cfg, tr, workers=1)
        b = compute_saliencies(cfg, tr, workers=4)
        assert [(s.layer_id, s.concept_id) for s in a] == [(s.layer_id, s.concept_id) for s in b]
        assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))


def test_missing_input_names_stage(tmp_path, capsys):
    assert main(["saliency", "--out-dir", str(tmp_path)]) == 1
    assert "stage saliency failed" in capsys.readouterr().err
    with pytest.raises(StageError) as info:
        run_stage("apply", PipelineConfig(), tmp_path, tmp_path)
    assert info.value.stage == "apply"


def test_select_granularities_give_distinct_masks(small_cfg_path, small_run, tmp_path, capsys):
    maps = {m.concept_id: m for m in read_sensitivity_csv(small_run / "sensitivity.csv")}
    got = {}
    for g in ("channel", "layer", "both"):
        out = tmp_path / g
        assert main(["select", "--config", str(small_cfg_path), "--in-dir", str(small_run), "--out-dir", str(out), "--granularity", g]) == 0
        got[g] = ConceptMask.from_json((out / "masks" / "ffn2__concept0.json").read_text()).cells()
    capsys.readouterr()
    a = maps["0"]
    assert got["channel"] == channel_candidates(a, 0.01).members
    assert got["layer"] == global_candidates(a, 0.01).members
    assert got["both"] == got["channel"] & got["layer"]
    assert len({got["channel"], got["layer"], got["both"]}) == 3


def test_fuse_single_mask_falls_back(small_cfg_path, small_run, tmp_path, capsys):
    mask = small_run / "masks" / "ffn2__concept0.json"
    with pytest.warns(UserWarning, match="single concept mask"):
        code = main(["fuse", "--config", str(small_cfg_path), "--out-dir", str(tmp_path), "--masks", str(mask)])
    assert code == 0
    capsys.readouterr()
    plan = json.loads((tmp_path / "plans" / "ffn2.json").read_text())
    assert plan["strategy"] == "direct"
    assert {tuple(c) for c in plan["prune"]} == ConceptMask.from_json(mask.read_text()).cells()


def test_eval_report_prints_table_value(tmp_path, capsys):
    report = RunReport({}, {"f": 0.021, "p": 0.767}, ["f"], ["p"])
    path = tmp_path / "report.json"
    path.write_text(report.to_json())
    assert main(["eval", "--report", str(path)]) == 0
    assert "overall=86.0" in capsys.readouterr().out


# -- sweeps -----------------------------------------------------------------


def test_empty_sweep_rejected(tmp_path):
    with pytest.raises(ConfigError):
        parse_sweep_values("alpha", [])
    assert main(["sweep", "--param", "alpha", "--values", " , ", "--out-dir", str(tmp_path)]) == 2
    assert main(["sweep", "--param", "alpha", "--values", "0.5,1.5", "--out-dir", str(tmp_path)]) == 2


def read_sweep(path):
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, line.split(","))) for line in lines[1:]]


def test_alpha_sweep_monotone(small_cfg, tmp_path):
    rows = read_sweep(run_sweep(small_cfg, "alpha", [0.2, 0.4, 0.6, 0.8], tmp_path))
    agnostic = [int(r["agnostic_count"]) for r in rows]
    assert agnostic == sorted(agnostic, reverse=True)
    assert all(r["F"] and r["P"] and r["overall"] for r in rows)


def test_r2_sweep_monotone(small_cfg, tmp_path):
    rows = read_sweep(run_sweep(small_cfg, "r2", [0.005, 0.01, 0.02, 0.04], tmp_path))
    sizes = [int(r["selected_count"]) for r in rows]
    assert sizes == sorted(sizes)

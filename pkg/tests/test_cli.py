from __future__ import annotations

import re
from pathlib import Path

import pytest

from micl.cli import main
from micl.config import ConfigError, parse_config
from micl.runner import CURVE_COLUMNS, DISTANCE_COLUMNS, MATRIX_COLUMNS, RESULT_COLUMNS, SUMMARY_COLUMNS

TINY_CFG = """
[experiment]
strategies = {strategies}
seed = 3

[synth]
n_subjects = {subjects}
n_sessions = {sessions}
trials_per_session = 6

[model]
f1 = 4
temporal_kernel = 16
sep_kernel = 8

[train]
epochs_pretrain = 2
epochs_finetune = 1
train_hop = 100
"""


def _cfg(tmp_path, name="exp.ini", strategies="ef-ind,joint-seq", subjects=3, sessions=3, extra=""):
    p = tmp_path / name
    p.write_text(TINY_CFG.format(strategies=strategies, subjects=subjects, sessions=sessions) + extra)
    return p


def test_synth_counts_and_determinism(tmp_path, capsys):
    cfg = _cfg(tmp_path, subjects=4, sessions=5)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert "20 sessions" in capsys.readouterr().out
    files = sorted((tmp_path / "a" / "data").glob("*.micl"))
    assert len(files) == 20
    records = [ln for ln in (tmp_path / "a" / "manifest.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(records) == 20
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / "data" / f.name).read_bytes()


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[synth]\nn_channels = 0\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "n_channels" in capsys.readouterr().err
    bad.write_text("[train]\nlearning_rat = 1\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["run", "--otta", "ea,nope", "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--strategies", "foo", "--out", str(tmp_path / "o")]) == 2


def test_config_parsing():
    cfg = parse_config("[experiment]\nstrategies = all\nbuffer = 2,3\notta = ea\nseed = 9\n")
    assert [s.tag for s in cfg.all_strategies] == ["ef-ind", "ef-seq", "joint-ind", "joint-seq",
                                                   "last2-seq", "last3-seq"]
    assert cfg.otta.tag == "ea" and cfg.synth.seed == 9 and cfg.train.seed == 9
    with pytest.raises(ConfigError):
        parse_config("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        parse_config("[preprocess]\nhigh_hz = 200\n")


def test_run_failure_exit_3(tmp_path):
    cfg = _cfg(tmp_path, subjects=1)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 3


def test_report_missing_exit_4(tmp_path):
    assert main(["report", str(tmp_path / "nothing")]) == 4


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _cfg(tmp)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp / "data")]) == 0
    (tmp / "run.ini").write_text(cfg.read_text() + f"\n[data]\nmanifest = {tmp / 'data' / 'manifest.csv'}\n")
    out = tmp / "run"
    assert main(["run", "--config", str(tmp / "run.ini"), "--out", str(out)]) == 0
    assert main(["report", str(out)]) == 0
    return out


def test_report_outputs(run_dir):
    rep = run_dir / "report"
    curve = (rep / "session_curves_ea_adabn.svg").read_text()
    assert curve.count('class="curve"') == 2
    for name in ("strategy_bars_ea_adabn.svg", "eval_matrix_joint-seq_ea_adabn.svg",
                 "distance_matrix_joint-seq_ea_adabn.svg", "table_upper_bound.csv", "table_buffer.csv",
                 "table_otta.csv"):
        assert (rep / name).exists(), name


def test_masked_cells_render_glyph(run_dir):
    svg = (run_dir / "report" / "eval_matrix_joint-seq_ea_adabn.svg").read_text()
    masked = re.findall(r'class="mask">([^<]*)<', svg)
    values = re.findall(r'class="value">([^<]*)<', svg)
    # 2 eval sessions x (source + 2 checkpoints): one causal-masked cell
    assert masked == ["X"]
    assert len(values) == 5 and all(re.fullmatch(r"\d+\.\d", v) for v in values)


def test_csv_headers_golden(run_dir):
    golden = {
        "results.csv": RESULT_COLUMNS,
        "summary.csv": SUMMARY_COLUMNS,
        "session_curves.csv": CURVE_COLUMNS,
        "eval_matrix.csv": MATRIX_COLUMNS,
        "distances.csv": DISTANCE_COLUMNS,
    }
    assert RESULT_COLUMNS == ["subject", "paradigm", "strategy", "eval_session", "checkpoint_step",
                              "accuracy", "n_trials", "flags"]
    for name, cols in golden.items():
        assert (run_dir / name).read_text().splitlines()[0] == ",".join(cols)
    rep = run_dir / "report"
    assert (rep / "table_upper_bound.csv").read_text().splitlines()[0] == (
        "paradigm,strategy,flags,most_recent_mean,most_recent_std,upper_bound_mean,upper_bound_std,p_vs_source")
    assert (rep / "table_buffer.csv").read_text().splitlines()[0] == "paradigm,flags,sessions_used,strategy,mean,std"
    assert (rep / "table_otta.csv").read_text().splitlines()[0] == "paradigm,ea,adabn,mean,std,n_subjects"


def test_summary_rows_per_strategy(tmp_path):
    cfg = _cfg(tmp_path, strategies="all", subjects=2)
    out = tmp_path / "all"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--otta", "off"]) == 0
    rows = (out / "summary.csv").read_text().splitlines()[1:]
    assert len(rows) == 5
    assert all(",off," in r for r in rows)
    assert main(["ablate-buffer", "--config", str(cfg), "--out", str(tmp_path / "buf"), "--buffer", "2"]) == 0
    tags = [r.split(",")[1] for r in (tmp_path / "buf" / "summary.csv").read_text().splitlines()[1:]]
    assert tags == ["source", "ef-seq", "joint-seq", "last2-seq"]


def test_ablate_otta_rows(tmp_path):
    cfg = _cfg(tmp_path, subjects=2)
    out = tmp_path / "ab"
    assert main(["ablate-otta", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["report", str(out)]) == 0
    lines = (out / "report" / "table_otta.csv").read_text().splitlines()[1:]
    assert [tuple(ln.split(",")[1:3]) for ln in lines] == [("1", "1"), ("1", "0"), ("0", "1"), ("0", "0")]


def test_report_traceable_to_results(run_dir):
    import csv

    results = list(csv.DictReader(open(run_dir / "results.csv")))
    summary = list(csv.DictReader(open(run_dir / "summary.csv")))
    for s in summary:
        per_subject = {}
        for r in results:
            if r["strategy"] != s["strategy"]:
                continue
            if s["strategy"] != "source" and int(r["checkpoint_step"]) != int(r["eval_session"]) - 1:
                continue
            per_subject.setdefault(r["subject"], []).append(float(r["accuracy"]))
        means = [sum(v) / len(v) for v in per_subject.values()]
        assert float(s["mean"]) == pytest.approx(sum(means) / len(means), abs=1e-6)
    _ = Path(run_dir)

import csv
import json
import shutil
from pathlib import Path

import pytest

from varpg.cli import (
    CSV_COLUMNS,
    ConfigError,
    bundled_config_path,
    load_config,
    main,
    parse_config,
    serialize_config,
    summarize_dir,
)

FIXTURES = Path(__file__).parent / "fixtures"


def small_config(tmp_path, body_edits=(), seeds="0, 1", iterations=5):
    text = bundled_config_path("maze_gaussian_ginidev").read_text()
    text = text.replace("seeds = 0, 1, 2, 3, 4, 5, 6, 7, 8, 9", f"seeds = {seeds}")
    text = text.replace("iterations = 3000", f"iterations = {iterations}")
    text = text.replace("output_dir = runs", f"output_dir = {tmp_path / 'out'}")
    for old, new in body_edits:
        assert old in text
        text = text.replace(old, new)
    path = tmp_path / "cfg.ini"
    path.write_text(text)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- configs ------------------------------------------------------------------------


def test_every_bundled_config_parses():
    cfg_dir = bundled_config_path("maze_gaussian_ginidev").parent
    paths = sorted(cfg_dir.glob("*.ini"))
    assert len(paths) == 36
    for p in paths:
        cfg = load_config(p)
        assert cfg.name == p.stem and len(cfg.seeds) == 10


def test_serialize_round_trip(tmp_path):
    cfg = load_config(small_config(tmp_path))
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_config_errors_carry_location(tmp_path):
    path = small_config(tmp_path, [("lambda = 1.0", "lambda = -0.5")])
    with pytest.raises(ConfigError, match=r"line \d+: \[metric\] lambda"):
        load_config(path)
    path = small_config(tmp_path, [("batch_size = 50", "batch_size = 50\nbatchsize = 3")])
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(path)
    path = small_config(tmp_path, [("kind = gini_dev", "kind = entropy")])
    with pytest.raises(ConfigError, match=r"\[metric\] kind"):
        load_config(path)


def test_negative_lambda_exit_code(tmp_path, capsys):
    path = small_config(tmp_path, [("lambda = 1.0", "lambda = -1")])
    assert main(["run", str(path)]) == 2
    assert "lambda" in capsys.readouterr().err


def test_missing_map_exit_code(tmp_path, capsys):
    path = small_config(tmp_path, [("map = default", "map = nowhere/maze.txt")])
    assert main(["run", str(path)]) == 2
    assert str(tmp_path / "nowhere" / "maze.txt") in capsys.readouterr().err


def test_invalid_map_exit_code(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("S..\n...\n")  # no goal
    path = small_config(tmp_path, [("map = default", "map = bad.txt")])
    assert main(["run", str(path)]) == 2
    assert "invalid map" in capsys.readouterr().err


# -- run ----------------------------------------------------------------------------


def test_run_writes_rows_and_manifest(tmp_path):
    path = small_config(tmp_path)
    assert main(["run", str(path)]) == 0
    out = tmp_path / "out" / "maze_gaussian_ginidev"
    rows = [r for s in (0, 1) for r in read_rows(out / f"seed_{s}.csv")]
    assert len(rows) == 5 * 2
    assert tuple(rows[0]) == CSV_COLUMNS
    assert {r["seed"] for r in rows} == {"0", "1"}
    manifest = [json.loads(ln) for ln in (out / "manifest.jsonl").read_text().splitlines()]
    assert [m["status"] for m in manifest] == ["finished", "finished"]
    assert len({m["config_hash"] for m in manifest}) == 1
    assert (out / "policy_seed_0.txt").is_file()
    assert load_config(out / "config.ini").train == load_config(path).train


def test_run_is_deterministic_except_clock(tmp_path):
    path = small_config(tmp_path, seeds="3")
    main(["run", str(path)])
    out = tmp_path / "out" / "maze_gaussian_ginidev"
    first = read_rows(out / "seed_3.csv")
    main(["run", str(path)])
    second = read_rows(out / "seed_3.csv")
    for a, b in zip(first, second):
        a.pop("wall_clock"), b.pop("wall_clock")
    assert first == second


def test_log_every_keeps_last_iteration(tmp_path):
    path = small_config(tmp_path, [("log_every = 1", "log_every = 4")], seeds="0", iterations=6)
    main(["run", str(path)])
    rows = read_rows(tmp_path / "out" / "maze_gaussian_ginidev" / "seed_0.csv")
    assert [int(r["iteration"]) for r in rows] == [0, 4, 5]


def test_output_root_override(tmp_path, monkeypatch):
    path = small_config(tmp_path, seeds="0", iterations=2)
    monkeypatch.setenv("VARPG_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
    assert main(["run", str(path)]) == 0
    assert (tmp_path / "elsewhere" / "maze_gaussian_ginidev" / "seed_0.csv").is_file()
    assert not (tmp_path / "out").exists()


def test_ppo_and_greedy_modes(tmp_path):
    path = small_config(tmp_path, [("algorithm = reinforce", "algorithm = ppo"),
                                   ("eval_mode = train", "eval_mode = greedy"),
                                   ("inner_updates = 1", "inner_updates = 2")],
                        seeds="0", iterations=3)
    assert main(["run", str(path)]) == 0
    rows = read_rows(tmp_path / "out" / "maze_gaussian_ginidev" / "seed_0.csv")
    assert len(rows) == 3
    assert all(float(r["risk_averse_rate"]) in (0.0, 1.0) for r in rows)  # deterministic moves


# -- summarize ----------------------------------------------------------------------


def test_summarize_single_run(tmp_path, capsys):
    path = small_config(tmp_path, seeds="0", iterations=3)
    main(["run", str(path)])
    capsys.readouterr()
    assert main(["summarize", str(tmp_path / "out")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and lines[1].startswith("gini_dev,1,0,")


def test_summarize_mixed_runs(capsys):
    rows = {r.metric: r for r in summarize_dir(FIXTURES / "summary_run")}
    assert (rows["mean_dev"].seeds, rows["mean_dev"].failed) == (1, 1)
    assert main(["summarize", str(FIXTURES / "summary_run")]) == 0
    assert "1 failed seed" in capsys.readouterr().err


def test_summarize_golden_fixture(capsys):
    assert main(["summarize", str(FIXTURES / "summary_run")]) == 0
    assert capsys.readouterr().out == (FIXTURES / "summary_expected.csv").read_text()


def test_summarize_empty_dir(tmp_path, capsys):
    assert main(["summarize", str(tmp_path)]) == 1
    assert main(["summarize", str(tmp_path / "missing")]) == 1


def test_summary_uses_csvs_only(tmp_path, capsys):
    shutil.copytree(FIXTURES / "summary_run", tmp_path / "copy")
    main(["summarize", str(tmp_path / "copy")])
    assert capsys.readouterr().out == (FIXTURES / "summary_expected.csv").read_text()


# -- verify -------------------------------------------------------------------------


def test_verify_unknown_suite(capsys):
    assert main(["verify", "nonsense"]) == 2
    assert "unknown suite" in capsys.readouterr().err

import dataclasses
import json

import numpy as np
import pytest

from intrinsic_control import harness
from intrinsic_control.environments import ConfigError, GridSpec
from intrinsic_control.harness import (
    EXIT_CONFIG, EXIT_OK, ExperimentConfig, MetricsLog, config_from_mapping, emit_heatmap,
    episodes_to_threshold, fmt, grid_to_pgm, main, parse_int_list, read_csv_grid, read_pgm,
    train_implicit_run, write_grid_csv,
)
from intrinsic_control.implicit_vic import ImplicitConfig


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ENV_VAR, str(tmp_path / "runs"))
    return tmp_path / "runs"


# ---------------------------------------------------------------- config

def test_config_mapping_and_validation():
    cfg = config_from_mapping({"horizon": "4", "env.kind": "four_room", "width": "9", "height": "9",
                               "seeds": "0..2", "open_loop": "yes"})
    assert cfg.horizon == 4 and cfg.grid.kind == "four_room" and cfg.grid.width == 9
    assert cfg.seeds == (0, 1, 2) and cfg.open_loop is True
    cfg.validate()
    with pytest.raises(ConfigError) as err:
        config_from_mapping({"horizn": "4"})
    assert err.value.field == "horizn"
    with pytest.raises(ConfigError):
        config_from_mapping({"horizon": "four"})
    with pytest.raises(ConfigError):
        ExperimentConfig(goal=(0, 0), grid=GridSpec(kind="four_room", width=9, height=9)).validate()


def test_parse_int_list():
    assert parse_int_list("1..3,7") == (1, 2, 3, 7)
    assert parse_int_list("") == ()


# ---------------------------------------------------------------- files

def test_float_format_round_trips():
    for x in [0.1, 1 / 3, np.pi * 1e-300, -2.5e17, np.nextafter(1.0, 2.0)]:
        assert float(fmt(x)) == x
    assert fmt(np.int64(3)) == "3" and fmt(True) == "1"


def test_metrics_log_schema_and_order(tmp_path):
    log = MetricsLog(tmp_path / "m.csv", ["episode", "value"])
    log.append(episode=1, value=0.5)
    with pytest.raises(ValueError):
        log.append(episode=1, value=0.6)
    with pytest.raises(ValueError):
        log.append(episode=2, other=0.6)
    assert (tmp_path / "m.csv").read_text() == "episode,value\n1,0.5\n"


def test_grid_csv_and_pgm(tmp_path):
    grid = np.array([[0.0, 1.0, np.nan], [0.5, 0.25, 1.0]])
    write_grid_csv(tmp_path / "g.csv", grid)
    back = read_csv_grid(tmp_path / "g.csv")
    assert np.array_equal(np.isnan(back), np.isnan(grid))
    assert np.array_equal(back[~np.isnan(back)], grid[~np.isnan(grid)])
    img = read_pgm(grid_to_pgm(grid))
    assert img.shape == (2, 3)
    assert img[0, 2] == 0 and img[0, 0] == 1 and img[0, 1] == 255
    assert np.all(read_pgm(grid_to_pgm(np.full((2, 2), 3.0))) == 128)
    (tmp_path / "bad.csv").write_text("1,2\n3\n")
    with pytest.raises(ValueError):
        read_csv_grid(tmp_path / "bad.csv")
    out = emit_heatmap(tmp_path / "g.csv")
    assert out.suffix == ".pgm" and read_pgm(out.read_bytes()).shape == (2, 3)


def test_episodes_to_threshold():
    eps = np.arange(1, 11) * 10
    reward = np.array([0, 0, 0, 1, 1, 1, 1, 1, 1, 1], dtype=float)
    assert episodes_to_threshold(eps, reward, 1.0, 3) == 60
    assert episodes_to_threshold(eps, reward, 2.0, 3) is None


# ---------------------------------------------------------------- checkpoints

def test_resume_reproduces_uninterrupted_run(tmp_path):
    spec = GridSpec(width=4, height=4, push_noise_prob=0.2)
    cfg = ImplicitConfig(horizon=3, batch_size=4, episodes=48, embed_size=8, hidden_size=16)
    whole, split = tmp_path / "whole", tmp_path / "split"
    whole.mkdir()
    split.mkdir()
    train_implicit_run(spec, cfg, 7, whole)
    train_implicit_run(spec, dataclasses.replace(cfg, episodes=24), 7, split, checkpoint_every=1)
    train_implicit_run(spec, cfg, 7, split, checkpoint_every=1, resume=True)
    assert (whole / "batches.csv").read_bytes() == (split / "batches.csv").read_bytes()


# ---------------------------------------------------------------- command line

def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train-implicit", "--set", "horizn=3"]) == EXIT_CONFIG
    assert main(["train-implicit", "--env", "nowhere"]) == EXIT_CONFIG
    assert main(["train-implicit", "--size", "1"]) == EXIT_CONFIG
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("horizon = 2\nepisodes = 8\n")
    blocked = tmp_path / "file"
    blocked.write_text("")
    assert main(["train-implicit", "--config", str(cfg_file), "--out", str(blocked / "x")]) == EXIT_CONFIG


def test_cli_train_implicit_writes_outputs(output_root):
    code = main(["train-implicit", "--size", "4", "--horizon", "2", "--episodes", "32", "--batch", "8",
                 "--seeds", "0..1", "--start", "1,1"])
    assert code == EXIT_OK
    run = output_root / "train-implicit"
    summary = json.loads((run / "summary.json").read_text())
    assert [r["seed"] for r in summary["runs"]] == [0, 1]
    rows = (run / "seed0" / "batches.csv").read_text().splitlines()
    assert rows[0].startswith("episodes,") and len(rows) == 5
    assert (run / "seed0" / "endpoints.csv").exists()
    assert json.loads((run / "config.json").read_text())["horizon"] == 2


def test_cli_metrics_are_reproducible(tmp_path):
    args = ["train-implicit", "--size", "4", "--horizon", "2", "--episodes", "32", "--batch", "8"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "seed0" / "batches.csv").read_bytes()
    assert a == (tmp_path / "b" / "seed0" / "batches.csv").read_bytes()


def test_cli_exact_map_and_render(output_root):
    assert main(["exact-map", "--env", "standard", "--size", "3", "--horizons", "1..2"]) == EXIT_OK
    csv = output_root / "exact-map" / "empowerment_T2.csv"
    grid = read_csv_grid(csv)
    assert grid.shape == (3, 3)
    assert grid[1, 1] == pytest.approx(np.log(9))
    assert main(["render", str(csv)]) == EXIT_OK
    assert csv.with_suffix(".pgm").exists()


def test_cli_explicit(output_root):
    assert main(["train-explicit", "--size", "3", "--episodes", "200", "--options", "4"]) == EXIT_OK
    summary = json.loads((output_root / "train-explicit" / "summary.json").read_text())
    assert 0 <= summary["runs"][0]["accuracy"] <= 1
    assert len(list((output_root / "train-explicit" / "seed0" / "option_maps").glob("*.csv"))) == 4

"""Experiment orchestration: configs, seeded runs, CSV metrics, checkpoints and maps.

Every run writes into its own directory below the output root
(``$VIC_OUTPUT_ROOT``, default ``./runs``).  Metrics are CSV files with
17-significant-digit floats so reruns compare byte for byte; wall-clock
timings go to a separate ``timing.csv`` for the same reason.

The command line (``python -m intrinsic_control <command>``) is a thin layer
over the ``run_*`` functions here.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import exact_empowerment as exact
from .environments import (
    CapacityError, ConfigError, GridSpec, build_layout, grid_values, load_grid_spec,
    make_env, parse_key_values, reachable_set, tabular_model, _coerce,
)
from .explicit_vic import (
    ExplicitConfig, TabularWorld, evaluate_explicit, option_prediction_map, specialised_options,
    train_explicit,
)
from .implicit_vic import ImplicitConfig, Trainer, endpoint_distribution
from .neural import load_checkpoint, save_checkpoint

OUTPUT_ENV_VAR = "VIC_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# The dangerous world used for the exact maps: a 10x10 square (see README).
DANGEROUS_DEFAULT = GridSpec(kind="dangerous", width=10, height=10, corridor_length=5,
                             slip_prob=0.5, trap_escape_prob=0.05)

TABLE1_ROWS = {
    "open:6:6": ("standard", 6, 6), "open:6:12": ("standard", 6, 12),
    "open:10:10": ("standard", 10, 10), "open:10:20": ("standard", 10, 20),
    "four:9:9": ("four_room", 9, 9), "four:15:15": ("four_room", 15, 15),
    "four:25:25": ("four_room", 25, 25),
}
TABLE1_REFERENCE = {
    "open:6:6": (2.7, 5.8), "open:6:12": (2.8, 6.7), "open:10:10": (3.7, 12.6),
    "open:10:20": (4.1, 15.1), "four:9:9": (2.4, 8.4), "four:15:15": (3.3, 19.0),
    "four:25:25": (4.7, 45.9),
}


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    name: str = "experiment"
    algorithm: str = "implicit"
    grid: GridSpec = field(default_factory=GridSpec)
    seeds: tuple[int, ...] = (0,)
    output_dir: str | None = None
    # implicit options
    horizon: int = 6
    episodes: int = 20000
    batch_size: int = 16
    epsilon: float = 0.05
    lr: float = 1e-3
    open_loop: bool = False
    reward_to_go: bool = False
    alpha: float = 0.0
    goal: tuple[int, int] | None = None
    eval_batches: int = 64
    checkpoint_every: int = 0
    # explicit options
    n_options: int = 30
    termination_prob: float = 0.05
    phase_length: int = 500
    condition_on_start: bool = True
    # exact maps
    horizons: tuple[int, ...] = (1, 2, 3, 4, 5, 6)

    ALGORITHMS = ("explicit", "implicit", "exact", "open-vs-closed", "finetune", "distractor",
                  "blocks-sweep")

    def validate(self) -> None:
        if self.algorithm not in self.ALGORITHMS:
            raise ConfigError("algorithm", f"unknown algorithm {self.algorithm!r}")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        self.grid.validate()
        if self.horizon < 1:
            raise ConfigError("horizon", "must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon", "must be in [0, 1]")
        if not 0.0 < self.termination_prob <= 1.0:
            raise ConfigError("termination_prob", "must be in (0, 1]")
        if self.n_options < 2:
            raise ConfigError("n_options", "must be >= 2")
        if self.goal is not None:
            layout = build_layout(self.grid)
            x, y = self.goal
            if not (0 <= x < layout.width and 0 <= y < layout.height) or not layout.free[y, x]:
                raise ConfigError("goal", f"{self.goal} is not a free cell")

    def implicit(self, **changes) -> ImplicitConfig:
        cfg = ImplicitConfig(horizon=self.horizon, episodes=self.episodes, batch_size=self.batch_size,
                             epsilon=self.epsilon, lr=self.lr, open_loop=self.open_loop,
                             reward_to_go=self.reward_to_go, alpha=self.alpha, goal=self.goal)
        return dataclasses.replace(cfg, **changes)

    def explicit(self) -> ExplicitConfig:
        return ExplicitConfig(n_options=self.n_options, termination_prob=self.termination_prob,
                              episodes=self.episodes, phase_length=self.phase_length,
                              condition_on_start=self.condition_on_start)


def config_from_mapping(values: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from flat string pairs; GridSpec fields may appear bare
    or prefixed with ``env.``."""
    cfg = dataclasses.replace(base) if base is not None else ExperimentConfig()
    grid_fields = {f.name: str(f.type) for f in dataclasses.fields(GridSpec)}
    exp_fields = {f.name: str(f.type) for f in dataclasses.fields(ExperimentConfig) if f.name != "grid"}
    grid_changes = {}
    for raw_key, value in values.items():
        key = raw_key.replace("-", "_")
        target = key[4:] if key.startswith("env.") else key
        try:
            if target in exp_fields and not key.startswith("env."):
                setattr(cfg, target, _parse_value(value, exp_fields[target]))
            elif target in grid_fields:
                grid_changes[target] = _coerce(value, grid_fields[target])
            else:
                raise ConfigError(raw_key, "unknown configuration key")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(raw_key, str(exc)) from None
    if grid_changes:
        cfg.grid = cfg.grid.replace(**grid_changes)
    return cfg


def _parse_value(value, annotation: str):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if annotation.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if annotation.startswith("tuple[int, ...]"):
        return parse_int_list(text)
    return _coerce(text, annotation)


def parse_int_list(text: str) -> tuple[int, ...]:
    """``"0,1,2"`` or ``"1..6"`` (inclusive)."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV_VAR, "runs"))


def prepare_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError("output_dir", f"cannot write to {path}: {exc}") from None
    return path


# ---------------------------------------------------------------------------
# persistence

def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


class MetricsLog:
    """Append-only CSV with a fixed header and monotone index column."""

    def __init__(self, path: Path, columns: list[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self._last = None
        with open(self.path, "w", newline="") as fh:
            fh.write(",".join(self.columns) + "\n")

    def append(self, **row) -> None:
        if set(row) != set(self.columns):
            raise ValueError(f"row keys {sorted(row)} do not match schema {self.columns}")
        index = row[self.columns[0]]
        if self._last is not None and index <= self._last:
            raise ValueError(f"index {index} is not after {self._last}")
        self._last = index
        with open(self.path, "a", newline="") as fh:
            fh.write(",".join(fmt(row[c]) for c in self.columns) + "\n")


def read_csv_grid(path: Path) -> np.ndarray:
    """Rectangular numeric CSV; blank fields become NaN."""
    rows = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    cells = [r.split(",") for r in rows]
    widths = {len(r) for r in cells}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged CSV (row widths {sorted(widths)})")
    return np.array([[float(v) if v.strip() else np.nan for v in r] for r in cells])


def write_grid_csv(path: Path, grid: np.ndarray) -> None:
    Path(path).write_text(exact.grid_to_csv(grid), encoding="utf-8")


def grid_to_pgm(grid: np.ndarray) -> bytes:
    """8-bit binary graymap.  NaN cells are black; the rest are min-max scaled
    onto 1..255, and a constant grid is mid-gray (128)."""
    g = np.asarray(grid, dtype=float)
    valid = ~np.isnan(g)
    out = np.zeros(g.shape, dtype=np.uint8)
    if valid.any():
        lo, hi = g[valid].min(), g[valid].max()
        if hi > lo:
            out[valid] = np.round(1 + 254 * (g[valid] - lo) / (hi - lo)).astype(np.uint8)
        else:
            out[valid] = 128
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
    return header + out.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    pixels = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    return pixels.reshape(h, w)


def emit_heatmap(csv_path: Path, pgm_path: Path | None = None) -> Path:
    grid = read_csv_grid(csv_path)
    pgm_path = Path(pgm_path) if pgm_path else Path(csv_path).with_suffix(".pgm")
    pgm_path.write_bytes(grid_to_pgm(grid))
    return pgm_path


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    """Independent named streams for one run seed."""
    env, agent, explore = np.random.SeedSequence(seed).spawn(3)
    return {"env": env, "agent": agent, "explore": explore}


def summarise(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
            "values": v.tolist()}


# ---------------------------------------------------------------------------
# exact maps

def run_exact(cfg: ExperimentConfig, out: Path) -> dict:
    model = tabular_model(cfg.grid)
    summary = {"horizons": list(cfg.horizons), "files": []}
    for T in cfg.horizons:
        values = exact.empowerment_map(model, T)
        path = out / f"empowerment_T{T}.csv"
        exact.write_empowerment_csv(path, model, values)
        summary["files"].append(path.name)
    return summary


def dangerous_profile(grid: np.ndarray, spec: GridSpec) -> dict:
    """Square-interior mean, square centre and a corridor cell of a map."""
    L, N, H = spec.corridor_length, spec.width, spec.height
    interior = grid[1:H - 1, L + 1:L + N - 1]
    return {"interior_mean": float(np.nanmean(interior)),
            "centre": float(grid[H // 2, L + N // 2]),
            "corridor": float(grid[0, L // 2])}


# ---------------------------------------------------------------------------
# explicit options

def run_explicit_seed(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    streams = seed_streams(seed)
    spec = cfg.grid.replace(seed=int(streams["env"].generate_state(1)[0]))
    world = TabularWorld(make_env(spec))
    ecfg = cfg.explicit()
    log = MetricsLog(out / "episodes.csv", ["episode", "r_I", "baseline", "q_correct", "length"])
    agent, _ = train_explicit(world, ecfg, np.random.default_rng(streams["agent"]),
                              on_episode=lambda e, a: log.append(
                                  episode=e.episode, r_I=e.r_I, baseline=e.baseline,
                                  q_correct=e.correct, length=e.length))
    evaluation = evaluate_explicit(world, agent, ecfg, np.random.default_rng(streams["explore"]))
    maps_dir = out / "option_maps"
    maps_dir.mkdir(exist_ok=True)
    s0 = 0
    pred = option_prediction_map(agent.q, world.model, s0=s0)
    for k, grid in enumerate(pred):
        write_grid_csv(maps_dir / f"option_{k:03d}.csv", grid)
    write_grid_csv(out / "empowerment_estimate.csv", grid_values(world.model, agent.baseline.values))
    return {"seed": seed, "mean_r_I": evaluation["mean_r_I"], "stderr_r_I": evaluation["stderr_r_I"],
            "accuracy": evaluation["accuracy"], "specialised_options": specialised_options(pred),
            "reward_clamps": agent.clamp.count}


# ---------------------------------------------------------------------------
# implicit options

BATCH_COLUMNS = ["episodes", "mean_R_I", "exp_R_I", "baseline", "inference_loss", "extrinsic",
                 "mean_return"]


def train_implicit_run(spec: GridSpec, icfg: ImplicitConfig, seed: int, out: Path,
                       checkpoint_every: int = 0, resume: bool = False, trainer: Trainer | None = None,
                       log_name: str = "batches.csv") -> Trainer:
    trainer = trainer or Trainer(spec, icfg, seed=seed)
    ck = out / "checkpoint.bin"
    state_file = out / "checkpoint_rng.json"
    if resume and ck.exists():
        trainer.agent.load_state_dict(load_checkpoint(ck))
        trainer.set_rng_state(json.loads(state_file.read_text()))
    log = MetricsLog(out / log_name, BATCH_COLUMNS) if not (resume and ck.exists()) else _reopen(out / log_name)
    timing = open(out / "timing.csv", "a")
    start = time.time()
    target = icfg.episodes

    def on_batch(stats, tr):
        log.append(**dataclasses.asdict(stats))
        timing.write(f"{stats.episodes},{time.time() - start:.3f}\n")
        if checkpoint_every and (stats.episodes // icfg.batch_size) % checkpoint_every == 0:
            save_checkpoint(ck, tr.agent.state_dict())
            write_json(state_file, tr.rng_state())

    remaining = target - trainer.episodes_done
    if remaining > 0:
        trainer.train(remaining, on_batch=on_batch)
    timing.close()
    return trainer


def _reopen(path: Path) -> MetricsLog:
    log = MetricsLog.__new__(MetricsLog)
    log.path = path
    with open(path) as fh:
        rows = list(csv.reader(fh))
    log.columns = rows[0]
    log._last = int(rows[-1][0]) if len(rows) > 1 else None
    return log


def run_implicit_seed(cfg: ExperimentConfig, seed: int, out: Path, resume: bool = False) -> dict:
    streams = seed_streams(seed)
    spec = cfg.grid.replace(seed=int(streams["env"].generate_state(1)[0]))
    icfg = cfg.implicit(objective="combined" if cfg.goal is not None and cfg.alpha else "intrinsic")
    trainer = train_implicit_run(spec, icfg, seed, out, cfg.checkpoint_every, resume)
    ev = trainer.evaluate(cfg.eval_batches)
    result = {"seed": seed, **ev}
    if spec.kind != "glyph_pair" and spec.n_blocks == 0 and spec.n_distractors == 0:
        try:
            model = tabular_model(spec)
        except CapacityError:
            model = None
        if model is not None:
            result["log_reachable_mean"] = mean_log_reachable(model, cfg.horizon)
    if spec.kind != "glyph_pair":
        start = spec.start
        if start is not None:
            dist = endpoint_distribution(spec, trainer.agent, cfg.horizon, 2048,
                                         np.random.default_rng(streams["explore"]), start=start,
                                         open_loop=cfg.open_loop)
            layout = build_layout(spec)
            write_grid_csv(out / "endpoints.csv", dist.grid((layout.height, layout.width)))
            result["endpoint_exp_entropy"] = dist.exp_entropy
    return result


def mean_log_reachable(model, T: int) -> float:
    """Average of ``ln |reachable(s0, T)|`` over uniformly drawn start states."""
    starts = [s for s in range(model.n_states)
              if not (len(model.keys[s]) == 3 and model.keys[s][2] is True)]
    return float(np.mean([math.log(len(reachable_set(model, s, T))) for s in starts]))


# ---------------------------------------------------------------------------
# composite experiments

def table1_row(cfg: ExperimentConfig, row: str, seed: int, out: Path) -> dict:
    kind, size, T = TABLE1_ROWS[row]
    spec = cfg.grid.replace(kind=kind, width=size, height=size)
    result = {"row": row, "seed": seed}
    for label, open_loop in (("open", True), ("closed", False)):
        sub = prepare_dir(out / row.replace(":", "_") / label / f"seed{seed}")
        c = dataclasses.replace(cfg, grid=spec, horizon=T, open_loop=open_loop)
        result[label] = run_implicit_seed(c, seed, sub)["exp_R_I"]
    return result


def run_finetune_seed(cfg: ExperimentConfig, seed: int, out: Path, pretrain_episodes: int,
                      threshold: float, window: int) -> dict:
    """Pre-train on intrinsic reward, then fine-tune on ``R_I + alpha R_E``;
    compare with REINFORCE on ``alpha R_E`` alone from scratch."""
    streams = seed_streams(seed)
    spec = cfg.grid.replace(seed=int(streams["env"].generate_state(1)[0]))
    pre = Trainer(spec, cfg.implicit(objective="intrinsic", goal=None, alpha=0.0), seed=seed)
    pre_dir = prepare_dir(out / "pretrain")
    train_implicit_run(spec, dataclasses.replace(pre.cfg, episodes=pretrain_episodes), seed, pre_dir,
                       trainer=pre)
    curves = {}
    for label, objective, agent in (("pretrained", "combined", pre.agent), ("scratch", "extrinsic", None)):
        icfg = cfg.implicit(objective=objective)
        tr = Trainer(spec, icfg, seed=seed + 1_000_003, agent=agent)
        sub = prepare_dir(out / label)
        train_implicit_run(spec, icfg, seed, sub, trainer=tr)
        rewards = np.loadtxt(sub / "batches.csv", delimiter=",", skiprows=1, ndmin=2)
        curves[label] = rewards[:, [0, 5]]
    reached = {k: episodes_to_threshold(v[:, 0], v[:, 1], threshold, window) for k, v in curves.items()}
    return {"seed": seed, "threshold": threshold, **{f"episodes_{k}": v for k, v in reached.items()},
            **{f"final_reward_{k}": float(v[-window:, 1].mean()) for k, v in curves.items()}}


def episodes_to_threshold(episodes: np.ndarray, reward: np.ndarray, threshold: float, window: int):
    """First episode count at which the trailing mean reward reaches ``threshold``."""
    if len(reward) < window:
        return None
    trailing = np.convolve(reward, np.ones(window) / window, mode="valid")
    hit = np.flatnonzero(trailing >= threshold)
    return int(episodes[hit[0] + window - 1]) if len(hit) else None


# ---------------------------------------------------------------------------
# driver

def run(cfg: ExperimentConfig, resume: bool = False, **extra) -> Path:
    """Execute an experiment for every seed; returns the run directory."""
    cfg.validate()
    out = prepare_dir(Path(cfg.output_dir) if cfg.output_dir else output_root() / cfg.name)
    write_json(out / "config.json", dataclasses.asdict(cfg))
    started = time.time()
    per_seed = []
    if cfg.algorithm == "exact":
        write_json(out / "summary.json", run_exact(cfg, out))
        write_json(out / "timing.json", {"seconds": time.time() - started})
        return out
    for seed in cfg.seeds:
        sub = prepare_dir(out / f"seed{seed}")
        if cfg.algorithm == "explicit":
            per_seed.append(run_explicit_seed(cfg, seed, sub))
        elif cfg.algorithm == "implicit":
            per_seed.append(run_implicit_seed(cfg, seed, sub, resume))
        elif cfg.algorithm == "open-vs-closed":
            for row in extra.get("rows", ["open:6:6"]):
                per_seed.append(table1_row(cfg, row, seed, sub))
        elif cfg.algorithm == "finetune":
            per_seed.append(run_finetune_seed(cfg, seed, sub, extra.get("pretrain_episodes", cfg.episodes),
                                              extra.get("threshold", 1.0), extra.get("window", 20)))
        elif cfg.algorithm == "blocks-sweep":
            for nb in extra.get("blocks", (0, 1, 2, 3)):
                c = dataclasses.replace(cfg, grid=cfg.grid.replace(kind="blocks", n_blocks=nb))
                r = run_implicit_seed(c, seed, prepare_dir(sub / f"blocks{nb}"))
                per_seed.append({"blocks": nb, **r})
        elif cfg.algorithm == "distractor":
            for nd in (0, 2):
                c = dataclasses.replace(cfg, grid=cfg.grid.replace(kind="distractor", n_distractors=nd))
                r = run_implicit_seed(c, seed, prepare_dir(sub / f"distractors{nd}"))
                per_seed.append({"distractors": nd, **r})
    write_json(out / "summary.json", {"runs": per_seed})
    write_json(out / "timing.json", {"seconds": time.time() - started})
    return out


# ---------------------------------------------------------------------------
# command line

def _env_spec(args, default: GridSpec) -> GridSpec:
    spec = default
    if getattr(args, "env", None):
        path = Path(args.env)
        if path.exists():
            spec = load_grid_spec(path)
        else:
            spec = spec.replace(kind=args.env)
    changes = {}
    for name in ("width", "height"):
        if getattr(args, name, None) is not None:
            changes[name] = getattr(args, name)
    if getattr(args, "size", None) is not None:
        changes["width"] = changes["height"] = args.size
    if getattr(args, "noise", None) is not None:
        changes["push_noise_prob"] = args.noise
    if getattr(args, "start", None):
        changes["start"] = tuple(int(v) for v in args.start.split(","))
    spec = spec.replace(**changes)
    spec.validate()
    return spec


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--env", help="GridSpec file or world kind")
    p.add_argument("--size", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--noise", type=float, help="push noise probability")
    p.add_argument("--start", help="fixed start cell x,y")
    p.add_argument("--seed", type=int, action="append", help="repeatable")
    p.add_argument("--seeds", help="e.g. 0..4")
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="run directory (default $VIC_OUTPUT_ROOT/<command>)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intrinsic_control", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-explicit", help="explicit options with Q-learning")
    _common(p)
    p.add_argument("--options", type=int)
    p.add_argument("--term-prob", type=float)

    p = sub.add_parser("train-implicit", help="implicit options (recurrent actor and inference)")
    _common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--open-loop", action="store_true")
    p.add_argument("--alpha", type=float)
    p.add_argument("--goal")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("exact-map", help="exact open-loop empowerment maps")
    _common(p)
    p.add_argument("--horizons", default="1..6")

    p = sub.add_parser("table1", help="open versus closed loop comparison")
    _common(p)
    p.add_argument("--rows", default="open:6:6,open:6:12,four:9:9")
    p.add_argument("--batch", type=int)

    p = sub.add_parser("finetune", help="intrinsic pre-training then extrinsic reward")
    _common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--alpha", type=float, default=30.0)
    p.add_argument("--goal", default="3,3")
    p.add_argument("--pretrain-episodes", type=int, default=20000)
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--window", type=int, default=20)

    p = sub.add_parser("blocks-sweep", help="empowerment with 0..3 pushable blocks")
    _common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--blocks", default="0..3")

    p = sub.add_parser("distractor-check", help="empowerment with and without distractors")
    _common(p)
    p.add_argument("--horizon", type=int)

    p = sub.add_parser("render", help="CSV grid to PGM heatmap")
    p.add_argument("csv")
    p.add_argument("--out")
    return parser


DEFAULTS = {
    "train-explicit": (ExperimentConfig(algorithm="explicit", grid=GridSpec(width=6, height=6),
                                        episodes=20000), {}),
    "train-implicit": (ExperimentConfig(algorithm="implicit", grid=GridSpec(width=6, height=6)), {}),
    "exact-map": (ExperimentConfig(algorithm="exact", grid=DANGEROUS_DEFAULT), {}),
    "table1": (ExperimentConfig(algorithm="open-vs-closed", grid=GridSpec(push_noise_prob=0.2),
                                episodes=32000), {}),
    "finetune": (ExperimentConfig(algorithm="finetune", grid=GridSpec(kind="four_room", width=15, height=15),
                                  horizon=15, episodes=20000, alpha=30.0, goal=(3, 3)), {}),
    "blocks-sweep": (ExperimentConfig(algorithm="blocks-sweep",
                                      grid=GridSpec(kind="blocks", width=6, height=6, block_layout="fixed"),
                                      horizon=15, episodes=96000), {}),
    "distractor-check": (ExperimentConfig(algorithm="distractor",
                                          grid=GridSpec(kind="distractor", width=9, height=9),
                                          horizon=9, episodes=32000), {}),
}


def config_from_args(args) -> tuple[ExperimentConfig, dict]:
    base, extra = DEFAULTS[args.command]
    base = dataclasses.replace(base, name=args.command)
    if args.config:
        base = config_from_mapping(parse_key_values(Path(args.config).read_text(encoding="utf-8")), base)
    base.grid = _env_spec(args, base.grid)
    overrides = dict(kv.split("=", 1) for kv in args.set) if args.set else {}
    cfg = config_from_mapping(overrides, base) if overrides else base
    flag_map = {"episodes": "episodes", "options": "n_options", "term_prob": "termination_prob",
                "horizon": "horizon", "batch": "batch_size", "eps": "epsilon", "lr": "lr",
                "alpha": "alpha", "checkpoint_every": "checkpoint_every"}
    for flag, attr in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "open_loop", False):
        cfg.open_loop = True
    if getattr(args, "goal", None):
        cfg.goal = tuple(int(v) for v in args.goal.split(","))
    if getattr(args, "horizons", None):
        cfg.horizons = parse_int_list(args.horizons)
    seeds = list(args.seed or [])
    if args.seeds:
        seeds.extend(parse_int_list(args.seeds))
    if seeds:
        cfg.seeds = tuple(seeds)
    if args.out:
        cfg.output_dir = args.out
    extra = dict(extra)
    if args.command == "table1":
        extra["rows"] = [r.strip() for r in args.rows.split(",") if r.strip()]
        unknown = [r for r in extra["rows"] if r not in TABLE1_ROWS]
        if unknown:
            raise ConfigError("rows", f"unknown rows {unknown}; choose from {sorted(TABLE1_ROWS)}")
    if args.command == "finetune":
        extra.update(pretrain_episodes=args.pretrain_episodes, threshold=args.threshold, window=args.window)
    if args.command == "blocks-sweep":
        extra["blocks"] = parse_int_list(args.blocks)
    return cfg, extra


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "render":
            path = emit_heatmap(Path(args.csv), Path(args.out) if args.out else None)
            print(path)
            return EXIT_OK
        cfg, extra = config_from_args(args)
        cfg.validate()
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = run(cfg, resume=getattr(args, "resume", False), **extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# acceptance experiments (the long-running ones)

def acceptance_experiments(scale: float = 1.0) -> dict[str, tuple[ExperimentConfig, dict]]:
    """Configurations behind the recorded acceptance results.

    ``scale`` multiplies every episode budget, for quick rehearsals.
    """
    def n(episodes):
        return max(16, int(round(episodes * scale / 16)) * 16)

    noisy = GridSpec(push_noise_prob=0.2)
    return {
        "table1": (ExperimentConfig(name="table1", algorithm="open-vs-closed", grid=noisy,
                                    episodes=n(32000)), {"rows": list(TABLE1_ROWS)}),
        "fourroom25": (ExperimentConfig(name="fourroom25", algorithm="implicit",
                                        grid=GridSpec(kind="four_room", width=25, height=25),
                                        horizon=25, episodes=n(FOURROOM_EPISODES), seeds=(0, 1, 2)), {}),
        "blocks": (ExperimentConfig(name="blocks", algorithm="blocks-sweep",
                                    grid=GridSpec(kind="blocks", width=6, height=6, block_layout="fixed"),
                                    horizon=15, episodes=n(BLOCKS_EPISODES)), {"blocks": (0, 1, 2, 3)}),
        "glyph4": (ExperimentConfig(name="glyph4", algorithm="implicit",
                                    grid=GridSpec(kind="glyph_pair", n_classes_per_slot=4),
                                    horizon=GLYPH_HORIZON, episodes=n(GLYPH_EPISODES), seeds=(0, 1, 2)), {}),
        "glyph10": (ExperimentConfig(name="glyph10", algorithm="implicit",
                                     grid=GridSpec(kind="glyph_pair", n_classes_per_slot=10),
                                     horizon=GLYPH_HORIZON, episodes=n(GLYPH_EPISODES)), {}),
        "distractor": (ExperimentConfig(name="distractor", algorithm="distractor",
                                        grid=GridSpec(kind="distractor", width=9, height=9),
                                        horizon=9, episodes=n(32000)), {}),
        "finetune": (ExperimentConfig(name="finetune", algorithm="finetune",
                                      grid=GridSpec(kind="four_room", width=15, height=15),
                                      horizon=15, episodes=n(FINETUNE_EPISODES), alpha=30.0, goal=(3, 3),
                                      seeds=(0, 1, 2, 3, 4)),
                     {"pretrain_episodes": n(PRETRAIN_EPISODES), "threshold": 1.0, "window": 20}),
    }


FOURROOM_EPISODES = 320000
BLOCKS_EPISODES = 96000
GLYPH_HORIZON = 10
GLYPH_EPISODES = 32000
FINETUNE_EPISODES = 16000
PRETRAIN_EPISODES = 20000

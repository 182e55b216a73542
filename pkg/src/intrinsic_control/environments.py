"""Grid worlds used by the intrinsic-control experiments.

Every world shares one action set of five actions and a feature-plane
observation.  Sampling is vectorised over a batch of independent copies
(`BatchEnv`); the single-copy `Environment` is a batch of one.  Small
worlds can additionally export their exact one-step dynamics as a
`TransitionTensor`; that path is written separately from the sampler on
purpose, so the two can be checked against each other.

Coordinates are ``(x, y)`` with ``y`` growing downwards; 2-D arrays are
indexed ``[y, x]``.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

UP, DOWN, LEFT, RIGHT, STAY = range(5)
N_ACTIONS = 5
ACTION_NAMES = ("up", "down", "left", "right", "stay")
DELTAS = np.array([[0, -1], [0, 1], [-1, 0], [1, 0], [0, 0]], dtype=np.int64)
PUSH_DELTAS = DELTAS[:4]

# glyph world actions
NOOP, FIRST_UP, FIRST_DOWN, SECOND_UP, SECOND_DOWN = range(5)

KINDS = ("standard", "dangerous", "four_room", "blocks", "distractor", "glyph_pair")
DEFAULT_MAX_STATES = 20_000


class ConfigError(ValueError):
    """Invalid world or experiment configuration."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class CapacityError(RuntimeError):
    """A requested exact computation exceeds its configured size cap."""


@dataclass(frozen=True)
class GridSpec:
    kind: str = "standard"
    width: int = 5
    height: int = 5
    push_noise_prob: float = 0.0
    slip_prob: float = 0.5
    trap_escape_prob: float = 0.05
    n_blocks: int = 0
    n_distractors: int = 0
    n_classes_per_slot: int = 10
    seed: int = 0
    # dangerous world: corridor length (the square is width x height)
    corridor_length: int = 5
    # fixed start cell; None draws a uniformly random free cell on reset
    start: tuple[int, int] | None = None
    # glyph world bank
    glyph_size: int = 8
    glyph_instances: int = 50
    glyph_noise: float = 0.1
    idx_images: str | None = None
    idx_labels: str | None = None
    max_states: int = DEFAULT_MAX_STATES
    # blocks world: "random" redraws blocks every reset; "fixed" draws one
    # layout from `seed` and keeps it for every episode
    block_layout: str = "random"

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError("kind", f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.width < 2:
            raise ConfigError("width", "must be >= 2")
        if self.height < 2:
            raise ConfigError("height", "must be >= 2")
        for name in ("push_noise_prob", "slip_prob", "trap_escape_prob", "glyph_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(name, f"probability {p} outside [0, 1]")
        for name in ("n_blocks", "n_distractors"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.kind == "dangerous" and self.corridor_length < 1:
            raise ConfigError("corridor_length", "must be >= 1")
        if self.kind == "glyph_pair":
            if self.n_classes_per_slot < 2:
                raise ConfigError("n_classes_per_slot", "must be >= 2")
            if self.glyph_instances < 1:
                raise ConfigError("glyph_instances", "must be >= 1")
            if self.glyph_size < 2:
                raise ConfigError("glyph_size", "must be >= 2")
            if (self.idx_images is None) != (self.idx_labels is None):
                raise ConfigError("idx_labels", "idx_images and idx_labels go together")
        if self.max_states < 1:
            raise ConfigError("max_states", "must be >= 1")
        if self.block_layout not in ("random", "fixed"):
            raise ConfigError("block_layout", "expected 'random' or 'fixed'")

    def replace(self, **changes) -> "GridSpec":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# spec files

def _coerce(value: str, annotation: str):
    text = value.strip()
    if "tuple" in annotation:
        if text.lower() in ("", "none"):
            return None
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    if annotation.startswith("str"):
        return None if text.lower() == "none" and "None" in annotation else text
    if annotation.startswith("int"):
        return int(text, 0)
    if annotation.startswith("float"):
        return float(text)
    return text


def parse_key_values(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` text with ``#`` comments."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def grid_spec_from_mapping(values: dict[str, str]) -> GridSpec:
    types = {f.name: str(f.type) for f in dataclasses.fields(GridSpec)}
    kwargs = {}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(key, "unknown GridSpec field")
        try:
            kwargs[key] = _coerce(value, types[key])
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None
    spec = GridSpec(**kwargs)
    spec.validate()
    return spec


def load_grid_spec(path: str | Path) -> GridSpec:
    return grid_spec_from_mapping(parse_key_values(Path(path).read_text(encoding="utf-8")))


def dump_grid_spec(spec: GridSpec) -> str:
    lines = []
    for f in dataclasses.fields(spec):
        value = getattr(spec, f.name)
        if value is None:
            value = "none"
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# IDX image banks

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: str | Path) -> np.ndarray:
    """Read a big-endian IDX file (e.g. magic 0x00000803 for 3-D ubyte)."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    code, ndim = data[2], data[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX element type 0x{code:02x}")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[code])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(data) < offset + count * dtype.itemsize:
        raise ValueError(f"{path}: truncated IDX payload")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("=").str: k for k, v in _IDX_DTYPES.items()}
    key = array.dtype.newbyteorder("=").str
    if key not in codes:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    header = bytes([0, 0, codes[key], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    big = array.astype(np.dtype(_IDX_DTYPES[codes[key]]))
    Path(path).write_bytes(header + big.tobytes())


def procedural_glyphs(n_classes: int, n_instances: int, size: int, noise: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Random binary prototypes per class, instances are prototypes with bit flips."""
    protos = rng.random((n_classes, size, size)) < 0.5
    flips = rng.random((n_classes, n_instances, size, size)) < noise
    return (protos[:, None] ^ flips).astype(np.float64)


def glyph_bank_from_idx(images: np.ndarray, labels: np.ndarray, n_classes: int,
                        n_instances: int) -> np.ndarray:
    """Partition an image set by label into a (class, instance, h, w) bank scaled to [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError("expected square images of shape (n, s, s)")
    scale = images.max() if images.max() > 0 else 1.0
    bank = []
    for c in range(n_classes):
        members = np.flatnonzero(np.asarray(labels) == c)[:n_instances]
        if len(members) < n_instances:
            raise ValueError(f"class {c}: only {len(members)} images, need {n_instances}")
        bank.append(images[members] / scale)
    return np.stack(bank)


# ---------------------------------------------------------------------------
# layouts

@dataclass
class Layout:
    walls: np.ndarray                     # bool (H, W)
    trap: tuple[int, int] | None = None
    doors: list[tuple[int, int]] = field(default_factory=list)
    square: np.ndarray | None = None      # bool (H, W); dangerous cells
    square_origin: tuple[int, int] = (0, 0)

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    @property
    def free(self) -> np.ndarray:
        return ~self.walls

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.walls)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def ascii(self) -> str:
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                if self.walls[y, x]:
                    row.append("#")
                elif (x, y) == self.trap:
                    row.append("T")
                elif (x, y) in self.doors:
                    row.append("D")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows) + "\n"


def four_room_layout(width: int, height: int) -> Layout:
    """Outer wall ring plus a wall cross with one door per wall segment.

    Doors sit at the centre cell of each segment (lower middle for even
    lengths).
    """
    if width < 5 or height < 5:
        raise ConfigError("width", "four_room needs width, height >= 5")
    walls = np.zeros((height, width), dtype=bool)
    walls[0, :] = walls[-1, :] = True
    walls[:, 0] = walls[:, -1] = True
    cx, cy = width // 2, height // 2
    walls[:, cx] = True
    walls[cy, :] = True
    doors = [
        (cx, 1 + (cy - 1 - 1) // 2),
        (cx, cy + 1 + (height - 2 - (cy + 1)) // 2),
        (1 + (cx - 1 - 1) // 2, cy),
        (cx + 1 + (width - 2 - (cx + 1)) // 2, cy),
    ]
    for x, y in doors:
        walls[y, x] = False
    return Layout(walls=walls, doors=doors)


def dangerous_layout(square: int, square_h: int, corridor: int) -> Layout:
    """Corridor of `corridor` cells running left from the square's top-left cell.

    The trap is the far end of the corridor.
    """
    width = corridor + square
    walls = np.zeros((square_h, width), dtype=bool)
    walls[1:, :corridor] = True
    sq = np.zeros_like(walls)
    sq[:, corridor:] = True
    return Layout(walls=walls, trap=(0, 0), square=sq, square_origin=(corridor, 0))


def build_layout(spec: GridSpec) -> Layout:
    if spec.kind == "four_room":
        return four_room_layout(spec.width, spec.height)
    if spec.kind == "dangerous":
        return dangerous_layout(spec.width, spec.height, spec.corridor_length)
    if spec.kind == "distractor":
        # distractor worlds reuse the four-room geometry
        return four_room_layout(spec.width, spec.height)
    return Layout(walls=np.zeros((spec.height, spec.width), dtype=bool))


# ---------------------------------------------------------------------------
# states and observations

@dataclass(frozen=True)
class EnvState:
    agent_pos: tuple[int, int] = (0, 0)
    block_positions: tuple[tuple[int, int], ...] = ()
    distractor_positions: tuple[tuple[int, int], ...] = ()
    trapped: bool = False
    class_ids: tuple[int, int] = (0, 0)
    instance_ids: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class Observation:
    planes: np.ndarray
    shape: tuple[int, ...]

    def as_array(self) -> np.ndarray:
        return self.planes.reshape(self.shape)


@dataclass
class TransitionTensor:
    """Exact one-step dynamics p(s' | s, a).

    Stored sparse as an ``(n_states * n_actions, n_states)`` CSR matrix whose
    row ``s * n_actions + a`` is the successor distribution.
    """
    matrix: sparse.csr_matrix
    n_states: int
    n_actions: int
    keys: list
    cells: np.ndarray          # (n_states, 2) agent cell of each state; -1 if none
    grid_shape: tuple[int, int]

    def row(self, s: int, a: int) -> np.ndarray:
        return self.matrix[s * self.n_actions + a].toarray().ravel()

    def action_matrix(self, a: int) -> sparse.csr_matrix:
        return self.matrix[a::self.n_actions]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray().reshape(self.n_states, self.n_actions, self.n_states)

    def index(self, key) -> int:
        return self._lookup[key]

    def __post_init__(self):
        self._lookup = {k: i for i, k in enumerate(self.keys)}


# ---------------------------------------------------------------------------
# batched sampler

class BatchEnv:
    """`n` independent copies of one world, stepped together."""

    def __init__(self, spec: GridSpec, n: int = 1, rng: np.random.Generator | None = None,
                 bank: np.ndarray | None = None):
        spec.validate()
        self.spec = spec
        self.kind = spec.kind
        self.n = n
        self.layout = build_layout(spec)
        self.free = self.layout.free
        self.H, self.W = self.layout.height, self.layout.width
        self.rng = rng if rng is not None else np.random.default_rng(spec.seed)
        self._free_cells = np.array(self.layout.free_cells(), dtype=np.int64)
        n_free = len(self._free_cells)
        entities = 1 + spec.n_blocks + spec.n_distractors
        if self.kind in ("blocks", "distractor") and entities > n_free:
            field_name = "n_blocks" if self.kind == "blocks" else "n_distractors"
            raise ConfigError(field_name, f"{entities} entities do not fit in {n_free} free cells")
        if spec.start is not None and self.kind != "glyph_pair":
            x, y = spec.start
            if not (0 <= x < self.W and 0 <= y < self.H) or not self.free[y, x]:
                raise ConfigError("start", f"{spec.start} is not a free cell")
        self.n_blocks = spec.n_blocks if self.kind == "blocks" else 0
        self.n_distractors = spec.n_distractors if self.kind == "distractor" else 0
        self._fixed_blocks = None
        if self.n_blocks and spec.block_layout == "fixed":
            picks = np.random.default_rng(spec.seed).choice(n_free, size=self.n_blocks, replace=False)
            self._fixed_blocks = self._free_cells[np.sort(picks)]
            if spec.start is not None and any(np.array_equal(b, spec.start) for b in self._fixed_blocks):
                raise ConfigError("start", f"{spec.start} is covered by a block")
        if self.kind == "dangerous":
            sx, sy = self.layout.square_origin
            yy, xx = np.mgrid[0:self.H, 0:self.W]
            self._parity = ((xx - sx) + (yy - sy)) % 2
            self._trap = np.array(self.layout.trap, dtype=np.int64)
        if self.kind == "glyph_pair":
            self.bank = bank if bank is not None else make_glyph_bank(spec)
            self.n_classes = spec.n_classes_per_slot
        self.agent = np.zeros((n, 2), dtype=np.int64)
        self.blocks = np.zeros((n, self.n_blocks, 2), dtype=np.int64)
        self.distractors = np.zeros((n, self.n_distractors, 2), dtype=np.int64)
        self.trapped = np.zeros(n, dtype=bool)
        self.classes = np.zeros((n, 2), dtype=np.int64)
        self.instances = np.zeros((n, 2), dtype=np.int64)

    # -- observation layout -------------------------------------------------
    @property
    def plane_names(self) -> tuple[str, ...]:
        if self.kind == "glyph_pair":
            return ("image",)
        names = ["agent"]
        if self.kind == "blocks":
            names.append("blocks")
        if self.kind == "distractor":
            names.append("distractors")
        if self.kind == "dangerous":
            names.append("trapped")
        return tuple(names)

    @property
    def obs_shape(self) -> tuple[int, ...]:
        if self.kind == "glyph_pair":
            g = self.bank.shape[-1]
            return (g, 2 * g)
        return (len(self.plane_names), self.H, self.W)

    @property
    def obs_dim(self) -> int:
        return int(np.prod(self.obs_shape))

    n_actions = N_ACTIONS

    def observe(self) -> np.ndarray:
        n = self.n
        if self.kind == "glyph_pair":
            left = self.bank[self.classes[:, 0], self.instances[:, 0]]
            right = self.bank[self.classes[:, 1], self.instances[:, 1]]
            return np.concatenate([left, right], axis=2).reshape(n, -1)
        P = len(self.plane_names)
        obs = np.zeros((n, P, self.H, self.W))
        rows = np.arange(n)
        obs[rows, 0, self.agent[:, 1], self.agent[:, 0]] = 1.0
        p = 1
        if self.kind == "blocks":
            for k in range(self.n_blocks):
                obs[rows, p, self.blocks[:, k, 1], self.blocks[:, k, 0]] = 1.0
            p += 1
        if self.kind == "distractor":
            for k in range(self.n_distractors):
                obs[rows, p, self.distractors[:, k, 1], self.distractors[:, k, 0]] = 1.0
            p += 1
        if self.kind == "dangerous":
            t = self.trapped
            obs[rows[t], p, self._trap[1], self._trap[0]] = 1.0
        return obs.reshape(n, -1)

    # -- reset ----------------------------------------------------------------
    def reset(self, start: Sequence[int] | np.ndarray | None = None,
              states: Sequence[EnvState] | None = None) -> np.ndarray:
        """Reset all copies.  `start` overrides the spec's start cell;
        `states` sets every copy explicitly."""
        if states is not None:
            if len(states) != self.n:
                raise ValueError(f"expected {self.n} states, got {len(states)}")
            for i, st in enumerate(states):
                self.set_state(i, st)
            return self.observe()
        if self.kind == "glyph_pair":
            self.classes = self.rng.integers(0, self.n_classes, size=(self.n, 2))
            self.instances = self.rng.integers(0, self.bank.shape[1], size=(self.n, 2))
            if start is not None:
                self.classes[:] = np.asarray(start, dtype=np.int64)
            self.trapped[:] = False
            return self.observe()
        start = start if start is not None else self.spec.start
        n_free = len(self._free_cells)
        k = 1 + self.n_blocks
        if self._fixed_blocks is not None:
            open_cells = np.array([c for c in self._free_cells
                                   if not any(np.array_equal(c, b) for b in self._fixed_blocks)])
            for i in range(self.n):
                self.agent[i] = start if start is not None else open_cells[self.rng.integers(len(open_cells))]
                self.blocks[i] = self._fixed_blocks
            self.trapped[:] = False
            return self.observe()
        for i in range(self.n):
            picks = self.rng.choice(n_free, size=k, replace=False)
            cells = self._free_cells[picks]
            if start is not None:
                start_arr = np.asarray(start, dtype=np.int64)
                others = [c for c in self._free_cells[self.rng.permutation(n_free)]
                          if not np.array_equal(c, start_arr)][: k - 1]
                cells = np.vstack([start_arr[None], np.array(others, dtype=np.int64).reshape(-1, 2)])
            self.agent[i] = cells[0]
            self.blocks[i] = cells[1:1 + self.n_blocks]
            if self.kind == "distractor":
                # distractors may overlap the agent; draw them independently
                picks = self.rng.choice(n_free, size=self.n_distractors, replace=False)
                self.distractors[i] = self._free_cells[picks]
        self.trapped[:] = False
        return self.observe()

    def set_state(self, i: int, st: EnvState) -> None:
        self.agent[i] = st.agent_pos
        if self.n_blocks:
            self.blocks[i] = np.array(st.block_positions, dtype=np.int64).reshape(-1, 2)
        if self.n_distractors:
            self.distractors[i] = np.array(st.distractor_positions, dtype=np.int64).reshape(-1, 2)
        self.trapped[i] = st.trapped
        self.classes[i] = st.class_ids
        self.instances[i] = st.instance_ids

    def get_state(self, i: int) -> EnvState:
        return EnvState(
            agent_pos=(int(self.agent[i, 0]), int(self.agent[i, 1])),
            block_positions=tuple((int(x), int(y)) for x, y in self.blocks[i]),
            distractor_positions=tuple((int(x), int(y)) for x, y in self.distractors[i]),
            trapped=bool(self.trapped[i]),
            class_ids=(int(self.classes[i, 0]), int(self.classes[i, 1])),
            instance_ids=(int(self.instances[i, 0]), int(self.instances[i, 1])),
        )

    # -- dynamics -------------------------------------------------------------
    def _move(self, pos: np.ndarray, d: np.ndarray, mask: np.ndarray) -> None:
        """Move `pos` in place by `d` where `mask`, pushing blocks when present."""
        tgt = pos + d
        inb = (tgt[:, 0] >= 0) & (tgt[:, 0] < self.W) & (tgt[:, 1] >= 0) & (tgt[:, 1] < self.H)
        tx = np.clip(tgt[:, 0], 0, self.W - 1)
        ty = np.clip(tgt[:, 1], 0, self.H - 1)
        ok = mask & inb & self.free[ty, tx]
        if self.n_blocks:
            hit = np.all(self.blocks == tgt[:, None, :], axis=2)
            has_block = hit.any(axis=1)
            bdest = tgt + d
            binb = (bdest[:, 0] >= 0) & (bdest[:, 0] < self.W) & (bdest[:, 1] >= 0) & (bdest[:, 1] < self.H)
            bx = np.clip(bdest[:, 0], 0, self.W - 1)
            by = np.clip(bdest[:, 1], 0, self.H - 1)
            bfree = binb & self.free[by, bx] & ~np.any(np.all(self.blocks == bdest[:, None, :], axis=2), axis=1)
            ok = ok & (~has_block | bfree)
            push = ok & has_block
            if push.any():
                rows = np.flatnonzero(push)
                k = hit[rows].argmax(axis=1)
                self.blocks[rows, k] = bdest[rows]
        pos[ok] = tgt[ok]

    def step(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=np.int64).reshape(-1)
        if a.shape[0] != self.n:
            raise ValueError(f"expected {self.n} actions, got {a.shape[0]}")
        if np.any((a < 0) | (a >= N_ACTIONS)):
            raise ValueError(f"action index out of range [0, {N_ACTIONS})")
        if self.kind == "glyph_pair":
            self._step_glyph(a)
            return self.observe()
        all_rows = np.ones(self.n, dtype=bool)
        if self.kind == "dangerous":
            active = self._step_dangerous(a)
        else:
            self._move(self.agent, DELTAS[a], all_rows)
            active = all_rows
        p = self.spec.push_noise_prob
        if p > 0:
            u = self.rng.random(self.n)
            dirs = self.rng.integers(0, 4, size=self.n)
            self._move(self.agent, PUSH_DELTAS[dirs], active & (u < p))
        if self.n_distractors:
            dirs = self.rng.integers(0, 5, size=(self.n, self.n_distractors))
            for k in range(self.n_distractors):
                self._move_distractor(k, DELTAS[dirs[:, k]])
        return self.observe()

    def _move_distractor(self, k: int, d: np.ndarray) -> None:
        pos = self.distractors[:, k]
        tgt = pos + d
        inb = (tgt[:, 0] >= 0) & (tgt[:, 0] < self.W) & (tgt[:, 1] >= 0) & (tgt[:, 1] < self.H)
        tx = np.clip(tgt[:, 0], 0, self.W - 1)
        ty = np.clip(tgt[:, 1], 0, self.H - 1)
        ok = inb & self.free[ty, tx]
        for j in range(self.n_distractors):
            if j != k:
                ok &= ~np.all(self.distractors[:, j] == tgt, axis=1)
        self.distractors[ok, k] = tgt[ok]

    def _step_dangerous(self, a: np.ndarray) -> np.ndarray:
        """Advance the dangerous world; returns the rows eligible for push noise."""
        spec = self.spec
        u_escape = self.rng.random(self.n)
        u_slip = self.rng.random(self.n)
        was_trapped = self.trapped.copy()
        self.trapped[was_trapped & (u_escape < spec.trap_escape_prob)] = False
        free_agent = ~was_trapped
        x, y = self.agent[:, 0], self.agent[:, 1]
        in_square = self.layout.square[y, x] & free_agent
        parity = self._parity[y, x]
        horizontal = (a == LEFT) | (a == RIGHT)
        vertical = (a == UP) | (a == DOWN)
        valid = np.where(parity == 0, horizontal, vertical)
        fall = in_square & ~valid
        self.agent[fall] = self._trap
        self.trapped[fall] = True
        moves = (in_square & valid & (u_slip >= spec.slip_prob)) | (free_agent & ~in_square)
        self._move(self.agent, DELTAS[a], moves)
        return free_agent & ~fall

    def _step_glyph(self, a: np.ndarray) -> None:
        n = self.n_classes
        delta = np.zeros((self.n, 2), dtype=np.int64)
        delta[a == FIRST_UP, 0] = 1
        delta[a == FIRST_DOWN, 0] = -1
        delta[a == SECOND_UP, 1] = 1
        delta[a == SECOND_DOWN, 1] = -1
        self.classes = (self.classes + delta) % n
        self.instances = self.rng.integers(0, self.bank.shape[1], size=(self.n, 2))

    # -- bookkeeping ----------------------------------------------------------
    def agent_cells(self) -> np.ndarray:
        return self.agent.copy()


def make_glyph_bank(spec: GridSpec) -> np.ndarray:
    if spec.idx_images is not None:
        images = read_idx(spec.idx_images)
        labels = read_idx(spec.idx_labels)
        return glyph_bank_from_idx(images, labels, spec.n_classes_per_slot, spec.glyph_instances)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[1])
    return procedural_glyphs(spec.n_classes_per_slot, spec.glyph_instances, spec.glyph_size,
                             spec.glyph_noise, rng)


class Environment:
    """Single seeded copy of a world with the usual reset/step interface."""

    def __init__(self, spec: GridSpec):
        spec.validate()
        self.spec = spec
        self._batch = BatchEnv(spec, n=1, rng=np.random.default_rng(
            np.random.SeedSequence(spec.seed).spawn(2)[0]))
        self.layout = self._batch.layout
        self.n_actions = N_ACTIONS
        self.state: EnvState | None = None

    @property
    def obs_shape(self) -> tuple[int, ...]:
        return self._batch.obs_shape

    @property
    def rng(self) -> np.random.Generator:
        return self._batch.rng

    def _obs(self, flat: np.ndarray) -> Observation:
        return Observation(planes=flat[0].copy(), shape=self.obs_shape)

    def reset(self, start=None, state: EnvState | None = None) -> tuple[Observation, EnvState]:
        flat = self._batch.reset(start=start, states=None if state is None else [state])
        self.state = self._batch.get_state(0)
        return self._obs(flat), self.state

    def step(self, action: int) -> tuple[Observation, EnvState]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        if not 0 <= int(action) < N_ACTIONS:
            raise ValueError(f"action {action} out of range [0, {N_ACTIONS})")
        flat = self._batch.step([int(action)])
        self.state = self._batch.get_state(0)
        return self._obs(flat), self.state

    def batch(self, n: int, rng: np.random.Generator | None = None) -> BatchEnv:
        """A batched sampler for the same world (shares the glyph bank)."""
        bank = getattr(self._batch, "bank", None)
        return BatchEnv(self.spec, n=n, rng=rng, bank=bank)

    def layout_ascii(self) -> str:
        return self.layout.ascii()


def make_env(spec: GridSpec) -> Environment:
    return Environment(spec)


# ---------------------------------------------------------------------------
# exact dynamics

class _Exact:
    """Per-state successor distributions written directly from the rules."""

    def __init__(self, spec: GridSpec, layout: Layout):
        self.spec = spec
        self.layout = layout
        self.free = layout.free
        self.H, self.W = layout.height, layout.width

    def cell_ok(self, c) -> bool:
        x, y = c
        return 0 <= x < self.W and 0 <= y < self.H and bool(self.free[y, x])

    def move(self, agent, blocks, d):
        tgt = (agent[0] + d[0], agent[1] + d[1])
        if not self.cell_ok(tgt):
            return agent, blocks
        if tgt in blocks:
            dest = (tgt[0] + d[0], tgt[1] + d[1])
            if not self.cell_ok(dest) or dest in blocks:
                return agent, blocks
            blocks = tuple(sorted(dest if b == tgt else b for b in blocks))
        return tgt, blocks

    def agent_outcomes(self, key, a):
        """Distribution over (agent, blocks, trapped) ignoring distractors."""
        spec = self.spec
        agent, blocks, trapped = key
        out: dict = {}

        def add(k, p):
            if p > 0:
                out[k] = out.get(k, 0.0) + p

        if spec.kind == "dangerous":
            if trapped:
                add((agent, blocks, False), spec.trap_escape_prob)
                add((agent, blocks, True), 1 - spec.trap_escape_prob)
                return out
            base: list = []
            lay = self.layout
            x, y = agent
            if lay.square[y, x]:
                sx, sy = lay.square_origin
                parity = ((x - sx) + (y - sy)) % 2
                valid = a in ((LEFT, RIGHT) if parity == 0 else (UP, DOWN))
                if not valid:
                    add((lay.trap, blocks, True), 1.0)
                    return out
                moved = self.move(agent, blocks, DELTAS[a])
                base = [(moved, 1 - spec.slip_prob), ((agent, blocks), spec.slip_prob)]
            else:
                base = [(self.move(agent, blocks, DELTAS[a]), 1.0)]
        else:
            base = [(self.move(agent, blocks, DELTAS[a]), 1.0)]
        p = spec.push_noise_prob
        for (ag, bl), w in base:
            if w <= 0:
                continue
            add((ag, bl, False), w * (1 - p))
            if p > 0:
                for d in PUSH_DELTAS:
                    ag2, bl2 = self.move(ag, bl, d)
                    add((ag2, bl2, False), w * p / 4)
        return out

    def distractor_outcomes(self, positions):
        n = len(positions)
        out: dict = {}
        for dirs in itertools.product(range(5), repeat=n):
            cur = list(positions)
            for k, dk in enumerate(dirs):
                d = DELTAS[dk]
                tgt = (cur[k][0] + d[0], cur[k][1] + d[1])
                if self.cell_ok(tgt) and all(tgt != cur[j] for j in range(n) if j != k):
                    cur[k] = tgt
            t = tuple(cur)
            out[t] = out.get(t, 0.0) + 0.2 ** n
        return out


def _enumerate_keys(spec: GridSpec, layout: Layout):
    cells = layout.free_cells()
    n_free = len(cells)
    kind = spec.kind
    if kind == "glyph_pair":
        n = spec.n_classes_per_slot
        count = n * n
    elif kind == "blocks":
        nb = spec.n_blocks
        count = n_free * math.comb(n_free - 1, nb)
    elif kind == "distractor":
        nd = spec.n_distractors
        count = n_free * math.perm(n_free, nd)
    elif kind == "dangerous":
        count = n_free + 1
    else:
        count = n_free
    if count > spec.max_states:
        raise CapacityError(
            f"{kind} world has {count} states, above the cap of {spec.max_states}")
    if kind == "glyph_pair":
        n = spec.n_classes_per_slot
        return [(c1, c2) for c1 in range(n) for c2 in range(n)]
    if kind == "blocks":
        keys = []
        for agent in cells:
            rest = [c for c in cells if c != agent]
            for combo in itertools.combinations(rest, spec.n_blocks):
                keys.append((agent, tuple(sorted(combo)), ()))
        return keys
    if kind == "distractor":
        return [(agent, (), tuple(ds)) for agent in cells
                for ds in itertools.permutations(cells, spec.n_distractors)]
    keys = [(c, (), False) for c in cells]
    if kind == "dangerous":
        keys.append((layout.trap, (), True))
    return keys


def state_key(spec: GridSpec, st: EnvState):
    """Hashable tabular key of a state (the inverse of the model's `keys`)."""
    if spec.kind == "glyph_pair":
        return tuple(st.class_ids)
    if spec.kind == "blocks":
        return (st.agent_pos, tuple(sorted(st.block_positions)), ())
    if spec.kind == "distractor":
        return (st.agent_pos, (), tuple(st.distractor_positions))
    return (st.agent_pos, (), bool(st.trapped) if spec.kind == "dangerous" else False)


def key_to_state(spec: GridSpec, key) -> EnvState:
    if spec.kind == "glyph_pair":
        return EnvState(class_ids=tuple(key))
    agent, blocks, third = key
    if spec.kind == "distractor":
        return EnvState(agent_pos=agent, distractor_positions=third)
    return EnvState(agent_pos=agent, block_positions=blocks,
                    trapped=bool(third) if spec.kind == "dangerous" else False)


def tabular_model(env: Environment | GridSpec, max_states: int | None = None) -> TransitionTensor:
    """Exact single-step transition probabilities of a small world."""
    spec = env.spec if isinstance(env, Environment) else env
    spec.validate()
    if max_states is not None:
        spec = spec.replace(max_states=max_states)
    layout = build_layout(spec)
    keys = _enumerate_keys(spec, layout)
    index = {k: i for i, k in enumerate(keys)}
    S, A = len(keys), N_ACTIONS
    rows, cols, vals = [], [], []
    if spec.kind == "glyph_pair":
        n = spec.n_classes_per_slot
        shifts = {NOOP: (0, 0), FIRST_UP: (1, 0), FIRST_DOWN: (-1, 0),
                  SECOND_UP: (0, 1), SECOND_DOWN: (0, -1)}
        for s, (c1, c2) in enumerate(keys):
            for a in range(A):
                d1, d2 = shifts[a]
                rows.append(s * A + a)
                cols.append(index[((c1 + d1) % n, (c2 + d2) % n)])
                vals.append(1.0)
        cells = -np.ones((S, 2), dtype=np.int64)
    else:
        ex = _Exact(spec, layout)
        for s, key in enumerate(keys):
            agent, blocks, third = key
            trapped = third if spec.kind == "dangerous" else False
            dist_pos = third if spec.kind == "distractor" else ()
            dist_out = ex.distractor_outcomes(dist_pos) if dist_pos else {(): 1.0}
            for a in range(A):
                for (ag, bl, tr), pa in ex.agent_outcomes((agent, blocks, trapped), a).items():
                    for dpos, pd in dist_out.items():
                        if spec.kind == "distractor":
                            k2 = (ag, (), dpos)
                        elif spec.kind == "dangerous":
                            k2 = (ag, (), tr)
                        elif spec.kind == "blocks":
                            k2 = (ag, bl, ())
                        else:
                            k2 = (ag, (), False)
                        rows.append(s * A + a)
                        cols.append(index[k2])
                        vals.append(pa * pd)
        cells = np.array([k[0] for k in keys], dtype=np.int64)
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(S * A, S))
    mat.sum_duplicates()
    return TransitionTensor(matrix=mat, n_states=S, n_actions=A, keys=keys, cells=cells,
                            grid_shape=(layout.height, layout.width))


def reachable_set(model: TransitionTensor, s0: int, T: int) -> set[int]:
    """States with nonzero probability after exactly `T` steps under some policy."""
    if not 0 <= s0 < model.n_states:
        raise ValueError(f"state {s0} out of range [0, {model.n_states})")
    if T < 0:
        raise ValueError("T must be >= 0")
    succ = model.matrix.tocsr()
    A = model.n_actions
    frontier = {s0}
    for _ in range(T):
        nxt: set[int] = set()
        for s in frontier:
            start, stop = succ.indptr[s * A], succ.indptr[(s + 1) * A]
            data = succ.data[start:stop]
            nxt.update(int(c) for c, v in zip(succ.indices[start:stop], data) if v > 0)
        if nxt == frontier:
            break
        frontier = nxt
    return frontier


def bfs_distances(layout: Layout, start: tuple[int, int]) -> dict[tuple[int, int], int]:
    """Shortest path lengths on free cells (4-neighbourhood)."""
    dist = {start: 0}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        for dx, dy in PUSH_DELTAS:
            nb = (c[0] + int(dx), c[1] + int(dy))
            x, y = nb
            if 0 <= x < layout.width and 0 <= y < layout.height and layout.free[y, x] and nb not in dist:
                dist[nb] = dist[c] + 1
                queue.append(nb)
    return dist


def grid_values(model: TransitionTensor, values: np.ndarray) -> np.ndarray:
    """Scatter per-state values onto the grid (NaN on walls and unused cells).

    Only untrapped single-agent states are placed, so the dangerous world's
    trapped state does not overwrite the trap cell.
    """
    H, W = model.grid_shape
    grid = np.full((H, W), np.nan)
    for s, key in enumerate(model.keys):
        if model.cells[s, 0] < 0:
            continue
        if len(key) == 3 and key[2] is True:
            continue
        x, y = model.cells[s]
        grid[y, x] = values[s]
    return grid

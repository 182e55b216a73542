"""Small recurrent networks with hand-written reverse-mode gradients.

Only what the two policies need: a rectified linear embedding, an LSTM cell,
a softmax head, and the two fixed compositions of them (`ActorNetwork`,
`InferenceNetwork`).  Everything works on batches, ``x`` of shape
``(batch, features)``.

The LSTM follows the printed cell exactly: ``h = tanh(c)``.  The output gate
is still computed, and ``use_output_gate=True`` switches to the usual
``h = g_o * tanh(c)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"VICK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    """backward() called without a matching forward()."""


class ParameterBlock:
    """Named arrays with gradient accumulators and optimizer slots."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.slots: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.grads.values())))

    def copy(self) -> "ParameterBlock":
        out = ParameterBlock({k: v.copy() for k, v in self.params.items()})
        out.slots = {k: (m.copy(), v.copy()) for k, (m, v) in self.slots.items()}
        out.step_count = self.step_count
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters plus optimizer state, flattened for checkpointing."""
        out = {f"param/{k}": v for k, v in self.params.items()}
        for k, (m, v) in self.slots.items():
            out[f"adam_m/{k}"] = m
            out[f"adam_v/{k}"] = v
        out["step_count"] = np.array([float(self.step_count)])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            value = state[f"param/{k}"]
            if value.shape != self.params[k].shape:
                raise ShapeError(f"{k}: checkpoint shape {value.shape} != {self.params[k].shape}")
            self.params[k][...] = value
        self.slots = {}
        for k in self.params:
            if f"adam_m/{k}" in state:
                self.slots[k] = (state[f"adam_m/{k}"].copy(), state[f"adam_v/{k}"].copy())
        self.step_count = int(state["step_count"][0]) if "step_count" in state else 0
        self.zero_grad()


def uniform_init(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# optimisation

def optimize(block: ParameterBlock, lr: float, method: str = "adam", beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = 5.0) -> float:
    """Apply accumulated gradients (descent) and zero them.  Returns the
    pre-clipping gradient norm."""
    norm = block.grad_norm()
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    if method == "sgd":
        if lr != 0.0:
            for k, p in block.params.items():
                p -= lr * scale * block.grads[k]
    elif method == "adam":
        block.step_count += 1
        t = block.step_count
        for k, p in block.params.items():
            g = scale * block.grads[k]
            m, v = block.slots.get(k, (np.zeros_like(p), np.zeros_like(p)))
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            block.slots[k] = (m, v)
            if lr != 0.0:
                mhat = m / (1 - beta1 ** t)
                vhat = v / (1 - beta2 ** t)
                p -= lr * mhat / (np.sqrt(vhat) + eps)
    else:
        raise ValueError(f"unknown optimizer {method!r}")
    block.zero_grad()
    return norm


# ---------------------------------------------------------------------------
# primitives

def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot(index: np.ndarray, n: int) -> np.ndarray:
    index = np.asarray(index)
    out = np.zeros(index.shape + (n,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def _check(x: np.ndarray, W: np.ndarray, what: str) -> None:
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"{what}: input has {x.shape[-1]} features, weights expect {W.shape[1]}")


def embed(x: np.ndarray, block: ParameterBlock, prefix: str = "emb"):
    """Rectified affine map ``relu(W x + b)``; returns ``(u, cache)``."""
    W, b = block[f"{prefix}.W"], block[f"{prefix}.b"]
    _check(x, W, prefix)
    pre = x @ W.T + b
    return np.maximum(pre, 0.0), (x, pre)


def embed_backward(du: np.ndarray, cache, block: ParameterBlock, prefix: str = "emb",
                   need_input_grad: bool = False):
    x, pre = cache
    dpre = du * (pre > 0)
    block.grads[f"{prefix}.W"] += dpre.T @ x
    block.grads[f"{prefix}.b"] += dpre.sum(axis=0)
    return dpre @ block[f"{prefix}.W"] if need_input_grad else None


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LstmState":
        return cls(np.zeros((batch, hidden)), np.zeros((batch, hidden)))


def lstm_step(inp: np.ndarray, state: LstmState, block: ParameterBlock, prefix: str = "lstm",
              use_output_gate: bool = False):
    """One cell update on ``y = [h_prev, inp]``; returns ``(new_state, cache)``."""
    W, b = block[f"{prefix}.W"], block[f"{prefix}.b"]
    H = W.shape[0] // 4
    if state.h.shape[-1] != H or state.c.shape[-1] != H:
        raise ShapeError(f"{prefix}: state size {state.h.shape[-1]} != hidden size {H}")
    y = np.concatenate([state.h, inp], axis=-1)
    _check(y, W, prefix)
    z = y @ W.T + b
    gi = sigmoid(z[..., :H])
    gf = sigmoid(z[..., H:2 * H])
    go = sigmoid(z[..., 2 * H:3 * H])
    gu = np.tanh(z[..., 3 * H:])
    c = gf * state.c + gi * gu
    tc = np.tanh(c)
    h = go * tc if use_output_gate else tc
    return LstmState(h, c), (y, state.c, gi, gf, go, gu, tc, use_output_gate)


def lstm_backward(dh: np.ndarray, dc_next: np.ndarray, cache, block: ParameterBlock,
                  prefix: str = "lstm"):
    """Returns ``(dh_prev, dc_prev, d_inp)``."""
    y, c_prev, gi, gf, go, gu, tc, gated = cache
    W = block[f"{prefix}.W"]
    H = W.shape[0] // 4
    if gated:
        dgo = dh * tc
        dtc = dh * go
    else:
        dgo = np.zeros_like(dh)
        dtc = dh
    dc = dc_next + dtc * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * gu * gi * (1.0 - gi),
        dc * c_prev * gf * (1.0 - gf),
        dgo * go * (1.0 - go),
        dc * gi * (1.0 - gu * gu),
    ], axis=-1)
    block.grads[f"{prefix}.W"] += dz.T @ y
    block.grads[f"{prefix}.b"] += dz.sum(axis=0)
    dy = dz @ W
    return dy[..., :H], dc * gf, dy[..., H:]


def categorical_head(h: np.ndarray, block: ParameterBlock, prefix: str = "head"):
    """Returns ``(log_probs, probs)`` of ``softmax(W h + b)``."""
    W, b = block[f"{prefix}.W"], block[f"{prefix}.b"]
    _check(h, W, prefix)
    logp = log_softmax(h @ W.T + b)
    return logp, np.exp(logp)


def head_backward(dlogits: np.ndarray, h: np.ndarray, block: ParameterBlock, prefix: str = "head"):
    block.grads[f"{prefix}.W"] += dlogits.T @ h
    block.grads[f"{prefix}.b"] += dlogits.sum(axis=0)
    return dlogits @ block[f"{prefix}.W"]


def init_lstm(block: ParameterBlock, rng: np.random.Generator, prefix: str, n_in: int,
              hidden: int, forget_bias: float = 1.0) -> None:
    fan_in = hidden + n_in
    block.add(f"{prefix}.W", uniform_init(rng, 4 * hidden, fan_in))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    block.add(f"{prefix}.b", b)


def init_linear(block: ParameterBlock, rng: np.random.Generator, prefix: str, n_in: int,
                n_out: int) -> None:
    block.add(f"{prefix}.W", uniform_init(rng, n_out, n_in))
    block.add(f"{prefix}.b", np.zeros(n_out))


# ---------------------------------------------------------------------------
# the two policy networks

@dataclass
class NetConfig:
    obs_dim: int
    n_actions: int = 5
    embed_size: int = 64
    hidden_size: int = 128
    use_output_gate: bool = False


class ActorNetwork:
    """u_t = relu(W x_t);  h_t = LSTM([h_{t-1}, u_t, a_{t-1}]);  pi = softmax(W h_t).

    ``a_{-1}`` is the extra start token, index ``n_actions``.
    """

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = ParameterBlock()
        init_linear(self.params, rng, "emb", cfg.obs_dim, cfg.embed_size)
        init_lstm(self.params, rng, "lstm", cfg.embed_size + cfg.n_actions + 1, cfg.hidden_size)
        init_linear(self.params, rng, "head", cfg.hidden_size, cfg.n_actions)
        self._tape = None

    @property
    def start_token(self) -> int:
        return self.cfg.n_actions

    def initial_state(self, batch: int) -> LstmState:
        return LstmState.zeros(batch, self.cfg.hidden_size)

    def step(self, x: np.ndarray, a_prev: np.ndarray, state: LstmState):
        """Untaped single step for acting: ``(log_probs, probs, new_state, u)``."""
        u, _ = embed(x, self.params, "emb")
        inp = np.concatenate([u, one_hot(a_prev, self.cfg.n_actions + 1)], axis=-1)
        state, _ = lstm_step(inp, state, self.params, "lstm", self.cfg.use_output_gate)
        logp, probs = categorical_head(state.h, self.params, "head")
        return logp, probs, state, u

    def forward(self, obs: np.ndarray, actions: np.ndarray) -> dict:
        """Taped pass over ``obs[t]`` (t < T) and the taken ``actions`` (T, B)."""
        T, B = actions.shape
        if obs.shape[0] < T:
            raise ShapeError(f"need at least {T} observations, got {obs.shape[0]}")
        state = self.initial_state(B)
        a_prev = np.full(B, self.start_token)
        steps, logps, hs, us = [], [], [], []
        for t in range(T):
            u, ecache = embed(obs[t], self.params, "emb")
            inp = np.concatenate([u, one_hot(a_prev, self.cfg.n_actions + 1)], axis=-1)
            state, lcache = lstm_step(inp, state, self.params, "lstm", self.cfg.use_output_gate)
            logp, probs = categorical_head(state.h, self.params, "head")
            steps.append((ecache, lcache, state.h, probs))
            logps.append(logp)
            hs.append(state.h)
            us.append(u)
            a_prev = actions[t]
        self._tape = steps
        return {"logp": np.stack(logps), "h": np.stack(hs), "u": np.stack(us)}

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients from d loss / d logits, shape (T, B, A)."""
        if self._tape is None:
            raise TapeError("ActorNetwork.backward() without a forward()")
        steps, self._tape = self._tape, None
        E = self.cfg.embed_size
        H = self.cfg.hidden_size
        B = dlogits.shape[1]
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(len(steps))):
            ecache, lcache, h, _ = steps[t]
            dh = head_backward(dlogits[t], h, self.params, "head") + dh_next
            dh_next, dc_next, dinp = lstm_backward(dh, dc_next, lcache, self.params, "lstm")
            embed_backward(dinp[:, :E], ecache, self.params, "emb")


class InferenceNetwork:
    """v_t = relu(W [u_t, u_f]);  h_t = LSTM([h_{t-1}, hp_t, v_t, a_{t-1}]);  pi = softmax(W h_t).

    Owns its observation embedding ``u = relu(W x)``; the actor's hidden
    state ``hp_t`` enters as a constant input.
    """

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, actor_hidden: int | None = None):
        self.cfg = cfg
        self.actor_hidden = cfg.hidden_size if actor_hidden is None else actor_hidden
        self.params = ParameterBlock()
        init_linear(self.params, rng, "emb", cfg.obs_dim, cfg.embed_size)
        init_linear(self.params, rng, "pair", 2 * cfg.embed_size, cfg.embed_size)
        init_lstm(self.params, rng, "lstm",
                  self.actor_hidden + cfg.embed_size + cfg.n_actions + 1, cfg.hidden_size)
        init_linear(self.params, rng, "head", cfg.hidden_size, cfg.n_actions)
        self._tape = None

    def forward(self, obs: np.ndarray, actions: np.ndarray, actor_h: np.ndarray) -> dict:
        """``obs`` is (T+1, B, D) with ``obs[T]`` the final observation."""
        T, B = actions.shape
        if obs.shape[0] != T + 1:
            raise ShapeError(f"need {T + 1} observations, got {obs.shape[0]}")
        if actor_h.shape[:2] != (T, B) or actor_h.shape[2] != self.actor_hidden:
            raise ShapeError(f"actor hidden states have shape {actor_h.shape}")
        A = self.cfg.n_actions
        flat = obs.reshape((T + 1) * B, -1)
        u_all, ecache = embed(flat, self.params, "emb")
        u_all = u_all.reshape(T + 1, B, -1)
        u_f = u_all[T]
        state = LstmState.zeros(B, self.cfg.hidden_size)
        a_prev = np.full(B, A)
        steps, logps = [], []
        for t in range(T):
            pair_in = np.concatenate([u_all[t], u_f], axis=-1)
            v, pcache = embed(pair_in, self.params, "pair")
            inp = np.concatenate([actor_h[t], v, one_hot(a_prev, A + 1)], axis=-1)
            state, lcache = lstm_step(inp, state, self.params, "lstm", self.cfg.use_output_gate)
            logp, probs = categorical_head(state.h, self.params, "head")
            steps.append((pcache, lcache, state.h))
            logps.append(logp)
            a_prev = actions[t]
        self._tape = (steps, ecache, T, B)
        return {"logp": np.stack(logps)}

    def backward(self, dlogits: np.ndarray) -> None:
        if self._tape is None:
            raise TapeError("InferenceNetwork.backward() without a forward()")
        (steps, ecache, T, B), self._tape = self._tape, None
        E = self.cfg.embed_size
        H = self.cfg.hidden_size
        Hp = self.actor_hidden
        du_all = np.zeros((T + 1, B, E))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            pcache, lcache, h = steps[t]
            dh = head_backward(dlogits[t], h, self.params, "head") + dh_next
            dh_next, dc_next, dinp = lstm_backward(dh, dc_next, lcache, self.params, "lstm")
            dv = dinp[:, Hp:Hp + E]
            dpair = embed_backward(dv, pcache, self.params, "pair", need_input_grad=True)
            du_all[t] += dpair[:, :E]
            du_all[T] += dpair[:, E:]
        embed_backward(du_all.reshape((T + 1) * B, E), ecache, self.params, "emb")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Versioned little-endian container of named float64 arrays."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<IQ", CHECKPOINT_VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<Q", len(raw)) + raw
        out += struct.pack("<Q", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
        pos += 8 * size
    return out

"""Intrinsic control where the action sequence itself is the option.

A recurrent actor ``pi_p`` chooses actions from its observations.  A second
recurrent network ``pi_q`` sees the same trajectory plus the final
observation ``x_f`` and tries to predict each action.  The intrinsic return

    R_I = sum_t log pi_q(a_t | s^q_t) - log pi_p(a_t | s^p_t)

rewards the actor for trajectories whose actions can be recovered from
where they ended up.  Each training iteration does

* a full update: roll out ``pi_p``, REINFORCE it with ``R_I - b(x_0)``,
  regress the baseline and train ``pi_q`` on the actions taken;
* an exploratory update: roll out with epsilon-uniform action noise and
  train only ``pi_q`` on that experience.

All episodes have a fixed horizon and are run in batches on a `BatchEnv`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .environments import BatchEnv, GridSpec, state_key
from .neural import (ActorNetwork, InferenceNetwork, NetConfig, ParameterBlock, one_hot,
                     optimize)


# ---------------------------------------------------------------------------
# records

@dataclass
class EpisodeRecord:
    """One episode: ``obs`` holds x_0 .. x_f (T+1 rows), ``actions`` a_0 .. a_{T-1}."""

    obs: np.ndarray
    actions: np.ndarray
    logp_actor: np.ndarray
    logp_inference: np.ndarray | None = None
    exploratory: bool = False
    truncated: bool = False
    extrinsic: np.ndarray | None = None
    final_key: object = None


@dataclass
class EpisodeBatch:
    """``B`` episodes of equal horizon, time-major.

    ``obs`` is what the networks see (blanked between the ends for
    open-loop runs); ``raw_obs`` is what the environment emitted.
    """

    obs: np.ndarray             # (T+1, B, D)
    raw_obs: np.ndarray         # (T+1, B, D)
    actions: np.ndarray         # (T, B)
    logp_actor: np.ndarray      # (T, B)  log pi_p of the taken action
    cells: np.ndarray           # (T+1, B, 2) agent cell after each step
    exploratory: bool
    final_keys: list
    extrinsic: np.ndarray | None = None     # (T, B)
    logp_inference: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def size(self) -> int:
        return self.actions.shape[1]

    def record(self, i: int) -> EpisodeRecord:
        return EpisodeRecord(
            obs=self.raw_obs[:, i], actions=self.actions[:, i], logp_actor=self.logp_actor[:, i],
            logp_inference=None if self.logp_inference is None else self.logp_inference[:, i],
            exploratory=self.exploratory,
            extrinsic=None if self.extrinsic is None else self.extrinsic[:, i],
            final_key=self.final_keys[i])


def intrinsic_return(logp_inference: np.ndarray, logp_actor: np.ndarray,
                     reward_to_go: bool = False) -> np.ndarray:
    """``sum_t log pi_q - log pi_p`` over the leading time axis.

    With ``reward_to_go`` returns the per-step tails ``sum_{t' >= t}``
    instead, shape ``(T, ...)``.
    """
    r = np.asarray(logp_inference) - np.asarray(logp_actor)
    if reward_to_go:
        return np.flip(np.cumsum(np.flip(r, axis=0), axis=0), axis=0)
    return r.sum(axis=0)


def blank_middle(obs: np.ndarray) -> np.ndarray:
    """Zero the observations strictly between the first and the last."""
    out = obs.copy()
    out[1:-1] = 0.0
    return out


# ---------------------------------------------------------------------------
# agent

class ReturnBaseline:
    """Linear predictor of the return from the actor's first embedding ``u_0``."""

    def __init__(self, embed_size: int):
        self.params = ParameterBlock({"base.w": np.zeros(embed_size), "base.c": np.zeros(1)})

    def __call__(self, u0: np.ndarray) -> np.ndarray:
        return u0 @ self.params["base.w"] + self.params["base.c"][0]

    def accumulate(self, u0: np.ndarray, target: np.ndarray) -> float:
        """Add the gradient of the mean squared error (halved); returns the loss."""
        err = self(u0) - target
        self.params.grads["base.w"] += u0.T @ err / len(err)
        self.params.grads["base.c"] += err.mean()
        return float(0.5 * np.mean(err * err))


@dataclass
class ImplicitConfig:
    horizon: int = 6
    episodes: int = 20000
    batch_size: int = 16
    epsilon: float = 0.05
    lr: float = 1e-3
    baseline_lr: float = 1e-2
    optimizer: str = "adam"
    clip_norm: float = 5.0
    embed_size: int = 64
    hidden_size: int = 128
    use_output_gate: bool = False
    open_loop: bool = False
    reward_to_go: bool = False
    exploratory_update: bool = True
    # "intrinsic": R_I;  "combined": R_I + alpha * R_E;  "extrinsic": alpha * R_E only
    objective: str = "intrinsic"
    alpha: float = 0.0
    goal: tuple[int, int] | None = None

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if self.objective not in ("intrinsic", "combined", "extrinsic"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective != "intrinsic" and self.goal is None:
            raise ValueError("an extrinsic objective needs a goal cell")


class ImplicitAgent:
    """Actor, inference network and baseline, plus their optimizer state."""

    def __init__(self, obs_dim: int, n_actions: int, cfg: ImplicitConfig, rng: np.random.Generator):
        net = NetConfig(obs_dim=obs_dim, n_actions=n_actions, embed_size=cfg.embed_size,
                        hidden_size=cfg.hidden_size, use_output_gate=cfg.use_output_gate)
        self.cfg = cfg
        self.actor = ActorNetwork(net, rng)
        self.inference = InferenceNetwork(net, rng)
        self.baseline = ReturnBaseline(cfg.embed_size)

    def blocks(self) -> dict[str, ParameterBlock]:
        return {"actor": self.actor.params, "inference": self.inference.params,
                "baseline": self.baseline.params}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, block in self.blocks().items():
            for k, v in block.state_dict().items():
                out[f"{prefix}:{k}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, block in self.blocks().items():
            sub = {k.split(":", 1)[1]: v for k, v in state.items() if k.startswith(prefix + ":")}
            block.load_state_dict(sub)

    def baseline_values(self, first_obs: np.ndarray) -> np.ndarray:
        from .neural import embed
        u0, _ = embed(first_obs, self.actor.params, "emb")
        return self.baseline(u0)


# ---------------------------------------------------------------------------
# rollouts

def _final_keys(env: BatchEnv) -> list:
    return [state_key(env.spec, env.get_state(i)) for i in range(env.n)]


def run_episode(env: BatchEnv, actor: ActorNetwork, T: int, epsilon: float,
                rng: np.random.Generator, open_loop: bool = False,
                goal: tuple[int, int] | None = None, start=None) -> EpisodeBatch:
    """Roll out ``env.n`` episodes of ``T`` steps from fresh resets.

    With probability ``epsilon`` per step the sampled action is replaced by
    a uniform one; any ``epsilon > 0`` marks the batch exploratory.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    B, A = env.n, actor.cfg.n_actions
    x = env.reset(start=start)
    raw = [x]
    cells = [env.agent_cells()]
    actions, logps = [], []
    extrinsic = [] if goal is not None else None
    state = actor.initial_state(B)
    a_prev = np.full(B, actor.start_token)
    for t in range(T):
        seen = x if (t == 0 or not open_loop) else np.zeros_like(x)
        logp, probs, state, _ = actor.step(seen, a_prev, state)
        u = rng.random(B)
        a = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1).clip(max=A - 1)
        if epsilon > 0:
            explore = rng.random(B) < epsilon
            a = np.where(explore, rng.integers(A, size=B), a)
        x = env.step(a)
        raw.append(x)
        cells.append(env.agent_cells())
        actions.append(a)
        logps.append(logp[np.arange(B), a])
        if extrinsic is not None:
            extrinsic.append(np.all(cells[-1] == np.asarray(goal), axis=1).astype(float))
        a_prev = a
    raw_obs = np.stack(raw)
    obs = blank_middle(raw_obs) if open_loop else raw_obs
    return EpisodeBatch(obs=obs, raw_obs=raw_obs, actions=np.stack(actions), logp_actor=np.stack(logps),
                        cells=np.stack(cells), exploratory=epsilon > 0, final_keys=_final_keys(env),
                        extrinsic=None if extrinsic is None else np.stack(extrinsic))


def open_loop_variant(env: BatchEnv, actor: ActorNetwork, T: int, rng: np.random.Generator,
                      epsilon: float = 0.0, goal=None) -> EpisodeBatch:
    return run_episode(env, actor, T, epsilon, rng, open_loop=True, goal=goal)


# ---------------------------------------------------------------------------
# updates

def _taken(logp: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]


def inference_regression(agent: ImplicitAgent, batch: EpisodeBatch, actor_h: np.ndarray | None = None,
                         weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Accumulate the gradient of ``sum_t -log pi_q(a_t)`` (averaged over the
    batch).  Returns the per-step mean loss and the taken log-probs."""
    if actor_h is None:
        actor_h = agent.actor.forward(batch.obs[:-1], batch.actions)["h"]
        agent.actor._tape = None
    out = agent.inference.forward(batch.obs, batch.actions, actor_h)
    logq = out["logp"]
    A = logq.shape[-1]
    B = batch.size
    agent.inference.backward(-weight * (one_hot(batch.actions, A) - np.exp(logq)) / B)
    taken = _taken(logq, batch.actions)
    return float(-taken.mean()), taken


def reinforce_actor(agent: ImplicitAgent, batch: EpisodeBatch, returns: np.ndarray,
                    actor_out: dict) -> tuple[np.ndarray, float]:
    """Accumulate the REINFORCE gradient for the actor and the baseline's
    regression gradient.

    ``returns`` is ``(B,)`` for whole-episode returns or ``(T, B)`` for
    reward-to-go; the baseline ``b(x_0)`` is subtracted either way and is
    regressed toward the whole-episode return.
    """
    if batch.exploratory:
        raise ValueError("exploratory experience must not update the actor")
    u0 = actor_out["u"][0]
    b = agent.baseline(u0)
    adv = returns - b
    if adv.ndim == 1:
        adv = np.broadcast_to(adv, batch.actions.shape)
    A = actor_out["logp"].shape[-1]
    B = batch.size
    dlogits = -adv[..., None] * (one_hot(batch.actions, A) - np.exp(actor_out["logp"])) / B
    agent.actor.backward(dlogits)
    whole = returns if returns.ndim == 1 else returns[0]
    loss = agent.baseline.accumulate(u0, whole)
    return b, loss


@dataclass
class BatchStats:
    episodes: int
    mean_R_I: float
    exp_R_I: float
    baseline: float
    inference_loss: float
    extrinsic: float
    mean_return: float


class Trainer:
    """Owns the agent, the environments and the random streams of one run."""

    def __init__(self, spec: GridSpec, cfg: ImplicitConfig, seed: int = 0,
                 agent: ImplicitAgent | None = None):
        cfg.validate()
        self.spec = spec
        self.cfg = cfg
        ss = np.random.SeedSequence(seed)
        init_ss, env_ss, act_ss, explore_ss = ss.spawn(4)
        self.env = BatchEnv(spec, n=cfg.batch_size, rng=np.random.default_rng(env_ss))
        self.explore_env = BatchEnv(spec, n=cfg.batch_size, rng=np.random.default_rng(explore_ss.spawn(1)[0]),
                                    bank=getattr(self.env, "bank", None))
        self.act_rng = np.random.default_rng(act_ss)
        self.explore_rng = np.random.default_rng(explore_ss)
        self.agent = agent or ImplicitAgent(self.env.obs_dim, self.env.n_actions, cfg,
                                            np.random.default_rng(init_ss))
        self.episodes_done = 0

    def rng_state(self) -> dict:
        return {"env": self.env.rng.bit_generator.state,
                "explore_env": self.explore_env.rng.bit_generator.state,
                "act": self.act_rng.bit_generator.state,
                "explore": self.explore_rng.bit_generator.state,
                "episodes_done": self.episodes_done}

    def set_rng_state(self, state: dict) -> None:
        self.env.rng.bit_generator.state = state["env"]
        self.explore_env.rng.bit_generator.state = state["explore_env"]
        self.act_rng.bit_generator.state = state["act"]
        self.explore_rng.bit_generator.state = state["explore"]
        self.episodes_done = int(state["episodes_done"])

    def _returns(self, R_I: np.ndarray, batch: EpisodeBatch, per_step_I: np.ndarray | None):
        cfg = self.cfg
        ext = batch.extrinsic
        if cfg.reward_to_go:
            r_ext = 0.0 if ext is None else np.flip(np.cumsum(np.flip(ext, 0), 0), 0)
            intrinsic = per_step_I
        else:
            r_ext = 0.0 if ext is None else ext.sum(axis=0)
            intrinsic = R_I
        if cfg.objective == "intrinsic":
            return intrinsic + 0.0 * r_ext
        if cfg.objective == "combined":
            return intrinsic + cfg.alpha * r_ext
        return cfg.alpha * r_ext + 0.0 * intrinsic

    def train_batch(self) -> BatchStats:
        cfg, agent = self.cfg, self.agent
        batch = run_episode(self.env, agent.actor, cfg.horizon, 0.0, self.act_rng,
                            open_loop=cfg.open_loop, goal=cfg.goal)
        actor_out = agent.actor.forward(batch.obs[:-1], batch.actions)
        logp_actor = _taken(actor_out["logp"], batch.actions)
        # the intrinsic return uses pi_q before this batch's regression step
        q_out = agent.inference.forward(batch.obs, batch.actions, actor_out["h"])
        logp_q = _taken(q_out["logp"], batch.actions)
        R_I = intrinsic_return(logp_q, logp_actor)
        per_step = intrinsic_return(logp_q, logp_actor, reward_to_go=True) if cfg.reward_to_go else None
        returns = self._returns(R_I, batch, per_step)
        b, _ = reinforce_actor(agent, batch, returns, actor_out)

        q_loss = 0.0
        if cfg.objective != "extrinsic":
            A = q_out["logp"].shape[-1]
            agent.inference.backward(-(one_hot(batch.actions, A) - np.exp(q_out["logp"])) / batch.size)
            q_loss = float(-logp_q.mean())
            if cfg.exploratory_update and cfg.epsilon > 0:
                ebatch = run_episode(self.explore_env, agent.actor, cfg.horizon, cfg.epsilon,
                                     self.explore_rng, open_loop=cfg.open_loop)
                inference_regression(agent, ebatch)
        else:
            agent.inference._tape = None

        optimize(agent.actor.params, cfg.lr, cfg.optimizer, clip_norm=cfg.clip_norm)
        optimize(agent.inference.params, cfg.lr, cfg.optimizer, clip_norm=cfg.clip_norm)
        optimize(agent.baseline.params, cfg.baseline_lr, cfg.optimizer, clip_norm=cfg.clip_norm)
        self.episodes_done += batch.size
        ext = 0.0 if batch.extrinsic is None else float(batch.extrinsic.sum(axis=0).mean())
        whole = returns if returns.ndim == 1 else returns[0]
        return BatchStats(self.episodes_done, float(R_I.mean()), float(np.exp(R_I.mean())),
                          float(np.mean(b)), q_loss, ext, float(np.mean(whole)))

    def train(self, episodes: int | None = None, on_batch=None) -> list[BatchStats]:
        target = self.episodes_done + (self.cfg.episodes if episodes is None else episodes)
        history = []
        while self.episodes_done < target:
            stats = self.train_batch()
            history.append(stats)
            if on_batch is not None:
                on_batch(stats, self)
        return history

    def evaluate(self, n_batches: int = 8) -> dict:
        """Mean intrinsic return of the current actor, without training."""
        values = []
        for _ in range(n_batches):
            batch = run_episode(self.env, self.agent.actor, self.cfg.horizon, 0.0, self.act_rng,
                                open_loop=self.cfg.open_loop)
            values.append(score_batch(self.agent, batch))
        R = np.concatenate(values)
        return {"mean_R_I": float(R.mean()), "exp_R_I": float(np.exp(R.mean())),
                "stderr": float(R.std(ddof=1) / np.sqrt(len(R))) if len(R) > 1 else 0.0}


def score_batch(agent: ImplicitAgent, batch: EpisodeBatch) -> np.ndarray:
    """Intrinsic return of each episode under the current networks."""
    actor_out = agent.actor.forward(batch.obs[:-1], batch.actions)
    agent.actor._tape = None
    q_out = agent.inference.forward(batch.obs, batch.actions, actor_out["h"])
    agent.inference._tape = None
    batch.logp_inference = _taken(q_out["logp"], batch.actions)
    return intrinsic_return(batch.logp_inference, _taken(actor_out["logp"], batch.actions))


@dataclass
class EndpointDistribution:
    counts: dict = field(default_factory=dict)
    n: int = 0
    exp_entropy: float = float("nan")
    exp_mean_R_I: float = float("nan")
    error: str | None = None

    def probabilities(self) -> dict:
        return {k: v / self.n for k, v in self.counts.items()}

    def grid(self, shape: tuple[int, int]) -> np.ndarray:
        """Agent-cell histogram as an ``(H, W)`` probability grid."""
        out = np.zeros(shape)
        for key, c in self.counts.items():
            x, y = key[0]
            out[y, x] += c / self.n
        return out


def endpoint_distribution(spec: GridSpec, agent: ImplicitAgent, T: int, n: int,
                          rng: np.random.Generator, start=None, batch_size: int = 64,
                          open_loop: bool = False) -> EndpointDistribution:
    """Empirical distribution of final states over ``n`` rollouts of the actor."""
    if n <= 0:
        return EndpointDistribution(error="no samples requested")
    counts: dict = {}
    returns = []
    done = 0
    while done < n:
        m = min(batch_size, n - done)
        env = BatchEnv(spec, n=m, rng=rng, bank=None)
        batch = run_episode(env, agent.actor, T, 0.0, rng, open_loop=open_loop, start=start)
        returns.append(score_batch(agent, batch))
        for key in batch.final_keys:
            counts[key] = counts.get(key, 0) + 1
        done += m
    p = np.array(list(counts.values()), dtype=float) / n
    return EndpointDistribution(counts=counts, n=n, exp_entropy=float(np.exp(-(p * np.log(p)).sum())),
                                exp_mean_R_I=float(np.exp(np.concatenate(returns).mean())))

"""Intrinsic control with an explicit, finite option set.

Each episode samples an option ``w`` from the controllability prior
``p_C(w | s0)``, runs that option's epsilon-greedy policy until a geometric
termination, and then

* Q-learns the option policies toward the terminal reward
  ``r_I = log q(w | s0, s_f) - log p_C(w | s0)``,
* moves the inference model ``q`` toward the option actually taken,
* REINFORCEs the prior with advantage ``r_I - b(s0)`` and regresses the
  baseline ``b`` toward ``r_I``.

``b(s0)`` then tracks the expected intrinsic reward, which is the agent's
empowerment estimate at ``s0``.

States are featurised as one-hot tabular indices, so the "linear" Q,
inference and baseline models are tables.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .environments import Environment, TransitionTensor, key_to_state, state_key, tabular_model
from .neural import log_softmax

LOG_FLOOR = np.log(1e-30)


# ---------------------------------------------------------------------------
# world adapter

class TabularWorld:
    """An environment together with its exact model, for one-hot state features."""

    def __init__(self, env: Environment, model: TransitionTensor | None = None):
        self.env = env
        self.model = tabular_model(env) if model is None else model
        self.n_states = self.model.n_states
        self.n_actions = self.model.n_actions

    def index(self, state) -> int:
        return self.model.index(state_key(self.env.spec, state))

    def reset(self, start_index: int | None = None) -> int:
        if start_index is None:
            _, st = self.env.reset()
        else:
            _, st = self.env.reset(state=key_to_state(self.env.spec, self.model.keys[start_index]))
        return self.index(st)

    def step(self, action: int) -> int:
        _, st = self.env.step(action)
        return self.index(st)


# ---------------------------------------------------------------------------
# models

@dataclass
class OptionQFunction:
    """Action values ``Q[s, w, a]``: linear in one-hot state features,
    producing ``n_options * n_actions`` outputs per state."""

    n_states: int
    n_options: int
    n_actions: int
    weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_options < 2:
            raise ValueError("need at least 2 options")
        if self.weights is None:
            self.weights = np.zeros((self.n_states, self.n_options, self.n_actions))

    def values(self, s: int) -> np.ndarray:
        return self.weights[s]

    def act(self, s: int, option: int, epsilon: float, rng: np.random.Generator) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(self.n_actions))
        row = self.weights[s, option]
        best = np.flatnonzero(row == row.max())
        return int(best[0] if len(best) == 1 else rng.choice(best))

    def policy(self, option: int, epsilon: float) -> np.ndarray:
        """Action probabilities ``(n_states, n_actions)`` of the epsilon-greedy
        policy, splitting greedy mass evenly over ties."""
        q = self.weights[:, option, :]
        greedy = (q == q.max(axis=1, keepdims=True)).astype(float)
        greedy /= greedy.sum(axis=1, keepdims=True)
        return epsilon / self.n_actions + (1 - epsilon) * greedy


@dataclass
class OptionPrior:
    """Controllability distribution ``p_C(w | s0)``; uniform when frozen."""

    n_states: int
    n_options: int
    trainable: bool = False
    logits: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.logits is None:
            self.logits = np.zeros((self.n_states, self.n_options))

    def log_probs(self, s0: int) -> np.ndarray:
        if not self.trainable:
            return np.full(self.n_options, -np.log(self.n_options))
        return log_softmax(self.logits[s0])

    def probs(self, s0: int) -> np.ndarray:
        return np.exp(self.log_probs(s0))

    def sample(self, s0: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_options, p=self.probs(s0)))


@dataclass
class InferenceModel:
    """``q(w | s0, s_f) = softmax(W_f[s_f] + W_0[s0])``.

    With ``condition_on_start=False`` the start term is dropped and the model
    is ``q(w | s_f)``.
    """

    n_states: int
    n_options: int
    condition_on_start: bool = True
    final_weights: np.ndarray = field(default=None, repr=False)
    start_weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.final_weights is None:
            self.final_weights = np.zeros((self.n_states, self.n_options))
        if self.start_weights is None:
            self.start_weights = np.zeros((self.n_states, self.n_options))

    def logits(self, s0: int, sf: int) -> np.ndarray:
        out = self.final_weights[sf]
        if self.condition_on_start:
            out = out + self.start_weights[s0]
        return out

    def log_probs(self, s0: int, sf: int) -> np.ndarray:
        return log_softmax(self.logits(s0, sf))

    def probs(self, s0: int, sf: int) -> np.ndarray:
        return np.exp(self.log_probs(s0, sf))

    def table(self, s0: int) -> np.ndarray:
        """``q(w | s0, s_f)`` for every final state, shape ``(n_states, n_options)``."""
        z = self.final_weights + (self.start_weights[s0] if self.condition_on_start else 0.0)
        return np.exp(log_softmax(z))


@dataclass
class StateBaseline:
    """Tabular ``b(s0)``; doubles as the empowerment estimate."""

    n_states: int
    values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(self.n_states)

    def __call__(self, s0: int) -> float:
        return float(self.values[s0])


# ---------------------------------------------------------------------------
# operations

@dataclass
class OptionRollout:
    states: list[int]          # s_0 .. s_f
    actions: list[int]
    truncated: bool

    @property
    def start(self) -> int:
        return self.states[0]

    @property
    def final(self) -> int:
        return self.states[-1]

    def transitions(self):
        """``(s, a, s_next, terminal)`` tuples; the last one is terminal."""
        n = len(self.actions)
        return [(self.states[t], self.actions[t], self.states[t + 1], t == n - 1) for t in range(n)]


def max_option_steps(termination_prob: float) -> int:
    return int(np.ceil(10.0 / termination_prob))


def rollout_option(world: TabularWorld, Q: OptionQFunction, option: int, termination_prob: float,
                   epsilon: float, rng: np.random.Generator, start: int | None = None) -> OptionRollout:
    """Run one option until it terminates (probability ``termination_prob``
    after every step), or until the ``10 / termination_prob`` step cap."""
    if not 0.0 < termination_prob <= 1.0:
        raise ValueError("termination_prob must be in (0, 1]")
    s = world.reset(start)
    states, actions = [s], []
    cap = max_option_steps(termination_prob)
    while True:
        a = Q.act(s, option, epsilon, rng)
        s = world.step(a)
        actions.append(a)
        states.append(s)
        if rng.random() < termination_prob:
            return OptionRollout(states, actions, truncated=False)
        if len(actions) >= cap:
            return OptionRollout(states, actions, truncated=True)


class RewardClamp:
    """Counts how often ``q(w|.)`` underflowed and the reward was clamped."""

    def __init__(self):
        self.count = 0


def intrinsic_reward(q: InferenceModel, prior: OptionPrior, option: int, s0: int, sf: int,
                     clamp: RewardClamp | None = None) -> float:
    logq = q.log_probs(s0, sf)[option]
    if logq < LOG_FLOOR:
        logq = LOG_FLOOR
        if clamp is not None:
            clamp.count += 1
    return float(logq - prior.log_probs(s0)[option])


def all_option_rewards(q: InferenceModel, prior: OptionPrior, s0: int, sf: int) -> np.ndarray:
    return np.maximum(q.log_probs(s0, sf), LOG_FLOOR) - prior.log_probs(s0)


def q_learning_update(Q: OptionQFunction, rollout: OptionRollout, option: int, r_I: float,
                      lr: float, termination_prob: float, q: InferenceModel | None = None,
                      prior: OptionPrior | None = None, update_all_options: bool = False) -> None:
    """One-step backups along an option's trajectory.

    The active option uses the sampled target: ``r_I`` on the terminal
    transition, ``max_a Q(s', w, a)`` otherwise (the geometric termination
    itself supplies the ``1 - termination_prob`` discount).  With
    ``update_all_options`` every other option is backed up on the same
    triplets toward its expected target
    ``p * r_I(w', s') + (1 - p) * max_a Q(s', w', a)``.
    """
    W = Q.weights
    s0 = rollout.start
    p = termination_prob
    for s, a, s2, terminal in rollout.transitions():
        if update_all_options:
            rewards = all_option_rewards(q, prior, s0, s2)
            target = p * rewards + (1 - p) * W[s2].max(axis=1)
            active = W[s, option, a]
            W[s, :, a] += lr * (target - W[s, :, a])
            W[s, option, a] = active
        y = r_I if terminal else W[s2, option].max()
        W[s, option, a] += lr * (y - W[s, option, a])


def inference_update(q: InferenceModel, option: int, s0: int, sf: int, lr: float) -> float:
    """One gradient step on ``-log q(option | s0, sf)``; returns the loss before the step."""
    logp = q.log_probs(s0, sf)
    grad = np.exp(logp)
    grad[option] -= 1.0
    q.final_weights[sf] -= lr * grad
    if q.condition_on_start:
        q.start_weights[s0] -= lr * grad
    return float(-logp[option])


def prior_reinforce(prior: OptionPrior, baseline: StateBaseline, option: int, s0: int,
                    r_I: float, lr: float) -> bool:
    """REINFORCE step on the prior logits with advantage ``r_I - b(s0)``.
    Returns False (and does nothing) for a frozen prior."""
    if not prior.trainable:
        return False
    grad_logp = -prior.probs(s0)
    grad_logp[option] += 1.0
    prior.logits[s0] += lr * (r_I - baseline(s0)) * grad_logp
    return True


def baseline_update(baseline: StateBaseline, s0: int, r_I: float, lr: float) -> None:
    baseline.values[s0] += lr * (r_I - baseline.values[s0])


def empowerment_estimate(baseline: StateBaseline, s0: int) -> float:
    return baseline(s0)


def option_prediction_map(q: InferenceModel, model: TransitionTensor, s0: int = 0) -> np.ndarray:
    """``q(w | s0, s_f = cell)`` as an ``(n_options, H, W)`` grid (NaN off the map).

    Non-grid states, and cells shared by several tabular states, keep the
    first state listed for the cell.
    """
    H, W = model.grid_shape
    table = q.table(s0)
    out = np.full((q.n_options, H, W), np.nan)
    for s in range(model.n_states):
        x, y = model.cells[s]
        if x < 0 or not np.isnan(out[0, y, x]):
            continue
        out[:, y, x] = table[s]
    return out


# ---------------------------------------------------------------------------
# exact quantities for small worlds

def option_channel(model: TransitionTensor, Q: OptionQFunction, s0: int, termination_prob: float,
                   epsilon: float, max_steps: int | None = None) -> np.ndarray:
    """Exact ``p(s_f | s0, w)`` for every option, shape ``(n_options, n_states)``.

    Sums the geometric termination series up to ``max_steps`` (default the
    rollout cap) and assigns the remaining mass to the state at the cap,
    matching `rollout_option`'s truncation.
    """
    p = termination_prob
    steps = max_option_steps(p) if max_steps is None else max_steps
    S, A = model.n_states, model.n_actions
    mats = [model.action_matrix(a) for a in range(A)]
    out = np.zeros((Q.n_options, S))
    for w in range(Q.n_options):
        pi = Q.policy(w, epsilon)
        dist = np.zeros(S)
        dist[s0] = 1.0
        for t in range(1, steps + 1):
            dist = sum(mats[a].T @ (dist * pi[:, a]) for a in range(A))
            if t < steps:
                out[w] += p * dist
                dist = (1 - p) * dist
            else:
                out[w] += dist
    return out


def expected_prior_gradient(logits: np.ndarray, channel: np.ndarray, log_q: np.ndarray,
                            baseline: float | None = 0.0) -> np.ndarray:
    """Exact gradient of the variational bound with respect to softmax prior logits.

    ``channel[w, s]`` is ``p(s_f = s | w)`` and ``log_q[w, s]`` the inference
    log-probabilities.  The weight on ``grad log p_C(w)`` is
    ``E_{s_f}[log q] - log p_C(w) - b``; ``baseline=None`` uses the
    unbaselined form ``-1 - log p_C(w) + E_{s_f}[log q]`` that comes from
    differentiating the entropy term directly.  Every choice of constant
    gives the same vector.
    """
    logp = log_softmax(logits)
    p = np.exp(logp)
    safe_logq = np.where(channel > 0, log_q, 0.0)
    expected = (channel * safe_logq).sum(axis=1)
    weight = expected - logp - (1.0 if baseline is None else baseline)
    # grad log p_w wrt logits = e_w - p
    return (p * weight) - p * (p * weight).sum()


def bound_for_logits(logits: np.ndarray, channel: np.ndarray, log_q: np.ndarray) -> float:
    logp = log_softmax(logits)
    p = np.exp(logp)
    safe_logq = np.where(channel > 0, log_q, 0.0)
    return float(-(p * logp).sum() + (p[:, None] * channel * safe_logq).sum())


# ---------------------------------------------------------------------------
# training

@dataclass
class ExplicitConfig:
    n_options: int = 30
    termination_prob: float = 0.05
    episodes: int = 20000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    anneal_fraction: float = 0.5
    q_lr: float = 0.2
    inference_lr: float = 0.5
    prior_lr: float = 0.05
    baseline_lr: float = 0.05
    trainable_prior: bool = False
    condition_on_start: bool = True
    update_all_options: bool = True
    # episodes per alternation phase (policy, then inference); 0 trains both together
    phase_length: int = 500
    # "random": fresh uniform start each episode; "chain": start where the last option ended
    start_mode: str = "random"

    def validate(self) -> None:
        if self.n_options < 2:
            raise ValueError("n_options must be >= 2")
        if not 0.0 < self.termination_prob <= 1.0:
            raise ValueError("termination_prob must be in (0, 1]")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.start_mode not in ("random", "chain"):
            raise ValueError(f"unknown start_mode {self.start_mode!r}")
        if self.phase_length < 0:
            raise ValueError("phase_length must be >= 0")

    def epsilon(self, episode: int) -> float:
        span = self.anneal_fraction * self.episodes
        if span <= 0:
            return self.epsilon_end
        frac = min(1.0, episode / span)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass
class ExplicitAgent:
    Q: OptionQFunction
    prior: OptionPrior
    q: InferenceModel
    baseline: StateBaseline
    clamp: RewardClamp = field(default_factory=RewardClamp)

    @classmethod
    def create(cls, n_states: int, n_actions: int, cfg: ExplicitConfig) -> "ExplicitAgent":
        return cls(
            Q=OptionQFunction(n_states, cfg.n_options, n_actions),
            prior=OptionPrior(n_states, cfg.n_options, trainable=cfg.trainable_prior),
            q=InferenceModel(n_states, cfg.n_options, condition_on_start=cfg.condition_on_start),
            baseline=StateBaseline(n_states),
        )


@dataclass
class EpisodeLog:
    episode: int
    start: int
    option: int
    final: int
    r_I: float
    baseline: float
    correct: bool
    length: int
    truncated: bool


def train_explicit(world: TabularWorld, cfg: ExplicitConfig, rng: np.random.Generator,
                   agent: ExplicitAgent | None = None, on_episode=None) -> tuple[ExplicitAgent, list[EpisodeLog]]:
    """Run the explicit-option loop for ``cfg.episodes`` episodes."""
    cfg.validate()
    if agent is None:
        agent = ExplicitAgent.create(world.n_states, world.n_actions, cfg)
    logs: list[EpisodeLog] = []
    start = None
    for ep in range(cfg.episodes):
        eps = cfg.epsilon(ep)
        if cfg.phase_length:
            learn_policy = (ep // cfg.phase_length) % 2 == 0
            learn_inference = not learn_policy
        else:
            learn_policy = learn_inference = True
        s0 = world.reset(start)
        option = agent.prior.sample(s0, rng)
        ro = rollout_option(world, agent.Q, option, cfg.termination_prob, eps, rng, start=s0)
        sf = ro.final
        r = intrinsic_reward(agent.q, agent.prior, option, s0, sf, agent.clamp)
        correct = int(np.argmax(agent.q.logits(s0, sf))) == option
        if learn_policy:
            q_learning_update(agent.Q, ro, option, r, cfg.q_lr, cfg.termination_prob,
                              agent.q, agent.prior, cfg.update_all_options)
        if learn_inference:
            inference_update(agent.q, option, s0, sf, cfg.inference_lr)
        prior_reinforce(agent.prior, agent.baseline, option, s0, r, cfg.prior_lr)
        baseline_update(agent.baseline, s0, r, cfg.baseline_lr)
        log = EpisodeLog(ep, s0, option, sf, r, agent.baseline(s0), correct, len(ro.actions), ro.truncated)
        logs.append(log)
        if on_episode is not None:
            on_episode(log, agent)
        start = sf if cfg.start_mode == "chain" else None
    return agent, logs


def evaluate_explicit(world: TabularWorld, agent: ExplicitAgent, cfg: ExplicitConfig,
                      rng: np.random.Generator, episodes: int = 2000, epsilon: float = 0.0) -> dict:
    """Frozen-agent evaluation: mean intrinsic reward and inference accuracy."""
    rewards, correct = [], []
    for _ in range(episodes):
        s0 = world.reset(None)
        option = agent.prior.sample(s0, rng)
        ro = rollout_option(world, agent.Q, option, cfg.termination_prob, epsilon, rng, start=s0)
        rewards.append(intrinsic_reward(agent.q, agent.prior, option, s0, ro.final))
        correct.append(int(np.argmax(agent.q.logits(s0, ro.final))) == option)
    rewards = np.asarray(rewards)
    return {"mean_r_I": float(rewards.mean()),
            "stderr_r_I": float(rewards.std(ddof=1) / np.sqrt(len(rewards))) if len(rewards) > 1 else 0.0,
            "accuracy": float(np.mean(correct))}


def specialised_options(prediction_map: np.ndarray, threshold: float = 0.5) -> int:
    """Number of options that some cell predicts with probability above ``threshold``."""
    return int(np.sum(np.nanmax(prediction_map.reshape(len(prediction_map), -1), axis=1) > threshold))

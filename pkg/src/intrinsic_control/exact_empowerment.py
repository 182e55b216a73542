"""Exact information quantities on finite channels.

A channel is a row-stochastic matrix ``W[k, s] = p(s_f = s | option k)``.
Everything here is in nats and uses the convention ``0 log 0 = 0``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .environments import CapacityError, TransitionTensor, grid_values

ROW_TOL = 1e-10
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10_000
DEFAULT_MAX_ROWS = 5 ** 6


class DegenerateBoundWarning(RuntimeWarning):
    """The inference function puts zero mass where the joint is positive."""


@dataclass(frozen=True)
class Channel:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"channel must be 2-D, got shape {m.shape}")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("channel entries must be finite and non-negative")
        if np.any(np.abs(m.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError("channel rows must sum to 1")
        object.__setattr__(self, "matrix", m)

    @property
    def n_inputs(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_states(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class CapacityResult:
    capacity: float
    input_distribution: np.ndarray
    iterations: int
    gap_bound: float
    converged: bool


def _as_matrix(ch) -> np.ndarray:
    return ch.matrix if isinstance(ch, Channel) else Channel(ch).matrix


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast(x, y).shape)
    x, y = np.broadcast_arrays(x, y)
    mask = x > 0
    out[mask] = x[mask] * np.log(y[mask])
    return out


def _check_prior(pC, K: int) -> np.ndarray:
    p = np.asarray(pC, dtype=np.float64)
    if p.shape != (K,):
        raise ValueError(f"prior must have shape ({K},), got {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("prior must be a probability vector")
    return p


def mutual_information(pC, ch, form: str = "posterior") -> float:
    """I(option; final state).

    ``form="posterior"`` evaluates H(option) + E log p(option | s_f);
    ``form="marginal"`` evaluates H(s_f) - H(s_f | option).
    """
    W = _as_matrix(ch)
    p = _check_prior(pC, W.shape[0])
    joint = p[:, None] * W
    marg = joint.sum(axis=0)
    if form == "marginal":
        h_s = -_xlogy(marg, marg).sum()
        h_s_given = -(p * _xlogy(W, W).sum(axis=1)).sum()
        return float(h_s - h_s_given)
    if form != "posterior":
        raise ValueError(f"unknown form {form!r}")
    post = bayes_posterior(p, W)
    h_opt = -_xlogy(p, p).sum()
    used = marg > 0
    return float(h_opt + _xlogy(joint[:, used], post[:, used]).sum())


def bayes_posterior(pC, ch) -> np.ndarray:
    """p(option | s_f) as a (K, n_states) matrix; NaN columns where p(s_f) = 0."""
    W = _as_matrix(ch)
    p = _check_prior(pC, W.shape[0])
    joint = p[:, None] * W
    marg = joint.sum(axis=0)
    post = np.full_like(joint, np.nan)
    used = marg > 0
    post[:, used] = joint[:, used] / marg[used]
    return post


def variational_bound(pC, ch, q) -> float:
    """H(option) + sum p(option, s_f) log q(option | s_f).

    Returns ``-inf`` (and warns with `DegenerateBoundWarning`) when `q` is
    zero somewhere the joint is positive.
    """
    W = _as_matrix(ch)
    p = _check_prior(pC, W.shape[0])
    q = np.asarray(q, dtype=np.float64)
    if q.shape != W.shape:
        raise ValueError(f"q must have shape {W.shape}, got {q.shape}")
    joint = p[:, None] * W
    if np.any((joint > 0) & (q <= 0)):
        warnings.warn("q is zero where the joint is positive; bound is -inf",
                      DegenerateBoundWarning, stacklevel=2)
        return float("-inf")
    h_opt = -_xlogy(p, p).sum()
    return float(h_opt + _xlogy(joint, q).sum())


def expected_posterior_kl(pC, ch, q) -> float:
    """E_{s_f}[KL(p(. | s_f) || q(. | s_f))], the slack of the variational bound."""
    W = _as_matrix(ch)
    p = _check_prior(pC, W.shape[0])
    joint = p[:, None] * W
    marg = joint.sum(axis=0)
    post = bayes_posterior(p, W)
    used = marg > 0
    kl = _xlogy(post[:, used], post[:, used]) - _xlogy(post[:, used], np.asarray(q)[:, used])
    return float((marg[used] * kl.sum(axis=0)).sum())


# ---------------------------------------------------------------------------
# capacity

def _row_divergences(W: np.ndarray, logW: np.ndarray, p: np.ndarray) -> np.ndarray:
    """D(W_k || pW) for every row k."""
    out = p @ W
    with np.errstate(divide="ignore"):
        log_out = np.log(out)
    log_out[out <= 0] = 0.0
    return (W * (logW - log_out[None, :])).sum(axis=1)


def _bounds(W: np.ndarray, logW: np.ndarray, p: np.ndarray) -> tuple[float, float, np.ndarray]:
    D = _row_divergences(W, logW, p)
    shift = D.max()
    return float(np.log((p * np.exp(D - shift)).sum()) + shift), float(shift), D


def _mutual_info_rows(W: np.ndarray, logW: np.ndarray, p: np.ndarray) -> float:
    return float(p @ _row_divergences(W, logW, p))


def _newton_polish(W: np.ndarray, logW: np.ndarray, p: np.ndarray, tol: float,
                   rounds: int = 30, steps: int = 40) -> np.ndarray:
    """Active-set Newton ascent of I(p) on the simplex.

    Plain iteration crawls when the optimal input set is a flat face; the
    optimal output distribution is still unique, so any point of that face
    closes the bound gap.
    """
    p = p.copy()
    for _ in range(rounds):
        support = p > 1e-12
        for _ in range(steps):
            idx = np.flatnonzero(support)
            q = p @ W
            used = q > 0
            D = _row_divergences(W, logW, p)
            Ws = W[idx][:, used]
            H = -(Ws / q[used]) @ Ws.T
            n = len(idx)
            kkt = np.zeros((n + 1, n + 1))
            kkt[:n, :n] = H
            kkt[:n, n] = kkt[n, :n] = 1.0
            rhs = np.concatenate([-(D[idx] - 1.0), [0.0]])
            dp = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n]
            base = _mutual_info_rows(W, logW, p)
            # projected step first (drops inputs the step sends negative),
            # then the step clipped to stay inside the simplex
            neg = dp < 0
            t_in = float(np.min(-p[idx][neg] / dp[neg])) if neg.any() else 1.0
            improved = False
            for t in (1.0, 0.5, 0.25, min(1.0, t_in)):
                cand = p.copy()
                cand[idx] = np.maximum(p[idx] + t * dp, 0.0)
                cand /= cand.sum()
                if _mutual_info_rows(W, logW, cand) > base:
                    improved = True
                    break
            if not improved:
                break
            p = cand
            support = p > 1e-12
            lower, upper, _ = _bounds(W, logW, p)
            if upper - lower < tol or np.max(np.abs(t * dp)) < 1e-15:
                break
        lower, upper, D = _bounds(W, logW, p)
        if upper - lower < tol:
            return p
        outside = np.where(p > 1e-12, -np.inf, D)
        k = int(np.argmax(outside))
        if outside[k] <= lower:
            return p
        p[k] = 1e-6
        p /= p.sum()
    return p


def blahut_arimoto(ch, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                   merge_duplicates: bool = True, polish_every: int = 200) -> CapacityResult:
    """Channel capacity by Blahut-Arimoto iteration with certified stopping.

    At any input distribution ``p`` with row divergences ``D_k`` the
    capacity lies in ``[log sum_k p_k exp(D_k), max_k D_k]``; iteration
    stops once that gap is below `tol`.  The reported capacity is the lower
    end, so it never falls below the mutual information of the returned
    input distribution.  Every `polish_every` iterations a Newton step on
    the current support is tried (0 disables it); it only ever replaces the
    iterate when it tightens the lower bound.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    W_full = _as_matrix(ch)
    K_full = W_full.shape[0]
    W_full = W_full[:, W_full.sum(axis=0) > 0]
    if merge_duplicates:
        # identical rows are interchangeable; solve on the distinct ones
        _, first, inverse, counts = np.unique(np.round(W_full, 13), axis=0, return_index=True,
                                              return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        W = W_full[first]
    else:
        W = W_full
        inverse = np.arange(K_full)
        counts = np.ones(K_full, dtype=np.int64)
    K = W.shape[0]
    logW = np.where(W > 0, np.log(np.where(W > 0, W, 1.0)), 0.0)
    p = np.full(K, 1.0 / K)
    lower = upper = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lower, upper, D = _bounds(W, logW, p)
        if upper - lower < tol:
            converged = True
            break
        if polish_every and it % polish_every == 0:
            cand = _newton_polish(W, logW, p, tol)
            c_lower, c_upper, _ = _bounds(W, logW, cand)
            if c_lower >= lower:
                p = cand
                if c_upper - c_lower < tol:
                    lower, upper = c_lower, c_upper
                    converged = True
                    break
                continue
        w = p * np.exp(D - upper)
        p = w / w.sum()
    full_p = p[inverse] / counts[inverse]
    if not converged:
        warnings.warn(f"Blahut-Arimoto did not converge in {max_iter} iterations "
                      f"(gap {upper - lower:.3g} nats)", RuntimeWarning, stacklevel=2)
    return CapacityResult(capacity=max(lower, 0.0), input_distribution=full_p, iterations=it,
                          gap_bound=upper - lower, converged=converged)


# ---------------------------------------------------------------------------
# open-loop channels from a world model

def compose_open_loop_channel(model: TransitionTensor, s0: int, T: int,
                              max_rows: int = DEFAULT_MAX_ROWS) -> Channel:
    """Distribution of the state after each length-`T` action sequence from `s0`.

    Row ``sum_t a_t * A**(T-1-t)`` holds the sequence ``(a_0, ..., a_{T-1})``.
    """
    A, S = model.n_actions, model.n_states
    if T < 1:
        raise ValueError("T must be >= 1")
    if A ** T > max_rows:
        raise CapacityError(f"{A}^{T} = {A ** T} action sequences exceed the cap of {max_rows}; "
                            f"use a smaller T")
    if not 0 <= s0 < S:
        raise ValueError(f"state {s0} out of range")
    stacked = model.matrix.tocsr()
    # (S, A*S): column block a holds p(. | s, a)
    P_all = sparse.hstack([stacked[a::A] for a in range(A)], format="csr")
    dist = np.zeros((1, S))
    dist[0, s0] = 1.0
    for _ in range(T):
        dist = np.asarray((P_all.T @ dist.T).T).reshape(-1, S)
    # guard tiny drift from repeated products
    dist /= dist.sum(axis=1, keepdims=True)
    return Channel(dist)


def empowerment_map(model: TransitionTensor, T: int, states=None, tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER,
                    max_rows: int = DEFAULT_MAX_ROWS) -> np.ndarray:
    """Open-loop empowerment (capacity in nats) of every state, or of `states`.

    States not listed are NaN.
    """
    out = np.full(model.n_states, np.nan)
    todo = range(model.n_states) if states is None else states
    for s in todo:
        ch = compose_open_loop_channel(model, s, T, max_rows=max_rows)
        out[s] = blahut_arimoto(ch, tol=tol, max_iter=max_iter).capacity
    return out


# ---------------------------------------------------------------------------
# file formats

def write_channel(path: str | Path, ch) -> None:
    W = _as_matrix(ch)
    lines = [f"{W.shape[0]} {W.shape[1]}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in W]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_channel(path: str | Path) -> Channel:
    rows = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    K, S = int(rows[0][0]), int(rows[0][1])
    W = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    if W.shape != (K, S):
        raise ValueError(f"channel file declares {K}x{S} but holds {W.shape}")
    return Channel(W)


def grid_to_csv(grid: np.ndarray) -> str:
    """Row = y, column = x; NaN (walls) become blank fields."""
    lines = []
    for row in grid:
        lines.append(",".join("" if np.isnan(v) else f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def write_empowerment_csv(path: str | Path, model: TransitionTensor, values: np.ndarray) -> np.ndarray:
    grid = grid_values(model, values)
    Path(path).write_text(grid_to_csv(grid), encoding="utf-8")
    return grid

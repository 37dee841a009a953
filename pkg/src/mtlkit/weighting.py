"""Combining per-task losses and gradients into one update.

Three strategies are provided: fixed weights (``equal``), learned
homoscedastic-uncertainty weights (``uw``) and Nash bargaining over task
gradients (``nash``). The Nash weights ``alpha`` solve

    (G G^T) alpha = 1 / alpha,   alpha > 0

the first-order condition for the update ``d`` maximizing
``sum_k log(g_k . d)`` over a norm ball, with ``d = sum_k alpha_k g_k``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, ContractViolation, SolverFailure

log = logging.getLogger(__name__)

TASKS = ("surface", "depth", "seg")
DEGENERATE_NORM = 1e-12
RIDGE = 1e-10


def total_loss(losses, weights) -> gc.Tensor:
    """Weighted sum of task losses with constant weights."""
    weights = [float(w) for w in weights]
    if len(weights) != len(losses):
        raise ContractViolation(f"{len(losses)} losses but {len(weights)} weights")
    if any(not w > 0 or not np.isfinite(w) for w in weights):
        raise ContractViolation(f"weights must be positive and finite: {weights}")
    out = gc.scale(losses[0], weights[0])
    for loss, w in zip(losses[1:], weights[1:]):
        out = gc.add(out, gc.scale(loss, w))
    return out


@dataclass
class UWState:
    """Names of the per-task log-variance parameters inside a ParamStore."""

    names: list[str]

    @classmethod
    def register(cls, store: gc.ParamStore, k: int = 3, prefix: str = "uw.s") -> "UWState":
        names = [f"{prefix}{i}" for i in range(k)]
        for name in names:
            store.add(name, np.zeros(()), group="uw")
        return cls(names)

    def values(self, store) -> np.ndarray:
        return np.array([float(store[n]) for n in self.names])

    def effective_weights(self, store) -> np.ndarray:
        return np.exp(-self.values(store))


def uw_total(losses, state: UWState, tape: gc.Tape) -> gc.Tensor:
    """``sum_k exp(-s_k) * L_k + s_k / 2`` with ``s`` read from the tape's store."""
    if len(losses) != len(state.names):
        raise ContractViolation(f"{len(losses)} losses but {len(state.names)} uncertainty terms")
    out = None
    for loss, name in zip(losses, state.names):
        s = tape.param(name)
        term = gc.add(gc.mul(gc.exp(gc.scale(s, -1.0)), loss), gc.scale(s, 0.5))
        out = term if out is None else gc.add(out, term)
    return out


@dataclass
class NashSolution:
    alpha: np.ndarray
    iterations: int
    residual: float
    ridged: bool = False
    excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _newton(a: np.ndarray, tol: float, max_iter: int):
    """Damped Newton in ``beta = log(alpha)`` starting from ``beta = 0``.

    The system is first normalized by the gradient norms: with
    ``a = S C S`` (``S`` the diagonal of norms), ``a @ alpha = 1/alpha`` holds
    exactly when ``C @ (S alpha) = 1/(S alpha)``. Newton runs on the
    normalized system and convergence is judged on the original residual
    ``S * (C @ x - 1/x)``.
    """
    k = a.shape[0]
    s = np.sqrt(np.diag(a))
    c = a / np.outer(s, s)
    beta = np.zeros(k)

    def resid(b):
        with np.errstate(over="ignore", invalid="ignore"):
            return c @ np.exp(b) - np.exp(-b)

    f = resid(beta)
    fn = np.linalg.norm(f)
    for it in range(1, max_iter + 1):
        r = float(np.max(np.abs(s * f)))
        if r <= tol:
            return np.exp(beta) / s, it - 1, r
        e = np.exp(beta)
        jac = c * e[None, :] + np.diag(1.0 / e)
        step = np.linalg.solve(jac, -f)
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            fc = resid(cand)
            fcn = np.linalg.norm(fc)
            if np.isfinite(fcn) and fcn < fn:
                break
            t *= 0.5
        else:
            # no decrease possible; accept only if we sit at round-off level
            if fn <= 64 * np.finfo(float).eps * k * (1.0 + np.max(np.abs(c @ e))):
                return e / s, it - 1, r
            raise SolverFailure(f"nash: line search stalled at residual {r:.3e}", r, it)
        beta, f, fn = cand, fc, fcn
    r = float(np.max(np.abs(s * f)))
    if r <= tol:
        return np.exp(beta) / s, max_iter, r
    raise SolverFailure(f"nash: no convergence in {max_iter} iterations (residual {r:.3e})", r, max_iter)


def nash_solve(gram, tol: float = 1e-10, max_iter: int = 100, ridge: bool = False) -> NashSolution:
    """Positive solution of ``gram @ alpha = 1 / alpha`` by damped Newton.

    Works in ``beta = log(alpha)`` so positivity never has to be enforced.
    Tasks whose gradient norm is below 1e-12 are dropped (alpha 0) and the
    reduced system is solved. With ``ridge`` the diagonal is shifted by
    ``1e-10 * trace / K`` first.
    """
    gram = np.asarray(gram, dtype=float)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ContractViolation(f"gram must be square, got {gram.shape}")
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    if not np.allclose(gram, gram.T, rtol=0, atol=1e-12 * max(1.0, np.abs(gram).max())):
        raise ContractViolation("gram must be symmetric")
    k = gram.shape[0]
    excluded = np.sqrt(np.clip(np.diag(gram), 0, None)) < DEGENERATE_NORM
    keep = ~excluded
    alpha = np.zeros(k)
    if not keep.any():
        return NashSolution(alpha, 0, 0.0, ridge, excluded)
    a = gram[np.ix_(keep, keep)]
    if ridge:
        a = a + np.eye(len(a)) * RIDGE * np.trace(a) / len(a)
        log.info("nash: ridge %.3e added to gram diagonal", RIDGE * np.trace(a) / len(a))
    sub, iters, res = _newton(a, tol, max_iter)
    alpha[keep] = sub
    return NashSolution(alpha, iters, res, ridge, excluded)


def nash_solve_with_fallback(gram, tol=1e-10, max_iter=100) -> NashSolution:
    try:
        return nash_solve(gram, tol, max_iter)
    except SolverFailure as exc:
        log.warning("nash: %s; retrying with ridge", exc)
        return nash_solve(gram, tol, max_iter, ridge=True)


def combine(grads, alpha) -> np.ndarray:
    """Update direction ``sum_k alpha_k g_k``."""
    grads = np.asarray(grads, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if grads.ndim != 2 or alpha.shape != (grads.shape[0],):
        raise ContractViolation(f"combine: grads {grads.shape} vs alpha {alpha.shape}")
    return alpha @ grads


class Weighter:
    """Per-step contract used by the training loop.

    ``direction`` receives the tape with the per-task losses already
    recorded and returns the full-parameter update direction together with a
    snapshot of the current task weights.
    """

    kind = ""

    def register(self, store: gc.ParamStore) -> None:
        pass

    def direction(self, tape, losses, shared_index):
        raise NotImplementedError


class EqualWeighter(Weighter):
    kind = "equal"

    def __init__(self, weights=(1.0, 1.0, 1.0)):
        self.weights = np.asarray(weights, dtype=float)

    def direction(self, tape, losses, shared_index):
        root = total_loss(losses, self.weights)
        return gc.backward(tape, root), self.weights.copy()


class UncertaintyWeighter(Weighter):
    kind = "uw"

    def __init__(self, k: int = 3):
        self.k = k
        self.state: UWState | None = None

    def register(self, store):
        self.state = UWState.register(store, self.k)

    def direction(self, tape, losses, shared_index):
        if self.state is None:
            raise ContractViolation("uncertainty weighter used before register()")
        root = uw_total(losses, self.state, tape)
        return gc.backward(tape, root), self.state.effective_weights(tape.store)


class NashWeighter(Weighter):
    kind = "nash"

    def __init__(self, tol: float = 1e-10, max_iter: int = 100):
        self.tol = tol
        self.max_iter = max_iter
        self.last: NashSolution | None = None

    def direction(self, tape, losses, shared_index):
        rows = np.stack([gc.backward(tape, loss) for loss in losses])
        g = rows[:, shared_index]
        self.last = nash_solve_with_fallback(g @ g.T, self.tol, self.max_iter)
        # heads only see their own loss, so alpha @ rows equals the gradient
        # of sum_k alpha_k L_k with alpha held constant
        return combine(rows, self.last.alpha), self.last.alpha.copy()


def make_weighter(kind: str, **config) -> Weighter:
    if kind == "equal":
        return EqualWeighter(config.get("weights", (1.0, 1.0, 1.0)))
    if kind == "uw":
        return UncertaintyWeighter(config.get("k", 3))
    if kind == "nash":
        return NashWeighter(config.get("tol", 1e-10), config.get("max_iter", 100))
    raise ConfigError(f"unknown weighter {kind!r}; expected equal, uw or nash")

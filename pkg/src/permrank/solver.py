"""Disentangle position bias from passage utility by constrained least squares.

Model: the observed score of permutation i is approximated by
``sum_j a_j * u[perm_i[j]]`` where the position weights ``a`` lie on the
probability simplex. For pruned permutations the weights renormalize over
the occupied prefix so every equation stays a convex combination of
utilities.

The fit alternates two convex subproblems: a ridge-regularized linear
least-squares step for ``u`` and a simplex-constrained least-squares step
for ``a`` (an exact equality-constrained solve when it lands inside the
box, projected gradient with backtracking otherwise). The recorded loss
is ``SSE + ridge * ||u||^2`` and is non-increasing by construction.
Random restarts guard against the non-convexity of the joint problem.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Optional, Sequence

import numpy as np

from .core import stable_seed
from .permute import PermutationDesign

_DEGENERATE_SPREAD = 1e-12
_DENOM_FLOOR = 1e-12
# Residual differences below 1e-9 of the score energy are numerical noise:
# restarts within that band count as tied, and the earlier restart wins.
_TIE_REL = 1e-9


class InitScheme(str, Enum):
    LINEAR_DECAY = "linear_decay"
    UNIFORM = "uniform"
    RANDOM_SIMPLEX = "random_simplex"


@dataclass(frozen=True)
class BiasProfile:
    """Per-position weights on the probability simplex."""

    a: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(x) for x in self.a)
        object.__setattr__(self, "a", vals)
        if not vals:
            raise ValueError("bias profile must be non-empty")
        if any(v < -1e-9 or v > 1 + 1e-9 for v in vals):
            raise ValueError(f"bias entries must lie in [0, 1], got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"bias entries must sum to 1, got {sum(vals)!r}")

    def __len__(self) -> int:
        return len(self.a)


@dataclass(frozen=True)
class UtilityVector:
    """Debiased per-passage utilities, indexed by retriever rank."""

    u: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(x) for x in self.u)
        object.__setattr__(self, "u", vals)
        if not all(np.isfinite(vals)):
            raise ValueError("utilities must be finite")

    def __len__(self) -> int:
        return len(self.u)

    def argsort_descending(self) -> tuple[int, ...]:
        """1-based retriever ranks ordered by utility descending, ties by rank."""
        order = sorted(range(len(self.u)), key=lambda i: (-self.u[i], i))
        return tuple(i + 1 for i in order)


@dataclass(frozen=True)
class DisentangledModel:
    bias: BiasProfile
    utility: UtilityVector
    residual_sse: float
    iterations: int
    restarts_used: int
    converged: bool
    underdetermined: bool
    degenerate: bool = False

    def __post_init__(self):
        if len(self.bias) != len(self.utility):
            raise ValueError("bias and utility lengths differ")
        if self.residual_sse < 0:
            raise ValueError("residual_sse must be nonnegative")


@dataclass(frozen=True)
class SolverConfig:
    restarts: int = 8
    max_iterations: int = 500
    tolerance: float = 1e-10
    ridge: float = 1e-8
    seed: int = 0
    init: InitScheme = InitScheme.LINEAR_DECAY

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


def project_simplex(v: Sequence[float]) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("expected a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot project non-finite values")
    u = np.sort(arr)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, arr.size + 1)
    cond = u + (1.0 - css) / ks > 0
    rho = np.nonzero(cond)[0][-1]
    theta = (1.0 - css[rho]) / (rho + 1.0)
    return np.maximum(arr + theta, 0.0)


class _Equations:
    """Padded array view of a design for vectorized fitting."""

    def __init__(self, design: PermutationDesign):
        self.n = design.n_passages
        self.m = len(design.permutations)
        lengths = [len(p) for p in design.permutations]
        self.lmax = max(lengths) if lengths else 0
        self.full = all(length == self.n for length in lengths)
        # idx[i, j]: 0-based passage index at position j of equation i (pad 0)
        self.idx = np.zeros((self.m, self.lmax), dtype=int)
        self.mask = np.zeros((self.m, self.lmax), dtype=float)
        for i, perm in enumerate(design.permutations):
            k = len(perm.indices)
            self.idx[i, :k] = np.asarray(perm.indices) - 1
            self.mask[i, :k] = 1.0
        self.rows = np.arange(self.m)
        # flat (row, col) pairs of occupied cells; distinct within a row, so
        # plain fancy assignment builds the design matrix without add.at
        occupied = self.mask.reshape(-1) > 0
        self._flat_rows = np.repeat(self.rows, self.lmax)[occupied]
        self._flat_cols = self.idx.reshape(-1)[occupied]
        self._occupied = occupied

    def weights(self, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-equation position weights (renormalized over the prefix)."""
        a_pos = a[: self.lmax][None, :] * self.mask
        denom = np.maximum(a_pos.sum(axis=1), _DENOM_FLOOR)
        return a_pos / denom[:, None], denom

    def predict(self, a: np.ndarray, u: np.ndarray) -> np.ndarray:
        w, _ = self.weights(a)
        return (w * u[self.idx]).sum(axis=1)

    def sse(self, a: np.ndarray, u: np.ndarray, s: np.ndarray) -> float:
        r = self.predict(a, u) - s
        return float(r @ r)

    def design_matrix(self, a: np.ndarray) -> np.ndarray:
        """M x N matrix X with X @ u = predictions, for fixed a."""
        w, _ = self.weights(a)
        x = np.zeros((self.m, self.n))
        x[self._flat_rows, self._flat_cols] = w.reshape(-1)[self._occupied]
        return x

    def solve_u(self, a: np.ndarray, s: np.ndarray, ridge: float) -> np.ndarray:
        x = self.design_matrix(a)
        gram = x.T @ x + ridge * np.eye(self.n)
        rhs = x.T @ s
        try:
            return np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(gram, rhs, rcond=None)[0]

    def grad_a(self, a: np.ndarray, u: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Gradient of the SSE with respect to a (handles renormalization)."""
        a_pos = a[: self.lmax][None, :] * self.mask
        denom = np.maximum(a_pos.sum(axis=1), _DENOM_FLOOR)
        u_sel = u[self.idx] * self.mask
        num = (a_pos * u_sel).sum(axis=1)
        pred = num / denom
        r = pred - s
        # d pred_i / d a_j = (u_ij * D_i - num_i) / D_i^2 on occupied positions
        g_pos = (u_sel * denom[:, None] - num[:, None]) / (denom**2)[:, None] * self.mask
        grad = np.zeros(self.n)
        grad[: self.lmax] = 2.0 * (r[:, None] * g_pos).sum(axis=0)
        return grad


def _solve_free_kkt(y: np.ndarray, s: np.ndarray, free: np.ndarray) -> tuple[np.ndarray, float]:
    """Equality-constrained LS over the free coordinates (others fixed at 0).

    Solves min ||Y a - s||^2 s.t. sum(a_free) = 1 via the KKT system;
    returns the free coordinates and the multiplier of the sum constraint.
    """
    yf = y[:, free]
    k = len(free)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2.0 * (yf.T @ yf)
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.concatenate([2.0 * (yf.T @ s), [1.0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:k], float(sol[k])


def _active_set_a_step(eq: _Equations, u: np.ndarray, s: np.ndarray) -> Optional[np.ndarray]:
    """Exact simplex-constrained LS for a on full-length designs.

    Lawson-Hanson-style active set: solve the equality-constrained
    problem on the free coordinates, clamp the most negative coordinate
    to zero while infeasible, and release clamped coordinates whose KKT
    multiplier turns negative. Returns None for pruned designs (the
    renormalized objective is not linear in a) or if the loop fails to
    settle; callers then fall back to projected gradient.
    """
    if not eq.full:
        return None
    y = u[eq.idx]
    n = eq.n
    clamped: set[int] = set()
    for _ in range(3 * n + 2):
        free = np.array([j for j in range(n) if j not in clamped], dtype=int)
        if free.size == 0:
            return None
        af, mu = _solve_free_kkt(y, s, free)
        if af.min() < -1e-12:
            clamped.add(int(free[int(np.argmin(af))]))
            continue
        a = np.zeros(n)
        a[free] = np.clip(af, 0.0, None)
        if not clamped:
            return a / max(a.sum(), _DENOM_FLOOR)
        grad = 2.0 * (y.T @ (y @ a - s))
        lagrange = grad + mu  # nonnegative at a KKT point for clamped coords
        worst = min(clamped, key=lambda j: lagrange[j])
        if lagrange[worst] >= -1e-10:
            return a / max(a.sum(), _DENOM_FLOOR)
        clamped.remove(worst)
    return None


def _pg_a_step(
    eq: _Equations,
    a: np.ndarray,
    u: np.ndarray,
    s: np.ndarray,
    max_inner: int = 30,
) -> tuple[np.ndarray, float]:
    """Projected-gradient descent on a; never increases the SSE."""
    cur = eq.sse(a, u, s)
    t = 1.0
    for _ in range(max_inner):
        grad = eq.grad_a(a, u, s)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-14:
            break
        improved = False
        step = t
        while step > 1e-18:
            cand = project_simplex(a - step * grad)
            cand_sse = eq.sse(cand, u, s)
            if cand_sse < cur:
                a, cur = cand, cand_sse
                t = step * 2.0
                improved = True
                break
            step /= 2.0
        if not improved:
            break
    return a, cur


def _init_a(n: int, scheme: InitScheme, rng: Optional[np.random.Generator]) -> np.ndarray:
    if scheme is InitScheme.LINEAR_DECAY:
        raw = np.arange(n, 0, -1, dtype=float)
        return raw / raw.sum()
    if scheme is InitScheme.UNIFORM:
        return np.full(n, 1.0 / n)
    if rng is None:
        raise ValueError("random simplex init needs an RNG")
    return rng.dirichlet(np.ones(n))


def _count_underdetermined(design: PermutationDesign) -> bool:
    distinct = len({p.indices for p in design.permutations})
    return distinct < 2 * design.n_passages - 1


def _write_trace(trace: Optional[IO[str]], restart: int, iteration: int, loss: float, a: np.ndarray) -> None:
    if trace is None:
        return
    trace.write(
        json.dumps(
            {"restart": restart, "iteration": iteration, "loss": loss, "a": [round(float(x), 12) for x in a]}
        )
        + "\n"
    )


def fit(
    design: PermutationDesign,
    scores: Sequence[float],
    config: SolverConfig = SolverConfig(),
    trace: Optional[IO[str]] = None,
) -> DisentangledModel:
    """Fit bias and utilities to observed permutation scores.

    Returns the best restart by residual SSE (ties keep the earlier
    restart). Constant score vectors carry no ordering signal: any
    simplex ``a`` fits them exactly, so the fit short-circuits to a
    constant utility vector flagged degenerate.
    """
    s = np.asarray(list(scores), dtype=float)
    if len(s) != len(design.permutations):
        raise ValueError(
            f"scores length {len(s)} != design length {len(design.permutations)}"
        )
    if design.n_passages < 1:
        raise ValueError("design has no passages")
    if len(s) == 0:
        raise ValueError("cannot fit an empty design")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")

    n = design.n_passages
    underdetermined = _count_underdetermined(design)

    spread = float(s.max() - s.min())
    if n > 1 and spread < _DEGENERATE_SPREAD:
        center = float(s.mean())
        a0 = _init_a(n, config.init if config.init is not InitScheme.RANDOM_SIMPLEX else InitScheme.LINEAR_DECAY, None)
        resid = float(((s - center) ** 2).sum())
        return DisentangledModel(
            bias=BiasProfile(tuple(a0)),
            utility=UtilityVector((center,) * n),
            residual_sse=resid,
            iterations=0,
            restarts_used=0,
            converged=True,
            underdetermined=underdetermined,
            degenerate=True,
        )

    eq = _Equations(design)
    tie_tol = _TIE_REL * max(1.0, float(s @ s))
    best: Optional[tuple[float, np.ndarray, np.ndarray, int, bool]] = None
    restarts_used = 0

    for restart in range(config.restarts):
        restarts_used += 1
        if restart == 0 and config.init is not InitScheme.RANDOM_SIMPLEX:
            a = _init_a(n, config.init, None)
        else:
            rng = np.random.default_rng(stable_seed("solver", config.seed, restart))
            a = _init_a(n, InitScheme.RANDOM_SIMPLEX, rng)

        u = eq.solve_u(a, s, config.ridge)
        prev_loss = eq.sse(a, u, s) + config.ridge * float(u @ u)
        converged = False
        iterations = 0
        for it in range(1, config.max_iterations + 1):
            iterations = it
            u = eq.solve_u(a, s, config.ridge)
            ridge_term = config.ridge * float(u @ u)
            exact = _active_set_a_step(eq, u, s)
            if exact is not None and eq.sse(exact, u, s) <= eq.sse(a, u, s):
                a = exact
                cur_sse = eq.sse(a, u, s)
            else:
                a, cur_sse = _pg_a_step(eq, a, u, s)
            loss = cur_sse + ridge_term
            _write_trace(trace, restart, it, loss, a)
            if prev_loss - loss < config.tolerance:
                converged = True
                break
            prev_loss = loss

        final_sse = eq.sse(a, u, s)
        # A strictly better restart must clear the tie band; otherwise the
        # earlier restart (deterministic init first) keeps the win.
        if best is None or final_sse < best[0] - tie_tol:
            best = (final_sse, a.copy(), u.copy(), iterations, converged)
        if best[0] < tie_tol:
            break  # nothing can beat this under the tie rule

    assert best is not None
    final_sse, a, u, iterations, converged = best
    a = np.clip(a, 0.0, 1.0)
    a = a / max(a.sum(), _DENOM_FLOOR)
    return DisentangledModel(
        bias=BiasProfile(tuple(a)),
        utility=UtilityVector(tuple(u)),
        residual_sse=final_sse,
        iterations=iterations,
        restarts_used=restarts_used,
        converged=converged,
        underdetermined=underdetermined,
        degenerate=False,
    )


def predict(model: DisentangledModel, design: PermutationDesign) -> list[float]:
    """Forward scores of the design under a fitted model."""
    if len(model.utility) != design.n_passages:
        raise ValueError(
            f"model dimension {len(model.utility)} != design n_passages {design.n_passages}"
        )
    eq = _Equations(design)
    a = np.asarray(model.bias.a)
    u = np.asarray(model.utility.u)
    return [float(v) for v in eq.predict(a, u)]


def _simplex_grid(n: int, steps: int):
    """All points with coordinates k/steps summing to 1 (compositions).

    Enumerated with leading coordinates descending, so primacy-heavy
    profiles come first: exact-fit ties then resolve toward the
    decreasing-bias branch, mirroring the fit's deterministic init.
    """

    def rec(prefix: list[int], remaining: int, slots: int):
        if slots == 1:
            yield prefix + [remaining]
            return
        for v in range(remaining, -1, -1):
            yield from rec(prefix + [v], remaining - v, slots - 1)

    for comp in rec([], steps, n):
        yield np.asarray(comp, dtype=float) / steps


def brute_force_fit(
    design: PermutationDesign,
    scores: Sequence[float],
    grid_step: float = 0.05,
) -> DisentangledModel:
    """Independent grid-search oracle for :func:`fit` verification.

    Enumerates ``a`` over a simplex grid and solves the utility
    subproblem in closed form (plain least squares) for each grid point;
    returns the first grid point achieving the minimal residual.
    Exponential in N, hence the N <= 5 limit.
    """
    n = design.n_passages
    if n > 5:
        raise ValueError("N too large for grid search (max 5)")
    steps = round(1.0 / grid_step)
    if abs(steps * grid_step - 1.0) > 1e-9 or steps < 1:
        raise ValueError(f"grid_step must divide 1, got {grid_step}")
    s = np.asarray(list(scores), dtype=float)
    if len(s) != len(design.permutations):
        raise ValueError("scores length != design length")

    eq = _Equations(design)
    best_res = np.inf
    best_a: Optional[np.ndarray] = None
    best_u: Optional[np.ndarray] = None
    evaluated = 0
    for a in _simplex_grid(n, steps):
        a_pos = a[: eq.lmax][None, :] * eq.mask
        if np.any(a_pos.sum(axis=1) < _DENOM_FLOOR):
            continue  # prefix mass zero: prediction undefined for pruned rows
        evaluated += 1
        x = eq.design_matrix(a)
        u, *_ = np.linalg.lstsq(x, s, rcond=None)
        r = x @ u - s
        res = float(r @ r)
        if res < best_res - 1e-15:
            best_res, best_a, best_u = res, a, u
    if best_a is None:
        raise ValueError("no feasible grid point for this design")
    return DisentangledModel(
        bias=BiasProfile(tuple(best_a)),
        utility=UtilityVector(tuple(best_u)),
        residual_sse=max(best_res, 0.0),
        iterations=evaluated,
        restarts_used=1,
        converged=True,
        underdetermined=_count_underdetermined(design),
        degenerate=False,
    )

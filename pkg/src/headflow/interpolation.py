"""Head interpolation from sparse pressure readings.

Estimates the full head vector by minimizing a Laplacian smoothness
objective plus a slack penalty tied to edge orientation, anchored exactly
at the sensed nodes. A second pass replaces the unit edge weights with
physics-derived ones computed from a baseline head estimate, which is how
the estimators obtain their initial guess.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import HW_EXPONENT, NetworkGraph, build_incidence

AW_TAU_EXPONENT = -0.54
AW_DROP_EXPONENT = 1.0 - 1.0 / HW_EXPONENT  # 0.46004...


class InfeasibleAnchorsError(ValueError):
    """Duplicate sensed-node rows carry conflicting head values."""


class QpConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (KKT residual {residual:.3e})")


@dataclass
class GsiConfig:
    zeta: float = 1.0          # slack penalty weight
    tol: float = 1e-9          # KKT residual tolerance
    max_iter: int = 500        # active-set iterations
    gamma_min: float = 1e-9    # lower bound keeping the slack positive
    weight_floor: float = 1e-6  # minimum physics-derived edge weight

    def __post_init__(self):
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")


@dataclass
class GsiSolution:
    h: np.ndarray
    gamma: float
    objective: float
    kkt_residual: float
    iterations: int


def solve_convex_qp(H, g, A, b, y0, tol=1e-9, max_iter=500):
    """Primal active-set method for min 0.5 y'Hy + g'y s.t. A y <= b.

    H must be positive definite and y0 strictly feasible. Returns
    (y, lambdas, iterations) with lambdas of length len(b), zero on
    inactive rows.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    y = np.asarray(y0, dtype=float).copy()
    n = y.shape[0]
    m = b.shape[0]
    if np.any(A @ y - b > 1e-9):
        raise QpConvergenceError("infeasible starting point", float(np.max(A @ y - b)))

    active: list[int] = []
    lambdas = np.zeros(m)
    step_tol = 1e-12

    for it in range(1, max_iter + 1):
        grad = H @ y + g
        na = len(active)
        if na:
            Aw = A[active]
            KKT = np.zeros((n + na, n + na))
            KKT[:n, :n] = H
            KKT[:n, n:] = Aw.T
            KKT[n:, :n] = Aw
            rhs = np.concatenate([-grad, np.zeros(na)])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
            p = sol[:n]
            lam_active = sol[n:]
        else:
            p = np.linalg.solve(H, -grad)
            lam_active = np.zeros(0)

        scale = max(1.0, float(np.max(np.abs(y))))
        if np.max(np.abs(p)) <= step_tol * scale:
            lambdas[:] = 0.0
            lambdas[active] = lam_active
            if na == 0 or np.min(lam_active) >= -tol:
                return y, lambdas, it
            drop = active[int(np.argmin(lam_active))]
            active.remove(drop)
            continue

        # largest step keeping all inactive constraints satisfied
        alpha = 1.0
        blocking = -1
        mask = np.ones(m, dtype=bool)
        mask[active] = False
        Ap = A[mask] @ p
        rows = np.nonzero(mask)[0]
        positive = Ap > 1e-14
        if np.any(positive):
            slacks = (b[rows[positive]] - A[rows[positive]] @ y) / Ap[positive]
            kmin = int(np.argmin(slacks))
            if slacks[kmin] < alpha:
                alpha = max(slacks[kmin], 0.0)
                blocking = int(rows[positive][kmin])
        y = y + alpha * p
        if blocking >= 0:
            active.append(blocking)

    grad = H @ y + g
    raise QpConvergenceError(
        "active-set iteration limit reached", float(np.max(np.abs(grad)))
    )


def _anchors_from_selector(S, h_s):
    """Map selector rows to (node index, value), rejecting conflicts."""
    S = np.asarray(S, dtype=float)
    h_s = np.asarray(h_s, dtype=float)
    if S.shape[0] < 1:
        raise InfeasibleAnchorsError("at least one sensed node is required")
    values: dict[int, float] = {}
    for r in range(S.shape[0]):
        j = int(np.argmax(S[r]))
        if values.get(j, h_s[r]) != h_s[r]:
            raise InfeasibleAnchorsError(
                f"conflicting head values for node index {j}: "
                f"{values[j]} vs {h_s[r]}"
            )
        values[j] = float(h_s[r])
    idx = np.array(sorted(values), dtype=int)
    return idx, np.array([values[j] for j in idx])


def gsi(L, D, M, S, h_s, config: GsiConfig | None = None) -> GsiSolution:
    """Interpolate heads by Laplacian smoothing with a shared slack bound.

    Minimizes 0.5 * (h' L D^-2 L h + zeta * gamma^2) subject to
    M h <= gamma * 1, gamma >= gamma_min and exact equality at the sensed
    nodes. Sensed equalities are eliminated by substitution; the reduced
    strictly convex QP is solved by the active-set method above.
    """
    config = config or GsiConfig()
    L = np.asarray(L, dtype=float)
    D = np.asarray(D, dtype=float)
    M = np.asarray(M, dtype=float)
    n = L.shape[0]

    fixed_idx, fixed_val = _anchors_from_selector(S, h_s)
    free_idx = np.setdiff1d(np.arange(n), fixed_idx)
    nf = free_idx.size

    d = np.diag(D) if D.ndim == 2 else D
    P = L @ np.diag(1.0 / d**2) @ L

    # reduced variables y = [h_free; gamma]
    H = np.zeros((nf + 1, nf + 1))
    H[:nf, :nf] = P[np.ix_(free_idx, free_idx)]
    H[nf, nf] = config.zeta
    g = np.zeros(nf + 1)
    if nf:
        g[:nf] = P[np.ix_(free_idx, fixed_idx)] @ fixed_val

    n_edges = M.shape[0]
    A = np.zeros((n_edges + 1, nf + 1))
    b = np.zeros(n_edges + 1)
    A[:n_edges, :nf] = M[:, free_idx]
    A[:n_edges, nf] = -1.0
    b[:n_edges] = -(M[:, fixed_idx] @ fixed_val)
    A[n_edges, nf] = -1.0
    b[n_edges] = -config.gamma_min

    y0 = np.zeros(nf + 1)
    y0[:nf] = float(np.mean(fixed_val))
    h0 = np.zeros(n)
    h0[fixed_idx] = fixed_val
    h0[free_idx] = y0[:nf]
    y0[nf] = max(config.gamma_min, float(np.max(M @ h0)) if n_edges else 0.0) + 1.0

    y, lambdas, iterations = solve_convex_qp(
        H, g, A, b, y0, tol=config.tol, max_iter=config.max_iter
    )

    h = np.zeros(n)
    h[fixed_idx] = fixed_val
    h[free_idx] = y[:nf]
    gamma = float(y[nf])

    stationarity = float(np.max(np.abs(H @ y + g + A.T @ lambdas)))
    violation = float(max(0.0, np.max(A @ y - b))) if b.size else 0.0
    residual = max(stationarity, violation, float(max(0.0, -np.min(lambdas))))
    objective = 0.5 * float(h @ P @ h + config.zeta * gamma**2)
    return GsiSolution(
        h=h,
        gamma=gamma,
        objective=objective,
        kkt_residual=residual,
        iterations=iterations,
    )


def aw_weights(
    h_bar: np.ndarray,
    T: np.ndarray,
    graph: NetworkGraph,
    floor: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Physics-derived adjacency weights from a baseline head estimate.

    For the pipe between i and j with resistance tau, the weight is
    tau^-0.54 * |h_i - h_j|^(1 - 1/1.852), floored at `floor` so the
    weighted graph stays connected when the baseline is locally flat.
    """
    h_bar = np.asarray(h_bar, dtype=float)
    if h_bar.shape != (graph.n_nodes,):
        raise ValueError(f"expected {graph.n_nodes} baseline heads")
    tau = np.diag(T) if np.asarray(T).ndim == 2 else np.asarray(T, dtype=float)
    drop = np.abs(h_bar[graph.source_idx] - h_bar[graph.sink_idx])
    w = tau**AW_TAU_EXPONENT * drop**AW_DROP_EXPONENT
    w = np.maximum(w, floor)
    n = graph.n_nodes
    W = np.zeros((n, n))
    W[graph.source_idx, graph.sink_idx] = w
    W[graph.sink_idx, graph.source_idx] = w
    D = np.diag(W.sum(axis=1))
    return W, D


def aw_gsi(
    graph: NetworkGraph,
    S: np.ndarray,
    h_s: np.ndarray,
    h_bar: np.ndarray,
    T: np.ndarray,
    config: GsiConfig | None = None,
) -> GsiSolution:
    """Interpolation pass using the reweighted Laplacian from `aw_weights`."""
    config = config or GsiConfig()
    W, D = aw_weights(h_bar, T, graph, floor=config.weight_floor)
    L = D - W
    M = build_incidence(graph)
    return gsi(L, D, M, S, h_s, config)

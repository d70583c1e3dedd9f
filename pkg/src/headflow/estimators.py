"""Iterative head/flow estimators built on the filter primitives.

Three variants share the same ingredients: a diffusion process matrix
derived from the physics-informed edge weights, a nonlinear measurement
map relating heads to demands and pipe flows, and an interpolated head
vector as the starting point.

- ukf_aw_gsi: heads only, diffusion predict + unscented correction.
- dual_ukf_aw_gsi: a head UKF and a flow KF exchanging their current
  estimates as fixed pseudo-measurements every k_ex iterations.
- joint_ukf_aw_gsi: one UKF over the stacked [heads; flows] state whose
  measurement map carries the self-consistency rows instead.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from .filters import (
    GaussianBelief,
    kf_predict,
    kf_update,
    ukf_update,
    ut_weights,
)
from .hydraulics import HydraulicState, SensorReadings, hazen_williams_flow
from .interpolation import GsiConfig, aw_gsi, aw_weights, gsi
from .network import (
    NetworkGraph,
    SensorLayout,
    StructuralMatrices,
    build_incidence,
    structural_weights,
)


class DegreeFloorError(ValueError):
    """A zero weighted degree slipped past the weight floor."""


@dataclass
class EstimatorConfig:
    """Filter parameters; defaults follow the reference benchmark setup."""

    alpha: float = 1e-3
    beta: float = 2.0
    beta_squared: bool = True  # zeroth covariance weight adds (1 - a^2 + b^2)
    k_ex: int = 1              # pseudo-measurement refresh period
    k_max: int = 50
    delta_tol: Optional[float] = None  # optional inf-norm stop on state delta

    # measurement confidences (diagonal variances per block)
    r_pressure: float = 1e-4
    r_demand: float = 1e-4
    r_head_virtual: float = 1e3   # reconstructed-flow rows seen by the head filter
    r_flow: float = 1e-6          # flow meter rows
    r_flow_virtual: float = 1e-5  # pseudo-measurement rows seen by the flow filter

    # process noise and initial covariance (diagonal)
    q_head: float = 1.0
    q_flow: float = 1e-5
    p0_head: float = 1.0
    p0_flow: float = 1e-2

    diffusion_blend: Optional[float] = None  # overrides the n_amr/n_nodes blend
    scale_flows: bool = False  # represent flows in l/s inside the joint state
    flow_scale: float = 1000.0

    gsi: GsiConfig = field(default_factory=GsiConfig)

    def __post_init__(self):
        if self.k_ex < 1:
            raise ValueError("k_ex must be >= 1")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatorConfig":
        data = dict(data)
        gsi_data = data.pop("gsi", {})
        return cls(gsi=GsiConfig(**gsi_data), **data)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EstimatorConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class MeasurementBundle:
    """Sensor vectors plus the current pseudo-measurement state."""

    h_s: np.ndarray
    c_a: np.ndarray
    q_s: np.ndarray
    virtual_q: Optional[np.ndarray] = None         # flow estimate injected to heads
    virtual_q_from_h: Optional[np.ndarray] = None  # head-derived flows for the flow filter

    @classmethod
    def from_readings(cls, readings: SensorReadings) -> "MeasurementBundle":
        return cls(
            h_s=np.asarray(readings.h_s, dtype=float),
            c_a=np.asarray(readings.c_a, dtype=float),
            q_s=np.asarray(readings.q_s, dtype=float),
        )


@dataclass
class EstimationReport:
    method: str
    h: np.ndarray
    q: Optional[np.ndarray]
    iterations: int
    convergence_reason: str
    rmse_h: list = field(default_factory=list)  # per iteration, truth known
    rmse_q: list = field(default_factory=list)
    initial_rmse_h: Optional[float] = None
    initial_rmse_q: Optional[float] = None
    cum_time: list = field(default_factory=list)  # loop seconds up to iteration k
    timings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def final_rmse_h(self) -> Optional[float]:
        return self.rmse_h[-1] if self.rmse_h else None

    @property
    def final_rmse_q(self) -> Optional[float]:
        return self.rmse_q[-1] if self.rmse_q else None


def build_process_matrix_Fh(
    W_aw: np.ndarray,
    D_aw: np.ndarray,
    n_amr: int,
    n_nodes: int,
    blend: Optional[float] = None,
) -> np.ndarray:
    """Diffusion process matrix: a convex blend of identity and D^-1 W.

    The blend coefficient defaults to n_amr / n_nodes. Rows sum to one,
    so repeated application averages nodal values over neighbourhoods.
    """
    d = np.diag(D_aw) if D_aw.ndim == 2 else np.asarray(D_aw, dtype=float)
    if np.any(d <= 0):
        raise DegreeFloorError("weighted degree matrix has a non-positive diagonal")
    A = W_aw / d[:, None]
    c = n_amr / n_nodes if blend is None else float(blend)
    return c * (np.eye(n_nodes) - A) + A


def _as_columns(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x.reshape(-1, 1), True
    return x, False


def _head_blocks(H, graph: NetworkGraph, tau: np.ndarray, amr_idx: np.ndarray):
    """Signed pipe flows plus metered net consumption, column-wise."""
    signed = hazen_williams_flow(
        H[graph.source_idx] - H[graph.sink_idx], tau[:, None]
    )
    inflow = np.zeros((graph.n_nodes, H.shape[1]))
    np.add.at(inflow, graph.sink_idx, signed)
    np.subtract.at(inflow, graph.source_idx, signed)
    return signed, inflow[amr_idx]


def g_head(h, S, T, graph: NetworkGraph, amr_idx) -> np.ndarray:
    """Measurement map for the head-only filter: sensed heads and demands.

    Accepts a single head vector or a matrix of column states. The flow
    orientation is rebuilt from each column, so the demand block equals
    the net consumption the current heads imply at the metered nodes.
    """
    H, single = _as_columns(h)
    tau = np.diag(T) if np.asarray(T).ndim == 2 else np.asarray(T, dtype=float)
    _, demand = _head_blocks(H, graph, tau, np.asarray(amr_idx, dtype=int))
    y = np.vstack([np.asarray(S, dtype=float) @ H, demand])
    return y[:, 0] if single else y


def g_joint(x, S, S_q, T, graph: NetworkGraph, amr_idx) -> np.ndarray:
    """Measurement map for the stacked state [heads; flows].

    Five blocks: sensed heads, sensed flows, metered demands implied by
    the heads, flow magnitudes reconstructed from the heads, and the flow
    sub-state itself. The last two mirror the pseudo-measurement exchange
    of the dual scheme inside one filter.
    """
    X, single = _as_columns(x)
    nV = graph.n_nodes
    H, Qs = X[:nV], X[nV:]
    tau = np.diag(T) if np.asarray(T).ndim == 2 else np.asarray(T, dtype=float)
    signed, demand = _head_blocks(H, graph, tau, np.asarray(amr_idx, dtype=int))
    y = np.vstack(
        [
            np.asarray(S, dtype=float) @ H,
            np.asarray(S_q, dtype=float) @ Qs,
            demand,
            np.abs(signed),
            Qs,
        ]
    )
    return y[:, 0] if single else y


@dataclass
class EstimationProblem:
    """Everything an estimator run needs besides the starting point."""

    graph: NetworkGraph
    mats: StructuralMatrices
    tau: np.ndarray
    F_h: np.ndarray
    clamp_idx: np.ndarray      # nodes with boundary heads, overwritten each iteration
    clamp_values: np.ndarray
    truth: Optional[HydraulicState] = None

    @classmethod
    def assemble(
        cls,
        graph: NetworkGraph,
        layout: SensorLayout,
        h_bar: np.ndarray,
        config: EstimatorConfig,
        fixed_heads: dict[str, float],
        truth: Optional[HydraulicState] = None,
    ) -> "EstimationProblem":
        mats = StructuralMatrices.build(graph, layout)
        tau = np.diag(mats.T)
        W_aw, D_aw = aw_weights(h_bar, tau, graph, floor=config.gsi.weight_floor)
        F_h = build_process_matrix_Fh(
            W_aw,
            D_aw,
            n_amr=len(layout.amr_nodes),
            n_nodes=graph.n_nodes,
            blend=config.diffusion_blend,
        )
        clamp_idx = np.array(
            [graph.node_index[nid] for nid in fixed_heads], dtype=int
        )
        clamp_values = np.array([fixed_heads[nid] for nid in fixed_heads])
        return cls(
            graph=graph,
            mats=mats,
            tau=tau,
            F_h=F_h,
            clamp_idx=clamp_idx,
            clamp_values=clamp_values,
            truth=truth,
        )

    def flow_magnitudes(self, h: np.ndarray) -> np.ndarray:
        signed = hazen_williams_flow(
            h[self.graph.source_idx] - h[self.graph.sink_idx], self.tau
        )
        return np.abs(signed)

    def clamp(self, h: np.ndarray) -> None:
        if self.clamp_idx.size:
            h[self.clamp_idx] = self.clamp_values


def initial_head_guess(
    graph: NetworkGraph,
    layout: SensorLayout,
    h_s: np.ndarray,
    fixed_heads: dict[str, float],
    config: GsiConfig | None = None,
    h_s_baseline: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass interpolated starting point.

    Pass one interpolates with unit weights to obtain the baseline head
    field; pass two reweights edges from that baseline and interpolates
    again. Boundary nodes with known heads join the sensed set as exact
    anchors (overriding a noisy reading on the same node). When separate
    leak-free readings are available, pass them as h_s_baseline so the
    baseline reflects normal operation.

    Returns (initial heads, baseline heads).
    """
    config = config or GsiConfig()
    from .network import resistance_vector

    def anchors(values):
        pairs: dict[str, float] = {}
        for nid, v in zip(layout.pressure_nodes, values):
            pairs[nid] = float(v)
        for nid, v in fixed_heads.items():
            pairs[nid] = float(v)  # boundary heads are exact, they win
        ids = list(pairs)
        S = np.zeros((len(ids), graph.n_nodes))
        for r, nid in enumerate(ids):
            S[r, graph.node_index[nid]] = 1.0
        return S, np.array([pairs[nid] for nid in ids])

    W, D, L = structural_weights(graph)
    M = build_incidence(graph)
    base_vals = h_s if h_s_baseline is None else h_s_baseline
    S0, v0 = anchors(base_vals)
    h_bar = gsi(L, D, M, S0, v0, config).h

    tau = resistance_vector(graph)
    S1, v1 = anchors(h_s)
    h0 = aw_gsi(graph, S1, v1, h_bar, tau, config).h
    return h0, h_bar


def convergence_check(
    prev: np.ndarray,
    current: np.ndarray,
    k: int,
    config: EstimatorConfig,
) -> tuple[bool, str]:
    """Stop at the iteration cap, or earlier on a small state delta if enabled."""
    if k >= config.k_max:
        return True, "max_iterations"
    if config.delta_tol is not None:
        if np.max(np.abs(np.asarray(current) - np.asarray(prev))) < config.delta_tol:
            return True, "delta_below_tolerance"
    return False, ""


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


class _Trace:
    """Per-iteration bookkeeping shared by the three loops."""

    def __init__(self, problem: EstimationProblem, t0: float):
        self.problem = problem
        self.t0 = t0
        self.rmse_h: list[float] = []
        self.rmse_q: list[float] = []
        self.cum_time: list[float] = []
        self.max_asym = 0.0

    def record(self, h, q, covs):
        truth = self.problem.truth
        if truth is not None:
            self.rmse_h.append(_rmse(h, truth.h))
            if q is not None:
                self.rmse_q.append(_rmse(q, truth.q))
        self.cum_time.append(time.perf_counter() - self.t0)
        for P in covs:
            asym = float(np.max(np.abs(P - P.T))) if P.size else 0.0
            self.max_asym = max(self.max_asym, asym)


def ukf_aw_gsi(
    h0: np.ndarray,
    bundle: MeasurementBundle,
    config: EstimatorConfig,
    problem: EstimationProblem,
) -> EstimationReport:
    """Head-only estimation: diffusion predict, unscented demand/head correction."""
    graph, mats = problem.graph, problem.mats
    nV = graph.n_nodes
    weights = ut_weights(nV, config.alpha, config.beta, config.beta_squared)
    n_s, n_a = mats.S.shape[0], mats.amr_idx.size
    z = np.concatenate([bundle.h_s, bundle.c_a])
    R = np.diag(
        np.concatenate(
            [np.full(n_s, config.r_pressure), np.full(n_a, config.r_demand)]
        )
    )
    Q = config.q_head * np.eye(nV)

    def g(H):
        return g_head(H, mats.S, problem.tau, graph, mats.amr_idx)

    belief = GaussianBelief(np.asarray(h0, dtype=float).copy(), config.p0_head * np.eye(nV))
    problem.clamp(belief.mean)

    t0 = time.perf_counter()
    trace = _Trace(problem, t0)
    if problem.truth is not None:
        report_init = _rmse(belief.mean, problem.truth.h)
    else:
        report_init = None

    k = 1
    reason = "max_iterations"
    while True:
        prev = belief.mean.copy()
        belief = kf_predict(belief, problem.F_h, Q)
        belief = ukf_update(belief, g, R, z, weights)
        problem.clamp(belief.mean)
        trace.record(belief.mean, None, (belief.cov,))
        done, reason = convergence_check(prev, belief.mean, k, config)
        if done:
            break
        k += 1

    return EstimationReport(
        method="ukf",
        h=belief.mean,
        q=None,
        iterations=k,
        convergence_reason=reason,
        rmse_h=trace.rmse_h,
        rmse_q=trace.rmse_q,
        initial_rmse_h=report_init,
        cum_time=trace.cum_time,
        timings={"loop_s": time.perf_counter() - t0},
        diagnostics={"max_cov_asymmetry": trace.max_asym},
    )


def dual_ukf_aw_gsi(
    h0: np.ndarray,
    bundle: MeasurementBundle,
    config: EstimatorConfig,
    problem: EstimationProblem,
) -> EstimationReport:
    """Separate head UKF and flow KF coupled through pseudo-measurements.

    The flow state starts from the head guess via the pipe head-loss law;
    every k_ex iterations each filter's measurement vector is refreshed
    with the other filter's current estimate.
    """
    graph, mats = problem.graph, problem.mats
    nV, nE = graph.n_nodes, graph.n_edges
    weights = ut_weights(nV, config.alpha, config.beta, config.beta_squared)

    h0 = np.asarray(h0, dtype=float).copy()
    q0 = problem.flow_magnitudes(h0)
    n_s, n_a, n_q = mats.S.shape[0], mats.amr_idx.size, mats.S_q.shape[0]

    z = np.concatenate([bundle.h_s, bundle.c_a])
    bundle.virtual_q = q0.copy()
    bundle.virtual_q_from_h = q0.copy()
    z_h = np.concatenate([z, bundle.virtual_q])
    z_q = np.concatenate([bundle.q_s, bundle.virtual_q_from_h])

    R_h = np.diag(
        np.concatenate(
            [
                np.full(n_s, config.r_pressure),
                np.full(n_a, config.r_demand),
                np.full(nE, config.r_head_virtual),
            ]
        )
    )
    R_q = np.diag(
        np.concatenate(
            [np.full(n_q, config.r_flow), np.full(nE, config.r_flow_virtual)]
        )
    )
    G_q = np.vstack([mats.S_q, np.eye(nE)])
    F_q = np.eye(nE)
    Q_h = config.q_head * np.eye(nV)
    Q_q = config.q_flow * np.eye(nE)

    def g_h(H):
        tau = problem.tau
        signed, demand = _head_blocks(
            np.asarray(H, dtype=float), graph, tau, mats.amr_idx
        )
        return np.vstack([mats.S @ H, demand, np.abs(signed)])

    belief_h = GaussianBelief(h0, config.p0_head * np.eye(nV))
    belief_q = GaussianBelief(q0.copy(), config.p0_flow * np.eye(nE))
    problem.clamp(belief_h.mean)

    t0 = time.perf_counter()
    trace = _Trace(problem, t0)
    init_h = _rmse(belief_h.mean, problem.truth.h) if problem.truth is not None else None
    init_q = _rmse(belief_q.mean, problem.truth.q) if problem.truth is not None else None

    k = 1
    reason = "max_iterations"
    while True:
        prev = belief_h.mean.copy()
        belief_h = kf_predict(belief_h, problem.F_h, Q_h)
        belief_q = kf_predict(belief_q, F_q, Q_q)
        belief_h = ukf_update(belief_h, g_h, R_h, z_h, weights)
        belief_q = kf_update(belief_q, G_q, R_q, z_q)
        problem.clamp(belief_h.mean)
        if k % config.k_ex == 0:
            bundle.virtual_q = belief_q.mean.copy()
            bundle.virtual_q_from_h = problem.flow_magnitudes(belief_h.mean)
            z_h = np.concatenate([z, bundle.virtual_q])
            z_q = np.concatenate([bundle.q_s, bundle.virtual_q_from_h])
        trace.record(belief_h.mean, belief_q.mean, (belief_h.cov, belief_q.cov))
        done, reason = convergence_check(prev, belief_h.mean, k, config)
        if done:
            break
        k += 1

    return EstimationReport(
        method="dual",
        h=belief_h.mean,
        q=belief_q.mean,
        iterations=k,
        convergence_reason=reason,
        rmse_h=trace.rmse_h,
        rmse_q=trace.rmse_q,
        initial_rmse_h=init_h,
        initial_rmse_q=init_q,
        cum_time=trace.cum_time,
        timings={"loop_s": time.perf_counter() - t0},
        diagnostics={"max_cov_asymmetry": trace.max_asym},
    )


def joint_ukf_aw_gsi(
    x0: np.ndarray,
    bundle: MeasurementBundle,
    config: EstimatorConfig,
    problem: EstimationProblem,
) -> EstimationReport:
    """Single UKF over the stacked [heads; flows] state.

    The process matrix is block diagonal (diffusion over heads, identity
    over flows), so head/flow interaction happens only through the
    measurement map and the cross-covariance it induces. Optional
    scale_flows represents flows in l/s inside the state to equalize
    sigma-point spreads; off by default.
    """
    graph, mats = problem.graph, problem.mats
    nV, nE = graph.n_nodes, graph.n_edges
    n = nV + nE
    weights = ut_weights(n, config.alpha, config.beta, config.beta_squared)
    n_s, n_a, n_q = mats.S.shape[0], mats.amr_idx.size, mats.S_q.shape[0]

    scale = np.ones(n)
    if config.scale_flows:
        scale[nV:] = config.flow_scale

    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (n,):
        raise ValueError(f"joint state must have length {n}, got {x0.shape}")
    q0 = x0[nV:].copy()

    F_x = np.zeros((n, n))
    F_x[:nV, :nV] = problem.F_h
    F_x[nV:, nV:] = np.eye(nE)
    # process noise and initial covariance in scaled coordinates
    q_diag = np.concatenate([np.full(nV, config.q_head), np.full(nE, config.q_flow)])
    Q_x = np.diag(q_diag * scale**2)
    P0 = np.diag(
        np.concatenate(
            [np.full(nV, config.p0_head), np.full(nE, config.p0_flow)]
        )
        * scale**2
    )
    R_x = np.diag(
        np.concatenate(
            [
                np.full(n_s, config.r_pressure),
                np.full(n_q, config.r_flow),
                np.full(n_a, config.r_demand),
                np.full(nE, config.r_head_virtual),
                np.full(nE, config.r_flow_virtual),
            ]
        )
    )

    z_m = np.concatenate([bundle.h_s, bundle.q_s, bundle.c_a])
    bundle.virtual_q = q0.copy()
    bundle.virtual_q_from_h = q0.copy()
    z_x = np.concatenate([z_m, bundle.virtual_q, bundle.virtual_q_from_h])

    inv_scale = (1.0 / scale).reshape(-1, 1)

    def g_x(X):
        return g_joint(
            np.asarray(X, dtype=float) * inv_scale,
            mats.S,
            mats.S_q,
            problem.tau,
            graph,
            mats.amr_idx,
        )

    belief = GaussianBelief(x0 * scale, P0)
    problem.clamp(belief.mean[:nV])

    t0 = time.perf_counter()
    trace = _Trace(problem, t0)
    init_h = _rmse(x0[:nV], problem.truth.h) if problem.truth is not None else None
    init_q = _rmse(q0, problem.truth.q) if problem.truth is not None else None

    k = 1
    reason = "max_iterations"
    while True:
        prev = belief.mean / scale
        belief = kf_predict(belief, F_x, Q_x)
        belief = ukf_update(belief, g_x, R_x, z_x, weights)
        problem.clamp(belief.mean[:nV])
        h_k = belief.mean[:nV]
        q_k = belief.mean[nV:] / scale[nV:]
        if k % config.k_ex == 0:
            bundle.virtual_q = q_k.copy()
            bundle.virtual_q_from_h = problem.flow_magnitudes(h_k)
            z_x = np.concatenate([z_m, bundle.virtual_q, bundle.virtual_q_from_h])
        trace.record(h_k, q_k, (belief.cov,))
        done, reason = convergence_check(prev, belief.mean / scale, k, config)
        if done:
            break
        k += 1

    P = belief.cov / np.outer(scale, scale)
    P_hq = P[:nV, nV:]
    diagnostics = {
        "max_cov_asymmetry": trace.max_asym,
        "cross_cov_fro": float(np.linalg.norm(P_hq)),
        "head_cov_fro": float(np.linalg.norm(P[:nV, :nV])),
        "flow_cov_fro": float(np.linalg.norm(P[nV:, nV:])),
    }
    return EstimationReport(
        method="joint",
        h=belief.mean[:nV].copy(),
        q=(belief.mean[nV:] / scale[nV:]).copy(),
        iterations=k,
        convergence_reason=reason,
        rmse_h=trace.rmse_h,
        rmse_q=trace.rmse_q,
        initial_rmse_h=init_h,
        initial_rmse_q=init_q,
        cum_time=trace.cum_time,
        timings={"loop_s": time.perf_counter() - t0},
        diagnostics=diagnostics,
    )

"""Steady-state Hazen-Williams solver and synthetic measurement generation.

Serves as the ground-truth oracle for the estimators: a damped Newton
iteration on junction heads with fixed-head inlets, plus helpers that map
heads to pipe flows and flows to nodal demands.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .network import HW_EXPONENT, NetworkGraph, SensorLayout, sensor_matrices

#: head difference (m) below which the flow law is replaced by a C1 quadratic
SMOOTHING_HEAD = 1e-8


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, worst_residual: float):
        self.worst_residual = worst_residual
        super().__init__(f"{message} (worst residual {worst_residual:.3e})")


class UnsatisfiableScenarioError(ValueError):
    """Demands cannot be met, e.g. a demand node with no path to an inlet."""


class InconsistentIncidenceError(ValueError):
    """B @ h produced a negative head drop: B was not derived from this h."""


def hazen_williams_flow(delta_h, tau):
    """Signed pipe flow for a signed head drop: q = sgn(dh) * (|dh|/tau)^(1/1.852).

    Below SMOOTHING_HEAD the power law is replaced by the quadratic through
    the origin that matches value and slope at the cutoff, keeping dq/dh
    finite for the Newton iteration. Solver and measurement models share
    this law so head/flow round trips agree to machine precision.
    """
    delta_h = np.asarray(delta_h, dtype=float)
    tau = np.asarray(tau, dtype=float)
    s = 1.0 / HW_EXPONENT
    mag = np.abs(delta_h)
    with np.errstate(invalid="ignore"):
        q = (np.maximum(mag, SMOOTHING_HEAD) / tau) ** s
    small = mag < SMOOTHING_HEAD
    if np.any(small):
        q_eps = (SMOOTHING_HEAD / tau) ** s
        a = (2.0 - s) * q_eps / SMOOTHING_HEAD
        b = (s - 1.0) * q_eps / SMOOTHING_HEAD**2
        q = np.where(small, a * mag + b * mag**2, q)
    return np.sign(delta_h) * q


def hazen_williams_flow_derivative(delta_h, tau):
    """d|q|/d|dh| for the regularized law above; always finite and positive."""
    delta_h = np.asarray(delta_h, dtype=float)
    tau = np.asarray(tau, dtype=float)
    s = 1.0 / HW_EXPONENT
    mag = np.abs(delta_h)
    with np.errstate(invalid="ignore"):
        d = s * (np.maximum(mag, SMOOTHING_HEAD) / tau) ** s / np.maximum(
            mag, SMOOTHING_HEAD
        )
    small = mag < SMOOTHING_HEAD
    if np.any(small):
        q_eps = (SMOOTHING_HEAD / tau) ** s
        a = (2.0 - s) * q_eps / SMOOTHING_HEAD
        b = (s - 1.0) * q_eps / SMOOTHING_HEAD**2
        d = np.where(small, a + 2.0 * b * mag, d)
    return d


@dataclass
class HydraulicState:
    """One steady-state snapshot: heads, flow magnitudes and flow directions."""

    h: np.ndarray          # nodal heads (m), length n_V
    q: np.ndarray          # flow magnitudes (m^3/s), length n_E, >= 0
    direction: np.ndarray  # +1 along declared edge orientation, -1 against

    @property
    def signed_q(self) -> np.ndarray:
        return self.direction * self.q


@dataclass
class NoiseSpec:
    pressure: float = 0.0  # std dev on sensed heads (m)
    demand: float = 0.0    # std dev on AMR readings (m^3/s)
    flow: float = 0.0      # std dev on flow meters (m^3/s)


@dataclass
class Scenario:
    """Boundary conditions for one solve plus the sensor noise levels."""

    demands: dict[str, float]          # junction id -> demand (m^3/s)
    fixed_heads: dict[str, float]      # inlet id -> head (m)
    leak: Optional[dict] = None        # {"node": id, "magnitude": m^3/s}
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        if not self.fixed_heads:
            raise UnsatisfiableScenarioError("scenario needs at least one fixed head")
        for nid, d in self.demands.items():
            if d < 0:
                raise UnsatisfiableScenarioError(f"negative demand at {nid!r}")
        if self.leak is not None and self.leak.get("magnitude", 0.0) < 0:
            raise UnsatisfiableScenarioError("negative leak magnitude")

    def without_leak(self) -> "Scenario":
        return Scenario(
            demands=dict(self.demands),
            fixed_heads=dict(self.fixed_heads),
            leak=None,
            noise=self.noise,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        out = {
            "demands": {k: float(v) for k, v in self.demands.items()},
            "fixed_heads": {k: float(v) for k, v in self.fixed_heads.items()},
            "noise": {
                "pressure": self.noise.pressure,
                "demand": self.noise.demand,
                "flow": self.noise.flow,
            },
            "seed": self.seed,
        }
        if self.leak is not None:
            out["leak"] = {
                "node": self.leak["node"],
                "magnitude": float(self.leak["magnitude"]),
            }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        noise = NoiseSpec(**data.get("noise", {}))
        return cls(
            demands=dict(data["demands"]),
            fixed_heads=dict(data["fixed_heads"]),
            leak=data.get("leak"),
            noise=noise,
            seed=int(data.get("seed", 0)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SensorReadings:
    """Measurement vectors in layout order."""

    h_s: np.ndarray  # sensed heads (m)
    c_a: np.ndarray  # sensed demands (m^3/s)
    q_s: np.ndarray  # sensed flow magnitudes (m^3/s)


def flows_from_heads(T, B, h, clamp_tol: float = 1e-12) -> np.ndarray:
    """Pipe flow magnitudes (T^-1 B h)^(1/1.852) for a head-oriented B.

    Arguments slightly below zero (within clamp_tol, sign noise from an
    almost-consistent B) are clamped to zero; anything more negative means
    B was not built from this h and is rejected.
    """
    T = np.asarray(T, dtype=float)
    tau = np.diag(T) if T.ndim == 2 else T
    drop = np.asarray(B, dtype=float) @ np.asarray(h, dtype=float)
    arg = drop / tau
    if np.any(arg < -clamp_tol):
        k = int(np.argmin(arg))
        raise InconsistentIncidenceError(
            f"negative head drop {arg[k]:.3e} on edge index {k}"
        )
    drop = np.maximum(drop, 0.0)
    return np.abs(hazen_williams_flow(drop, tau))


def demands_from_flows(B_c, q) -> np.ndarray:
    """Net consumption at metered nodes implied by nonnegative pipe flows."""
    return -(np.asarray(B_c, dtype=float).T @ np.asarray(q, dtype=float))


def _demand_vector(graph: NetworkGraph, scenario: Scenario) -> np.ndarray:
    demand = np.zeros(graph.n_nodes)
    for nid, value in scenario.demands.items():
        if nid not in graph.node_index:
            raise UnsatisfiableScenarioError(f"demand at unknown node {nid!r}")
        demand[graph.node_index[nid]] += value
    if scenario.leak is not None:
        nid = scenario.leak["node"]
        if nid not in graph.node_index:
            raise UnsatisfiableScenarioError(f"leak at unknown node {nid!r}")
        demand[graph.node_index[nid]] += scenario.leak["magnitude"]
    return demand


def linear_head_guess(
    graph: NetworkGraph, tau: np.ndarray, fixed_idx, fixed_heads, demand
) -> np.ndarray:
    """Warm start: solve the linearized network (head loss = tau * q)."""
    n = graph.n_nodes
    w = 1.0 / tau
    Lap = np.zeros((n, n))
    src, snk = graph.source_idx, graph.sink_idx
    np.add.at(Lap, (src, src), w)
    np.add.at(Lap, (snk, snk), w)
    np.add.at(Lap, (src, snk), -w)
    np.add.at(Lap, (snk, src), -w)
    free = np.setdiff1d(np.arange(n), fixed_idx)
    h = np.zeros(n)
    h[fixed_idx] = fixed_heads
    if free.size:
        rhs = -demand[free] - Lap[np.ix_(free, fixed_idx)] @ fixed_heads
        h[free] = np.linalg.solve(Lap[np.ix_(free, free)], rhs)
    return h


def solve_steady_state(
    graph: NetworkGraph,
    scenario: Scenario,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> HydraulicState:
    """Damped Newton iteration on junction heads.

    Converges when the junction mass-balance residual drops below tol
    (m^3/s, infinity norm). Head-loss consistency then holds by
    construction since flows are evaluated from heads.
    """
    from .network import resistance_vector

    tau = resistance_vector(graph)
    demand = _demand_vector(graph, scenario)

    fixed_ids = list(scenario.fixed_heads)
    for nid in fixed_ids:
        if nid not in graph.node_index:
            raise UnsatisfiableScenarioError(f"fixed head at unknown node {nid!r}")
    fixed_idx = np.array([graph.node_index[nid] for nid in fixed_ids], dtype=int)
    fixed_heads = np.array([scenario.fixed_heads[nid] for nid in fixed_ids])
    free = np.setdiff1d(np.arange(graph.n_nodes), fixed_idx)

    src, snk = graph.source_idx, graph.sink_idx

    def residual(h):
        # net outflow minus supply at free nodes: sum over incident pipes
        qs = hazen_williams_flow(h[src] - h[snk], tau)
        out = np.zeros(graph.n_nodes)
        np.add.at(out, src, qs)
        np.add.at(out, snk, -qs)
        return (out + demand)[free], qs

    h = linear_head_guess(graph, tau, fixed_idx, fixed_heads, demand)
    r, _ = residual(h)
    norm = np.max(np.abs(r)) if r.size else 0.0

    for _ in range(max_iter):
        if norm <= tol:
            break
        slope = hazen_williams_flow_derivative(h[src] - h[snk], tau)
        n = graph.n_nodes
        J = np.zeros((n, n))
        np.add.at(J, (src, src), slope)
        np.add.at(J, (snk, snk), slope)
        np.add.at(J, (src, snk), -slope)
        np.add.at(J, (snk, src), -slope)
        try:
            step = np.linalg.solve(J[np.ix_(free, free)], -r)
        except np.linalg.LinAlgError as exc:
            raise UnsatisfiableScenarioError(
                "singular hydraulic Jacobian; a demand node may be isolated"
            ) from exc
        # damping: halve the step until the residual stops increasing
        alpha = 1.0
        for _halving in range(40):
            h_try = h.copy()
            h_try[free] += alpha * step
            r_try, _ = residual(h_try)
            norm_try = np.max(np.abs(r_try)) if r_try.size else 0.0
            if norm_try < norm or alpha < 1e-12:
                break
            alpha *= 0.5
        h, r, norm = h_try, r_try, norm_try
    if norm > tol:
        raise ConvergenceError("steady state solve did not converge", norm)

    signed = hazen_williams_flow(h[src] - h[snk], tau)
    direction = np.where(signed >= 0.0, 1.0, -1.0)
    return HydraulicState(h=h, q=np.abs(signed), direction=direction)


def generate_scenario(
    graph: NetworkGraph,
    layout: SensorLayout,
    scenario: Scenario,
    seed: Optional[int] = None,
) -> tuple[HydraulicState, SensorReadings]:
    """Solve a scenario and synthesize noisy sensor readings.

    Deterministic for a given seed (defaults to scenario.seed).
    """
    state = solve_steady_state(graph, scenario)
    S, S_q, amr_idx = sensor_matrices(layout, graph)
    rng = np.random.default_rng(scenario.seed if seed is None else seed)

    # AMRs see consumer demand only; a leak is an unmetered extraction
    metered = _demand_vector(graph, scenario.without_leak())
    h_s = S @ state.h
    c_a = metered[amr_idx]
    q_s = S_q @ state.q
    noise = scenario.noise
    if noise.pressure > 0:
        h_s = h_s + rng.normal(0.0, noise.pressure, size=h_s.shape)
    if noise.demand > 0:
        c_a = c_a + rng.normal(0.0, noise.demand, size=c_a.shape)
    if noise.flow > 0:
        q_s = q_s + rng.normal(0.0, noise.flow, size=q_s.shape)
    return state, SensorReadings(h_s=h_s, c_a=c_a, q_s=q_s)

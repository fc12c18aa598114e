"""Round-based coupling mechanism between area operators.

Each round, every area clears against its neighbors' previous-round
broadcasts (flows, boundary angles, willingness to pay), the broadcast
variables are blended with an inertial step rho_k -> 0+, and the per-tie
capacity prices take a constant-step ascent on the capacity-violation
surrogate, clamped at zero.  Capacity prices move on a fast timescale, flows
and quoted prices on a slow one; the mechanism's limit is a Nash equilibrium
of the coupled clearing game, which `verify_nash` checks numerically by
re-clearing each area against the frozen limit terms.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Network
from .market import (ChanceConstrainedClearing, ClearingEngine, ClearingError,
                     ClearingResult, TermsOfTrade, TieTerms, evaluate_objective)

log = logging.getLogger("flexmarket.coupling")


class MechanismError(RuntimeError):
    def __init__(self, round_k: int, message: str):
        self.round_k = round_k
        super().__init__(f"round {round_k}: {message}")


class MessageError(ValueError):
    pass


class StaleMessageError(MessageError):
    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"expected round {expected}, got {got}")


@dataclass(frozen=True)
class RhoSchedule:
    """Inertial step sizes rho_k = rho0 / (k + k0)**exponent.

    Any exponent in (0.5, 1] keeps the steps square-summable but not
    summable.  The default 0.6 decays slowly enough that the damped
    iteration still tracks the moving best responses late in a run; the
    harmonic schedule (exponent 1) is admissible but needs far more rounds
    for the same accuracy.
    """

    rho0: float = 1.0
    k0: float = 1.0
    exponent: float = 0.6

    def __post_init__(self):
        if not (0.5 < self.exponent <= 1.0):
            raise ValueError("exponent must lie in (0.5, 1] so the step sums diverge "
                             "while their squares stay summable")
        if self.rho0 <= 0:
            raise ValueError("rho0 must be > 0")
        if self.k0 < 0:
            raise ValueError("k0 must be >= 0")
        if self.rho0 / (1.0 + self.k0) ** self.exponent > 1.0:
            raise ValueError("rho_1 must not exceed 1")


def step_rho(k: int, schedule: RhoSchedule) -> float:
    if k < 1:
        raise ValueError("rounds are counted from 1")
    return schedule.rho0 / (k + schedule.k0) ** schedule.exponent


@dataclass(frozen=True)
class MechanismConfig:
    max_rounds: int = 5000
    rho: RhoSchedule = field(default_factory=RhoSchedule)
    beta: float = 0.1  # capacity-price step, (0,1)
    tol: float = 1e-8  # convergence threshold on the broadcast variables
    consecutive: int = 5  # rounds below tol before declaring convergence
    solver_tol: float = 1e-8
    solver_max_iter: int = 200
    warm_start: bool = False
    parallel: bool = True

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ValueError("beta must lie in (0,1)")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")


@dataclass(frozen=True)
class AreaBroadcast:
    """One area's slice of the exchanged variables x_a."""

    delta_t: dict[str, float]  # per incident tie, own orientation
    theta: dict[str, float]  # per own boundary bus
    price: dict[str, float]  # willingness to pay per incident tie


@dataclass(frozen=True)
class CouplingState:
    k: int
    areas: dict[str, AreaBroadcast]
    mu: dict[str, float]  # shared capacity price per tie
    rho: RhoSchedule
    beta: float


@dataclass(frozen=True)
class TieQuote:
    tie_id: str
    delta_t_mw: float
    theta_rad: float
    delta_price: float


@dataclass(frozen=True)
class ExchangeMessage:
    sender: str
    round_k: int
    ties: tuple[TieQuote, ...]


@dataclass(frozen=True)
class TieTrace:
    flow_from: float  # t_da + dT seen from the stored from-side
    flow_to: float  # (-t_da) + dT seen from the to-side
    mu: float
    delta_from: float
    delta_to: float
    consensus: float  # |flow_from + flow_to|
    slackness: float  # mu * ((|dTa| + |dTb|)/2 + |t_da| - capacity)


@dataclass(frozen=True)
class AreaTrace:
    reliability_price: float
    objective: float


@dataclass(frozen=True)
class TraceRecord:
    k: int
    ties: dict[str, TieTrace]
    areas: dict[str, AreaTrace]
    dx_inf: float
    consensus: float
    slackness: float


@dataclass(frozen=True)
class MechanismRun:
    state: CouplingState
    trace: tuple[TraceRecord, ...]
    clearings: dict[str, ClearingResult]  # most recent clear per area
    converged: bool
    rounds: int


def inertial_update(prev, fresh, rho: float):
    """Componentwise (1-rho)*prev + rho*fresh."""
    prev = np.asarray(prev, dtype=float)
    fresh = np.asarray(fresh, dtype=float)
    if prev.shape != fresh.shape:
        raise ValueError(f"shape mismatch: {prev.shape} vs {fresh.shape}")
    return (1.0 - rho) * prev + rho * fresh


def update_capacity_price(mu_prev: float, abs_dt_a: float, abs_dt_b: float,
                          abs_t_da: float, capacity: float, beta: float) -> float:
    """Constant-step ascent on the capacity surrogate, clamped at zero."""
    return max(mu_prev + beta * (0.5 * (abs_dt_a + abs_dt_b) + abs_t_da - capacity), 0.0) + 0.0


def _fmt(v: float) -> str:
    v = float(v)
    if v != v or v in (float("inf"), float("-inf")):
        raise MessageError(f"non-finite value {v!r} cannot go on the wire")
    out = format(v, ".17g")
    if out.lstrip("-").isdigit():
        out += ".0"  # keep it a JSON double; "-0" alone would decode as int 0
    return out


def encode_message(msg: ExchangeMessage) -> bytes:
    """Fixed JSON wire format; doubles carry 17 significant digits."""
    ties = ",".join(
        f'{{"id":{json.dumps(q.tie_id)},"delta_t_mw":{_fmt(q.delta_t_mw)},'
        f'"theta_rad":{_fmt(q.theta_rad)},"delta_price":{_fmt(q.delta_price)}}}'
        for q in sorted(msg.ties, key=lambda q: q.tie_id)
    )
    return (f'{{"sender":{json.dumps(msg.sender)},"round":{msg.round_k},'
            f'"ties":[{ties}]}}').encode()


def decode_message(data: bytes, expected_round: int | None = None) -> ExchangeMessage:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MessageError(f"malformed payload: {e}") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("sender"), str) \
            or not isinstance(doc.get("round"), int) or not isinstance(doc.get("ties"), list):
        raise MessageError("malformed payload: wrong structure")
    ties = []
    for q in doc["ties"]:
        if not isinstance(q, dict) or set(q) != {"id", "delta_t_mw", "theta_rad", "delta_price"}:
            raise MessageError("malformed payload: bad tie entry")
        if not isinstance(q["id"], str) or not all(
                isinstance(q[f], (int, float)) and not isinstance(q[f], bool)
                for f in ("delta_t_mw", "theta_rad", "delta_price")):
            raise MessageError("malformed payload: bad tie field types")
        ties.append(TieQuote(q["id"], float(q["delta_t_mw"]), float(q["theta_rad"]),
                             float(q["delta_price"])))
    if expected_round is not None and doc["round"] != expected_round:
        raise StaleMessageError(expected_round, doc["round"])
    return ExchangeMessage(doc["sender"], doc["round"], tuple(ties))


def _initial_state(net: Network, config: MechanismConfig) -> CouplingState:
    areas = {
        a.id: AreaBroadcast(
            delta_t={v.tie_id: 0.0 for v in net.tie_views(a.id)},
            theta={b: 0.0 for b in net.boundary_buses(a.id)},
            price={v.tie_id: 0.0 for v in net.tie_views(a.id)},
        )
        for a in net.areas
    }
    mu = {t.id: 0.0 for t in net.active_ties()}
    return CouplingState(0, areas, mu, config.rho, config.beta)


def _broadcast(net: Network, state: CouplingState, area_id: str) -> bytes:
    b = state.areas[area_id]
    quotes = tuple(
        TieQuote(v.tie_id, b.delta_t[v.tie_id], b.theta[v.own_bus], b.price[v.tie_id])
        for v in net.tie_views(area_id)
    )
    return encode_message(ExchangeMessage(area_id, state.k, quotes))


def terms_for_area(net: Network, state: CouplingState, area_id: str,
                   messages: dict[str, ExchangeMessage] | None = None) -> TermsOfTrade:
    """Assemble an area's terms of trade from its neighbors' broadcasts."""
    by_tie = {}
    for v in net.tie_views(area_id):
        if messages is not None:
            quote = next(q for q in messages[v.neighbor_area].ties if q.tie_id == v.tie_id)
            price, angle = quote.delta_price, quote.theta_rad
        else:
            nb = state.areas[v.neighbor_area]
            price, angle = nb.price[v.tie_id], nb.theta[v.neighbor_bus]
        by_tie[v.tie_id] = TieTerms(price, angle, state.mu[v.tie_id])
    return TermsOfTrade(by_tie)


def _fresh_broadcast(net: Network, area_id: str, result: ClearingResult) -> AreaBroadcast:
    theta = {b: result.decision.theta[b] for b in net.boundary_buses(area_id)}
    return AreaBroadcast(dict(result.decision.delta_t), theta, dict(result.willingness_to_pay))


def _blend(prev: AreaBroadcast, fresh: AreaBroadcast, rho: float) -> AreaBroadcast:
    mix = lambda p, f: {k: (1.0 - rho) * p[k] + rho * f[k] for k in p}
    return AreaBroadcast(mix(prev.delta_t, fresh.delta_t), mix(prev.theta, fresh.theta),
                         mix(prev.price, fresh.price))


def _dx_inf(prev: AreaBroadcast, new: AreaBroadcast) -> float:
    out = 0.0
    for p, n in ((prev.delta_t, new.delta_t), (prev.theta, new.theta), (prev.price, new.price)):
        for key in p:
            out = max(out, abs(p[key] - n[key]))
    return out


def _record(net: Network, state: CouplingState, prev_areas, clearings, k) -> TraceRecord:
    ties = {}
    consensus_max = 0.0
    slack_max = 0.0
    for t in net.active_ties():
        dt_from = state.areas[t.from_area].delta_t[t.id]
        dt_to = state.areas[t.to_area].delta_t[t.id]
        flow_from = t.t_da + dt_from
        flow_to = -t.t_da + dt_to
        consensus = abs(flow_from + flow_to)
        slackness = state.mu[t.id] * (0.5 * (abs(dt_from) + abs(dt_to)) + abs(t.t_da) - t.capacity)
        ties[t.id] = TieTrace(flow_from, flow_to, state.mu[t.id],
                              state.areas[t.from_area].price[t.id],
                              state.areas[t.to_area].price[t.id], consensus, slackness)
        consensus_max = max(consensus_max, consensus)
        slack_max = max(slack_max, slackness)
    areas = {a: AreaTrace(clearings[a].duals.reliability_price, clearings[a].objective)
             for a in clearings}
    dx = max((_dx_inf(prev_areas[a], state.areas[a]) for a in prev_areas), default=0.0)
    return TraceRecord(k, ties, areas, dx, consensus_max, slack_max)


def run(net: Network, config: MechanismConfig | None = None,
        engine: ClearingEngine | None = None) -> MechanismRun:
    """Execute the mechanism; deterministic for identical inputs."""
    config = config or MechanismConfig()
    if engine is None:
        engine = ChanceConstrainedClearing(net, config.solver_tol, config.solver_max_iter)
    area_ids = [a.id for a in net.areas]
    state = _initial_state(net, config)
    clearings: dict[str, ClearingResult] = {}
    trace: list[TraceRecord] = []
    pool = ThreadPoolExecutor(max_workers=len(area_ids)) if config.parallel and len(area_ids) > 1 else None

    def clear_all(k: int) -> dict[str, ClearingResult]:
        msgs = {a: decode_message(_broadcast(net, state, a), expected_round=state.k)
                for a in area_ids}
        terms = {a: terms_for_area(net, state, a, msgs) for a in area_ids}
        try:
            if pool is not None:
                results = list(pool.map(lambda a: engine.clear_area(a, terms[a]), area_ids))
            else:
                results = [engine.clear_area(a, terms[a]) for a in area_ids]
        except ClearingError as e:
            raise MechanismError(k, str(e)) from e
        return dict(zip(area_ids, results))

    try:
        if config.warm_start:
            clearings = clear_all(0)
            state = replace(state, areas={a: _fresh_broadcast(net, a, clearings[a])
                                          for a in area_ids})
        streak = 0
        converged = False
        rounds = 0
        for k in range(1, config.max_rounds + 1):
            clearings = clear_all(k)
            rho = step_rho(k, config.rho)
            prev_areas = state.areas
            new_areas = {a: _blend(prev_areas[a], _fresh_broadcast(net, a, clearings[a]), rho)
                         for a in area_ids}
            mu = dict(state.mu)
            for t in net.active_ties():
                mu[t.id] = update_capacity_price(
                    mu[t.id], abs(new_areas[t.from_area].delta_t[t.id]),
                    abs(new_areas[t.to_area].delta_t[t.id]), abs(t.t_da), t.capacity,
                    config.beta)
            state = CouplingState(k, new_areas, mu, config.rho, config.beta)
            trace.append(_record(net, state, prev_areas, clearings, k))
            rounds = k
            streak = streak + 1 if trace[-1].dx_inf < config.tol else 0
            if streak >= config.consecutive:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    log.info("mechanism finished after %d rounds (converged=%s)", rounds, converged)
    return MechanismRun(state, tuple(trace), clearings, converged, rounds)


@dataclass(frozen=True)
class ConvergenceMetrics:
    dx_inf: float
    consensus: dict[str, float]  # per tie
    slackness: dict[str, float]  # per tie
    consensus_max: float
    slackness_max: float


def convergence_metrics(trace) -> ConvergenceMetrics:
    """Final-round convergence diagnostics from a mechanism trace."""
    if len(trace) < 2:
        raise ValueError("need at least two trace records")
    last = trace[-1]
    return ConvergenceMetrics(
        dx_inf=last.dx_inf,
        consensus={t: v.consensus for t, v in last.ties.items()},
        slackness={t: v.slackness for t, v in last.ties.items()},
        consensus_max=last.consensus,
        slackness_max=last.slackness,
    )


@dataclass(frozen=True)
class NashGap:
    limit_objective: float
    best_objective: float
    gap: float  # limit - best; <= tol at a Nash equilibrium
    tolerance: float
    passed: bool


def verify_nash(net: Network, state: CouplingState, clearings: dict[str, ClearingResult],
                tol: float = 1e-4, engine: ClearingEngine | None = None) -> dict[str, NashGap]:
    """No-profitable-unilateral-deviation check at the limit state.

    Each area is re-cleared against the frozen limit terms; the objective of
    its limit decision must not exceed the re-cleared optimum by more than
    tol * (1 + |V_a|).
    """
    if engine is None:
        engine = ChanceConstrainedClearing(net)
    out = {}
    for a in net.areas:
        terms = terms_for_area(net, state, a.id)
        best = engine.clear_area(a.id, terms)
        v_limit = evaluate_objective(net, a.id, terms, clearings[a.id].decision)
        gap = v_limit - best.objective
        tolerance = tol * (1.0 + abs(v_limit))
        out[a.id] = NashGap(v_limit, best.objective, gap, tolerance, gap <= tolerance)
    return out


def trace_to_csv(trace) -> str:
    """Stable-order CSV: k, per tie (sorted) flows/mu/prices, per area (sorted)
    reliability price and objective, then the three convergence metrics."""
    if not trace:
        return ""
    tie_ids = sorted(trace[0].ties)
    area_ids = sorted(trace[0].areas)
    cols = ["k"]
    for t in tie_ids:
        cols += [f"{t}.flow_from", f"{t}.flow_to", f"{t}.mu", f"{t}.delta_from", f"{t}.delta_to"]
    for a in area_ids:
        cols += [f"{a}.gamma", f"{a}.objective"]
    cols += ["dx_inf", "consensus", "slackness"]
    lines = [",".join(cols)]
    for rec in trace:
        row = [str(rec.k)]
        for t in tie_ids:
            tt = rec.ties[t]
            row += [repr(tt.flow_from), repr(tt.flow_to), repr(tt.mu),
                    repr(tt.delta_from), repr(tt.delta_to)]
        for a in area_ids:
            at = rec.areas[a]
            row += [repr(at.reliability_price), repr(at.objective)]
        row += [repr(rec.dx_inf), repr(rec.consensus), repr(rec.slackness)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"

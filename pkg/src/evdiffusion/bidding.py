"""Day-ahead charging-energy bidding over simulated EV demand.

For each EV ``n`` the plan ``p[n]`` minimises

    sum_i c_i p_i + rho_pen * ( sum_i (p_i - d_i)^2 + (sum_i (p_i - d_i))^2 )

subject to ``0 <= p_i <= cap_n``, where ``c_i = price_i * dt_hours``. EVs do
not interact, so every row is solved on its own.

Units follow the usual formulation: the squared gaps are in kW^2 and are
multiplied by the penalty price in $/kWh, so the penalty cost is not
dimensionally pure.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import kmeans

INTERVAL_HOURS = 5.0 / 60.0
DAY_INTERVALS = 288


@dataclass
class BiddingInstance:
    demands: np.ndarray  # (N, T) kW
    prices: np.ndarray  # (T,) $/kWh
    penalty_price: float
    dt_hours: float = INTERVAL_HOURS
    caps: np.ndarray | float = 10.0

    def __post_init__(self):
        self.demands = np.atleast_2d(np.asarray(self.demands, dtype=np.float64))
        self.prices = np.asarray(self.prices, dtype=np.float64).ravel()
        self.caps = np.broadcast_to(np.asarray(self.caps, dtype=np.float64), (len(self.demands),)).copy()
        N, T = self.demands.shape
        if N == 0 or T == 0:
            raise ValueError("empty bidding instance")
        if self.prices.shape != (T,):
            raise ValueError(f"need {T} prices, got {self.prices.size}")
        if np.any(self.prices < 0):
            raise ValueError("negative prices are not supported")
        if np.any(self.demands < 0) or np.any(self.caps < 0):
            raise ValueError("demands and caps must be non-negative")
        if self.penalty_price < 0 or self.dt_hours <= 0:
            raise ValueError("penalty price must be >= 0 and interval length > 0")

    @property
    def linear_costs(self) -> np.ndarray:
        return self.prices * self.dt_hours


@dataclass
class BiddingPlan:
    power: np.ndarray  # (N, T) kW
    energy_cost: float
    penalty_cost: float
    total: float
    residual: float = 0.0


def plan_costs(power, demands, prices, penalty_price, dt_hours=INTERVAL_HOURS) -> tuple[float, float]:
    """Energy procurement and user penalty cost of a fixed plan against ``demands``."""
    power = np.atleast_2d(power)
    gap = power - np.atleast_2d(demands)
    energy = float((np.asarray(prices) * power.sum(0)).sum() * dt_hours)
    g_f = float((gap ** 2).sum())
    g_d = float((gap.sum(1) ** 2).sum())
    return energy, (g_f + g_d) * penalty_price


def _solve_row(d, c, rho, cap) -> np.ndarray:
    """Exact minimiser of one EV's box QP via its scalar KKT equation.

    Stationarity gives ``p_i = clip(d_i - S - c_i/(2 rho), 0, cap)`` with
    ``S = sum(p - d)``; ``S -> sum(p(S) - d) - S`` is strictly decreasing,
    so the root is bracketed and found by bisection, then polished on the
    final linear piece.
    """
    if rho == 0:
        return np.where(c > 0, 0.0, np.clip(d, 0.0, cap))
    shift = d - c / (2.0 * rho)
    total_d = d.sum()

    def phi(s):
        return np.clip(shift - s, 0.0, cap).sum() - total_d - s

    if phi(0.0) == 0.0:
        # zero aggregate gap, e.g. free energy with feasible demand: exact answer
        return np.clip(shift, 0.0, cap)
    lo, hi = -total_d, len(d) * cap - total_d
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if phi(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(lo), abs(hi)):
            break
    s = 0.5 * (lo + hi)
    raw = shift - s
    free = (raw > 0) & (raw < cap)
    upper = raw >= cap
    s_lin = (shift[free].sum() + cap * upper.sum() - total_d) / (1.0 + free.sum())
    raw_lin = shift - s_lin
    if np.array_equal(free, (raw_lin > 0) & (raw_lin < cap)) and np.array_equal(upper, raw_lin >= cap):
        s = s_lin
    return np.clip(shift - s, 0.0, cap)


def _gradient(p, inst: BiddingInstance) -> np.ndarray:
    gap = p - inst.demands
    return inst.linear_costs[None, :] + 2.0 * inst.penalty_price * (gap + gap.sum(1, keepdims=True))


def projected_gradient_residual(p, inst: BiddingInstance) -> float:
    """Max-norm of ``P(p - grad/L) - p`` relative to the largest cap."""
    T = inst.demands.shape[1]
    lip = max(2.0 * inst.penalty_price * (1.0 + T), 1e-300)
    g = _gradient(p, inst)
    proj = np.clip(p - g / lip, 0.0, inst.caps[:, None])
    return float(np.abs(proj - p).max() / max(1.0, inst.caps.max()))


def _projected_gradient(inst: BiddingInstance, tol: float, max_iter: int) -> np.ndarray:
    """Joint projected gradient with exact line search along the projected step."""
    rho = inst.penalty_price
    T = inst.demands.shape[1]
    lip = 2.0 * rho * (1.0 + T)
    caps = inst.caps[:, None]
    p = np.clip(inst.demands, 0.0, caps)
    for _ in range(max_iter):
        g = _gradient(p, inst)
        step = np.clip(p - g / lip, 0.0, caps) - p
        if np.abs(step).max() <= tol * max(1.0, inst.caps.max()):
            break
        curv = 2.0 * rho * ((step ** 2).sum() + (step.sum(1) ** 2).sum())
        slope = float((g * step).sum())
        alpha = 1.0 if curv <= 0 else min(1.0, -slope / curv)
        p = np.clip(p + alpha * step, 0.0, caps)
    return p


def solve_bidding(inst: BiddingInstance, method: str = "kkt", tol: float = 1e-10, max_iter: int = 200000) -> BiddingPlan:
    """Minimise energy plus penalty cost; ``method`` is ``"kkt"`` or ``"projected_gradient"``."""
    if method == "kkt":
        c = inst.linear_costs
        p = np.vstack([
            _solve_row(d, c, inst.penalty_price, cap) for d, cap in zip(inst.demands, inst.caps)
        ])
    elif method == "projected_gradient":
        if inst.penalty_price == 0:
            return solve_bidding(inst, "kkt")
        p = _projected_gradient(inst, tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    p = np.clip(p, 0.0, inst.caps[:, None])
    energy, penalty = plan_costs(p, inst.demands, inst.prices, inst.penalty_price, inst.dt_hours)
    res = projected_gradient_residual(p, inst) if inst.penalty_price > 0 else 0.0
    return BiddingPlan(p, energy, penalty, energy + penalty, res)


def solve_scenario_bidding(
    scenario_demands,
    weights,
    prices,
    penalty_price: float,
    dt_hours: float = INTERVAL_HOURS,
    caps=10.0,
) -> BiddingPlan:
    """One shared plan against several weighted demand scenarios (S, N, T).

    The expected penalty differs from the penalty at the weighted-mean
    demand by a plan-independent constant, so the plan is solved at the
    mean and the reported penalty is the weight-averaged scenario penalty.
    """
    scen = np.asarray(scenario_demands, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mean = np.tensordot(w, scen, axes=1)
    plan = solve_bidding(BiddingInstance(mean, prices, penalty_price, dt_hours, caps))
    penalties = [plan_costs(plan.power, d, prices, penalty_price, dt_hours)[1] for d in scen]
    expected = float(np.dot(w, penalties))
    return BiddingPlan(plan.power, plan.energy_cost, expected, plan.energy_cost + expected, plan.residual)


# -- scenario preparation ---------------------------------------------------------

@dataclass
class ReducedScenarios:
    curves: np.ndarray
    weights: np.ndarray
    indices: np.ndarray


def reduce_scenarios(curves, k: int, seed: int = 0, restarts: int = 10) -> ReducedScenarios:
    """K-means medoids of ``curves`` with member counts as weights."""
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    if len(curves) < k:
        raise ValueError(f"cannot reduce {len(curves)} curves to {k} scenarios")
    km = kmeans(curves, k, np.random.default_rng(seed), restarts=restarts)
    keep = km.medoids >= 0
    weights = np.bincount(km.assignments, minlength=k)[keep].astype(np.float64)
    idx = km.medoids[keep]
    return ReducedScenarios(curves[idx], weights, idx)


def sample_arrivals(real_arrival_minutes, n: int, rng: np.random.Generator, bin_minutes: float = 30.0) -> np.ndarray:
    """Arrival minutes drawn from the empirical histogram of observed arrivals.

    A bin is picked with probability proportional to its count, then a time
    uniformly inside it.
    """
    obs = np.asarray(real_arrival_minutes, dtype=np.float64)
    edges = np.arange(0.0, 1440.0 + bin_minutes, bin_minutes)
    counts, _ = np.histogram(np.clip(obs, 0, 1440 - 1e-9), edges)
    if counts.sum() == 0:
        raise ValueError("no observed arrivals")
    b = rng.choice(len(counts), size=n, p=counts / counts.sum())
    return edges[b] + rng.uniform(0.0, bin_minutes, size=n)


def curve_to_interval_kw(curve, step_minutes: float = 1.0, interval_minutes: float = 5.0,
                         rate_unit: str = "A", voltage: float = 208.0) -> np.ndarray:
    """Block-average a charging curve onto the bidding grid, converting to kW."""
    from .ingest import to_kw

    c = to_kw(np.asarray(curve, dtype=np.float64), rate_unit, voltage)
    ratio = interval_minutes / step_minutes
    r = int(round(ratio))
    if abs(ratio - r) > 1e-9 or r < 1:
        raise ValueError("interval must be a whole multiple of the curve step")
    pad = (-len(c)) % r
    c = np.concatenate([c, np.zeros(pad)])
    return c.reshape(-1, r).mean(1)


def assemble_instance(
    curves,
    arrivals_minutes,
    prices,
    penalty_factor: float = 0.8,
    penalty_price: float | None = None,
    step_minutes: float = 1.0,
    rate_unit: str = "A",
    voltage: float = 208.0,
    caps=10.0,
    n_intervals: int = DAY_INTERVALS,
) -> BiddingInstance:
    """Place each curve at its arrival on the day grid, cut at midnight.

    The penalty price defaults to ``penalty_factor * max(prices)``.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    arrivals = np.asarray(arrivals_minutes, dtype=np.float64).ravel()
    if len(arrivals) != len(curves):
        raise ValueError("one arrival time per curve is required")
    interval = 1440.0 / n_intervals
    demands = np.zeros((len(curves), n_intervals))
    for n, (c, a) in enumerate(zip(curves, arrivals)):
        if not 0.0 <= a < 1440.0:
            raise ValueError(f"arrival {a} min lies outside the day")
        kw = curve_to_interval_kw(c, step_minutes, interval, rate_unit, voltage)
        start = int(a // interval)
        m = min(len(kw), n_intervals - start)
        demands[n, start:start + m] = kw[:m]
    prices = np.asarray(prices, dtype=np.float64)
    rho = penalty_factor * float(prices.max()) if penalty_price is None else float(penalty_price)
    return BiddingInstance(demands, prices, rho, interval / 60.0, caps)


# -- files -----------------------------------------------------------------------

def _minute_of_day(value: str) -> float:
    s = value.strip()
    if "T" in s or " " in s:
        s = s.replace("T", " ").split(" ")[1]
    if ":" in s:
        parts = [float(x) for x in s.split(":")]
        return parts[0] * 60 + parts[1] + (parts[2] / 60 if len(parts) > 2 else 0.0)
    return float(s)


def read_prices(path, n_intervals: int = DAY_INTERVALS) -> np.ndarray:
    """Prices from ``interval_start,price_per_kwh`` rows; hourly rows are repeated."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no price rows")
    rows.sort(key=lambda r: _minute_of_day(r["interval_start"]))
    prices = np.array([float(r["price_per_kwh"]) for r in rows])
    if len(prices) == n_intervals:
        return prices
    if n_intervals % len(prices) == 0:
        return np.repeat(prices, n_intervals // len(prices))
    raise ValueError(f"{path}: {len(prices)} prices cannot fill {n_intervals} intervals")


def write_plan(out_dir, plan: BiddingPlan) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan_path = out_dir / "plan.csv"
    with open(plan_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ev", "interval", "p_kw"])
        for n, row in enumerate(plan.power):
            for i, v in enumerate(row):
                w.writerow([n, i, repr(float(v))])
    summary = out_dir / "costs.txt"
    summary.write_text(
        f"energy_procurement = {plan.energy_cost!r}\n"
        f"user_penalty = {plan.penalty_cost!r}\n"
        f"total = {plan.total!r}\n"
    )
    return plan_path, summary

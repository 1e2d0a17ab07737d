"""
Experiment runner.

run_experiment   – every (algorithm, gamma, seed) run of a spec; trace CSVs,
                   summary JSON and optional registry rows
check_theory     – step-size caps, derived constants and bounds against traces,
                   with a replicated first round under partial participation
gradcheck        – finite-difference verification of every loss model
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Algorithm, BoundViolation, ConfigError, FederationConfig
from datasets import FederatedData, gen_blobs
from engine import FederatedEngine
from experiment import ExperimentSpec
from export_manager import read_trace_csv, write_summary_json, write_trace_csv
from loss_models import ModelLike, build_model
from metrics import objective_values, rise_time
from report import LabeledTrace, group_rows, trace_filename
from round_trace import RoundTrace
from theory import (
    DerivedConstants, TheoryConstants, client_drift_bound, composite_minimum_quadratic,
    derive_constants, descent_bound, descent_step_cap, error_order, gradient_relation_gap,
    h_floor, scaled_step_sizes, server_drift_bound, stationarity_bound, strict_step_cap,
    validate_step_sizes,
)

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"
BOUND_TOLERANCE = 1e-10
STATIONARITY_HORIZONS = (10, 50, 200)
DEFAULT_REPLICAS = 1000


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    algorithm: Algorithm
    gamma: float
    seed: int
    config: FederationConfig
    traces: List[RoundTrace]
    path: Optional[Path] = None

    def labeled(self) -> LabeledTrace:
        return LabeledTrace(self.algorithm, self.gamma, self.seed, self.traces, self.path)


def config_digest(cfg: FederationConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode("utf-8")).hexdigest()[:16]


def execute_run(
    spec: ExperimentSpec, data: FederatedData, model: ModelLike,
    algorithm: Algorithm, gamma: float, seed: int,
) -> RunResult:
    cfg = spec.federation_config(algorithm, gamma, seed)
    traces = FederatedEngine(cfg, data, model).run()
    return RunResult(algorithm, cfg.gamma, seed, cfg, traces)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentOutcome:
    status: int
    runs: List[RunResult]
    files: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


def run_experiment(spec: ExperimentSpec) -> ExperimentOutcome:
    """
    Execute every run of ``spec`` and write its artifacts under ``spec.out_dir``.

    Runs are independent and may execute on ``spec.jobs`` threads; each trace
    file is written only by its own run, so the output does not depend on
    scheduling.
    """
    data = spec.build_data()
    model = spec.build_model(data)
    plan = spec.runs()
    logger.info("%s: %d runs", spec.name, len(plan))

    def one(item: Tuple[Algorithm, float, int]) -> RunResult:
        algo, gamma, seed = item
        result = execute_run(spec, data, model, algo, gamma, seed)
        result.path = write_trace_csv(
            result.traces, spec.out_dir / trace_filename(result.algorithm, result.gamma, seed)
        )
        return result

    if spec.jobs > 1 and len(plan) > 1:
        with ThreadPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(one, plan))
    else:
        results = [one(item) for item in plan]

    summary = build_summary(spec, results)
    summary_path = write_summary_json(summary, spec.out_dir / SUMMARY_FILE)
    if spec.db_path is not None:
        _register(spec, results)
    return ExperimentOutcome(0, results, [r.path for r in results] + [summary_path], summary)


def build_summary(spec: ExperimentSpec, results: Sequence[RunResult]) -> Dict[str, Any]:
    """Summary JSON content; every value is recomputable from the traces and the config."""
    labeled = [r.labeled() for r in results]
    rows, rounds = group_rows(labeled) if results and results[0].traces else ([], 0)
    runs = []
    for r in results:
        rolling = [t.rolling_acc for t in r.traces]
        runs.append({
            "file": r.path.name if r.path else None,
            "algorithm": r.algorithm.value,
            "gamma": r.gamma,
            "seed": r.seed,
            "final_rolling_acc": rolling[-1] if rolling else math.nan,
            "rise_time": rise_time(rolling),
        })
    summary: Dict[str, Any] = {
        "experiment": spec.name,
        "rounds": rounds,
        "seeds": list(spec.seeds),
        "rows": [row.to_dict() for row in rows],
        "runs": runs,
    }
    tc = spec.theory_constants()
    if tc is not None:
        summary["theory"] = {
            _run_label(r): theory_values(tc.with_protocol(r.config), r.traces, spec)
            for r in results if r.seed == spec.seeds[0]
        }
    return summary


def _run_label(r: RunResult) -> str:
    return f"{r.algorithm.value}_gamma{r.gamma:.6g}"


def _register(spec: ExperimentSpec, results: Sequence[RunResult]) -> None:
    import db

    db.init_db(spec.db_path)
    for r in results:
        rolling = [t.rolling_acc for t in r.traces]
        db.save_run(
            {
                "run_id": f"{spec.name}/{r.path.stem if r.path else _run_label(r)}",
                "experiment": spec.name,
                "algorithm": r.algorithm.value,
                "gamma": r.gamma,
                "seed": r.seed,
                "rounds": len(r.traces),
                "config_json": r.config.to_json(),
                "config_digest": config_digest(r.config),
                "trace_path": str(r.path or ""),
                "final_rolling_acc": None if not rolling or math.isnan(rolling[-1]) else rolling[-1],
                "rise_time": rise_time(rolling),
            },
            r.traces,
        )
    logger.info("registered %d runs in %s", len(results), spec.db_path)


# ---------------------------------------------------------------------------
# Theory
# ---------------------------------------------------------------------------

def initial_gap(spec: ExperimentSpec, traces: Sequence[RoundTrace], gamma: float) -> float:
    """
    D~0 = F~(x_0) - inf F~.

    On the quadratic testbed the infimum is evaluated exactly; otherwise an
    explicit ``theory.d0_tilde`` is used, falling back to F~(x_0) (losses are
    non-negative, so inf F~ >= 0).
    """
    if not traces or math.isnan(traces[0].Ftilde):
        return math.nan
    f0 = traces[0].Ftilde
    if spec.dataset.kind == "quadratic":
        p = spec.dataset.params
        data = spec.build_data()
        model = spec.build_model(data)
        x_star = composite_minimum_quadratic(p["client_centers"], p["server_center"], gamma)
        return max(0.0, f0 - objective_values(x_star, data.clients, data.server, model, gamma).Ftilde)
    if spec.theory and "d0_tilde" in spec.theory:
        return float(spec.theory["d0_tilde"])
    return f0


def theory_values(tc: TheoryConstants, traces: Sequence[RoundTrace], spec: ExperimentSpec) -> Dict[str, Any]:
    d0 = initial_gap(spec, traces, tc.gamma)
    dc = derive_constants(tc, d0)
    out: Dict[str, Any] = {
        "constants": asdict(tc),
        "derived": asdict(dc),
        "K0_eta0": tc.step,
        "effective_server_step": tc.gamma * tc.eta_0,
        "descent_step_cap": descent_step_cap(tc),
        "strict_step_cap": strict_step_cap(tc),
        "h_floor": h_floor(tc.gamma),
    }
    try:
        validate_step_sizes(tc)
        out["step_sizes_valid"] = True
        if traces and not math.isnan(d0):
            out["stationarity_bound"] = stationarity_bound(tc, dc, d0, len(traces))
    except BoundViolation as exc:
        out["step_sizes_valid"] = False
        out["step_size_violation"] = str(exc)
    if traces:
        T = len(traces)
        gap = 0.0 if math.isnan(d0) else d0
        out["error_order"] = {
            regime: error_order(tc, T, gap, regime).total for regime in ("a", "b", "c")
        }
        scaled = scaled_step_sizes(tc, T)
        out["scaled_step_sizes"] = {"eta_g": scaled.eta_g, "eta_l": scaled.eta_l,
                                    "K0": scaled.K0, "eta_0": scaled.eta_0}
    return out


@dataclass
class ExpectedDescent:
    """Replicated first round against the descent bound at the initial point."""

    replicas: int
    mean: float
    stderr: float
    bound: float

    @property
    def ok(self) -> bool:
        return _within(self.mean, self.bound + 3.0 * self.stderr)


@dataclass
class TheoryCheck:
    """Bound checks of one run against its trace."""

    label: str
    values: Dict[str, Any]
    descent_checked: int = 0
    descent_violations: int = 0
    min_descent_slack: float = math.inf
    stationarity: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    client_drift_checked: int = 0
    client_drift_violations: int = 0
    server_drift_checked: int = 0
    server_drift_violations: int = 0
    min_relation_gap: float = math.inf
    expected_descent: Optional[ExpectedDescent] = None
    notes: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        stationary_ok = all(obs <= bound * (1 + BOUND_TOLERANCE) + BOUND_TOLERANCE
                            for obs, bound in self.stationarity.values())
        expected_ok = self.expected_descent is None or self.expected_descent.ok
        return (self.descent_violations == 0 and self.client_drift_violations == 0
                and self.server_drift_violations == 0 and stationary_ok and expected_ok
                and self.min_relation_gap >= -BOUND_TOLERANCE)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["stationarity"] = {str(T): {"observed_min": o, "bound": b}
                               for T, (o, b) in self.stationarity.items()}
        out["ok"] = self.ok
        return out

    def summary(self) -> str:
        parts = [f"{self.label}: {'OK' if self.ok else 'VIOLATED'}",
                 f"descent {self.descent_checked - self.descent_violations}/{self.descent_checked}"]
        if self.expected_descent is not None:
            e = self.expected_descent
            parts.append(f"E[F~(x_1)] {e.mean:.6g} <= {e.bound:.6g} (+3 s.e., {e.replicas} replicas)")
        if self.client_drift_checked:
            parts.append(f"client drift {self.client_drift_checked - self.client_drift_violations}"
                         f"/{self.client_drift_checked}")
        if self.server_drift_checked:
            parts.append(f"server drift {self.server_drift_checked - self.server_drift_violations}"
                         f"/{self.server_drift_checked}")
        for T, (obs, bound) in sorted(self.stationarity.items()):
            parts.append(f"T={T}: {obs:.3g} <= {bound:.3g}")
        return " | ".join(parts)


def _within(observed: float, bound: float) -> bool:
    return observed <= bound + BOUND_TOLERANCE * max(1.0, abs(bound))


def check_trace(
    tc: TheoryConstants,
    traces: Sequence[RoundTrace],
    spec: ExperimentSpec,
    label: str,
    exact_gradients: bool = False,
) -> TheoryCheck:
    """
    Compare one trace against the descent, stationarity and drift bounds.

    The per-round checks compare single realisations with bounds on
    expectations, so they run only when a round is deterministic: every
    client takes part (S = N), the constants declare no gradient noise and
    ``exact_gradients`` confirms that every local step used a full gradient.
    """
    values = theory_values(tc, traces, spec)
    check = TheoryCheck(label, values)
    dc: DerivedConstants = derive_constants(tc, values["derived"]["d0_tilde"])
    deterministic = (tc.S == tc.N and tc.sigma == 0 and tc.sigma0 == 0
                     and exact_gradients)

    if not values["step_sizes_valid"]:
        check.notes.append(values["step_size_violation"])
    elif not exact_gradients:
        check.notes.append("per-round checks need full-batch gradients (B below a party size)")
    elif not deterministic:
        check.notes.append("per-round descent check needs S = N and noiseless gradients")
    else:
        for cur, nxt in zip(traces, traces[1:]):
            if not (cur.has_diagnostics and nxt.has_diagnostics):
                continue
            xi_sq = 0.0 if math.isnan(cur.xi_sq) else cur.xi_sq
            rhs = descent_bound(tc, dc, cur.Ftilde, cur.grad_norm_Ftilde ** 2, xi_sq)
            check.descent_checked += 1
            check.min_descent_slack = min(check.min_descent_slack, rhs - nxt.Ftilde)
            if not _within(nxt.Ftilde, rhs):
                check.descent_violations += 1

        d0 = values["derived"]["d0_tilde"]
        grads = [t.grad_norm_Ftilde ** 2 for t in traces if t.has_diagnostics]
        if grads and not math.isnan(d0):
            for T in sorted({*STATIONARITY_HORIZONS, len(traces)}):
                if T > len(traces):
                    continue
                observed = min(t.grad_norm_Ftilde ** 2 for t in traces[:T] if t.has_diagnostics)
                check.stationarity[T] = (observed, stationarity_bound(tc, dc, d0, T))

    for t in traces:
        if not t.has_diagnostics:
            continue
        if not math.isnan(t.xi_sq):
            check.min_relation_gap = min(check.min_relation_gap, gradient_relation_gap(
                t.grad_norm_F ** 2, t.grad_norm_Ftilde ** 2, t.xi_sq, tc.gamma))
        if math.isnan(t.Ec_drift) or t.drift_estimated or not deterministic:
            continue
        try:
            bound = client_drift_bound(tc, t.grad_norm_F ** 2)
            check.client_drift_checked += 1
            check.client_drift_violations += not _within(t.Ec_drift, bound)
        except BoundViolation as exc:
            _note_once(check, str(exc))
        if tc.gamma > 0 and not math.isnan(t.grad_norm_f0):
            try:
                bound = server_drift_bound(tc, dc, t.Ec_drift, t.grad_norm_F ** 2, t.grad_norm_f0 ** 2)
                check.server_drift_checked += 1
                check.server_drift_violations += not _within(t.E0_drift, bound)
            except BoundViolation as exc:
                _note_once(check, str(exc))
    return check


def _note_once(check: TheoryCheck, note: str) -> None:
    if note not in check.notes:
        check.notes.append(note)


def expected_descent(
    engine: FederatedEngine, tc: TheoryConstants, replicas: int = DEFAULT_REPLICAS,
) -> ExpectedDescent:
    """
    Mean F~ after round 0 over ``replicas`` independent client samplings.

    Each replica replays round 0 from the run's initial point on its own fork
    of the run's streams.  The bound is the descent bound at that point.
    """
    if replicas < 2:
        raise ConfigError("replicas", f"need at least 2 replicas, got {replicas}")
    data, models, cfg = engine.data, engine.models, engine.cfg
    x0 = engine.initial_params()
    now = objective_values(x0, data.clients, data.server, models, cfg.gamma)
    xi_sq = now.xi_sq if len(data.server) else 0.0
    bound = descent_bound(tc, derive_constants(tc), now.Ftilde, now.grad_Ftilde_sq, xi_sq)
    values = np.empty(replicas)
    for k in range(replicas):
        x1, _ = engine.round_fn(x0, engine.train_clients, data.server, cfg, models,
                                engine.streams.fork(k), 0)
        values[k] = objective_values(x1, data.clients, data.server, models, cfg.gamma).Ftilde
    stderr = float(values.std(ddof=1) / math.sqrt(replicas))
    return ExpectedDescent(replicas, float(values.mean()), stderr, bound)


def check_theory(spec: ExperimentSpec, replicas: int = DEFAULT_REPLICAS) -> List[TheoryCheck]:
    """
    Evaluate the theory apparatus for every (algorithm, gamma) of ``spec``.

    The first seed's trace is read from ``spec.out_dir`` when present and
    produced by a fresh run otherwise.  With partial participation and exact
    gradients the descent bound is checked in expectation over ``replicas``
    replays of the first round.
    """
    tc = spec.theory_constants()
    if tc is None:
        raise ConfigError("theory", "constants L, G, xi_bar, sigma, sigma0 are required "
                                    "(or use the quadratic dataset)")
    seed = spec.seeds[0]
    data = spec.build_data()
    model = spec.build_model(data)
    checks = []
    for algo, gamma, s in spec.runs():
        if s != seed:
            continue
        cfg = spec.federation_config(algo, gamma, seed)
        engine = FederatedEngine(cfg, data, model)
        path = spec.out_dir / trace_filename(algo, cfg.gamma, seed)
        traces = read_trace_csv(path) if path.is_file() else engine.run()
        bound_tc = tc.with_protocol(cfg)
        exact = engine.exact_gradients()
        check = check_trace(bound_tc, traces, spec, f"{algo.value}_gamma{cfg.gamma:.6g}", exact)
        noiseless = exact and bound_tc.sigma == 0 and bound_tc.sigma0 == 0
        if bound_tc.S < bound_tc.N and noiseless and check.values["step_sizes_valid"]:
            check.expected_descent = expected_descent(engine, bound_tc, replicas)
        logger.info("%s", check.summary())
        checks.append(check)
    return checks


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

GRADCHECK_TOLERANCE = {"quadratic": 1e-10, "softmax": 1e-5, "mlp": 1e-5}


def gradcheck(points: int = 10, seed: int = 0, h: float = 1e-4) -> Dict[str, float]:
    """Largest relative finite-difference error per model kind over random points."""
    data = gen_blobs(3, 6, 4, 1.0, seed)
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for kind in GRADCHECK_TOLERANCE:
        model = build_model(kind, data.dim, data.num_classes, hidden=5)
        errors = [model.finite_diff_check(rng.normal(scale=0.5, size=model.dim), data, h)
                  for _ in range(points)]
        worst[kind] = max(errors)
        logger.info("gradcheck %s: max relative error %.3g", kind, worst[kind])
    return worst


def gradcheck_passed(errors: Dict[str, float]) -> bool:
    return all(errors[k] <= GRADCHECK_TOLERANCE[k] for k in errors)

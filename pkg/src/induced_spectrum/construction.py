"""Step-by-step inducing that keeps adding flat, mutually orthogonal functions.

State at step n: a subset A_n of the root (with its induced map), a family
f_1..f_n of simple observables on A_n, and target measures for each f_j and
for each polarized sum f_i + eta f_j (eta in {1, i}). One step adjoins a new
function, picks a spreading parameter, induces on a smaller set so that
every measured spectral measure approaches its spread target, and certifies
the four per-step conditions:

* A1 goodness of the single targets,
* A2 strong closeness of the new targets to the old ones,
* A3 small drift of the restricted functions,
* A4 weak closeness of measured spectral measures to the targets,

together with the mass bookkeeping on the removed sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .circle_measures import (
    CircleMeasure,
    DensityGrid,
    GoodSpec,
    ScheduleError,
    check_convergence,
    is_good,
    lebesgue,
    off_gap_mask,
    ratio_deviation,
    spread_out,
    to_density,
    validate_schedule,
    weak_distance,
)
from .inducing import (
    SpreadError,
    TowerError,
    induce,
    restrict_observable,
    rokhlin_tower,
    spread_by_inducing,
)
from .spectra import MultiplicityCertificate, multiplicity_witness
from .systems import FiniteSystem, Observable, make_rng, spectral_measures

__all__ = [
    "StepParams",
    "Schedule",
    "Target",
    "ConstructionState",
    "ConstructionError",
    "Trace",
    "ETAS",
    "pair_key",
    "init_state",
    "add_orthogonal_function",
    "inductive_step",
    "run_construction",
    "lebesgue_track",
]

ETAS = {"1": 1.0, "i": 1j}
ADD_ETAS = {"-1": -1.0, "1": 1.0, "i": 1j}

# seed stream indices
_ADD, _SPREAD = 1, 2


class ConstructionError(RuntimeError):
    """A step could not be completed; ``condition`` names what failed."""

    def __init__(self, step: int, condition: str, message: str, certificate: dict | None = None):
        super().__init__(f"step {step}: {condition}: {message}")
        self.step = step
        self.condition = condition
        self.certificate = certificate


@dataclass(frozen=True)
class StepParams:
    alpha: float
    tau: float
    eps: float
    rho: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.tau, self.eps, self.rho)

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "tau": self.tau, "eps": self.eps, "rho": self.rho}


class Schedule:
    """Per-step parameters, 1-based.

    An explicit schedule is used verbatim. The adaptive default recomputes
    ``alpha_n`` from the realized densities and then
    ``eps_n = 2**-(n+1) * min(1, alpha_n)``, with ``tau_n = pi 2**-n`` and
    ``rho_n = 2**-(n+2)``.
    """

    def __init__(self, params: Sequence[StepParams], adaptive: bool = False):
        self.params = list(params)
        self.adaptive = adaptive
        if not self.params:
            raise ValueError("schedule needs at least one step")
        validate_schedule([p.as_tuple() for p in self.params])
        for k in range(1, len(self.params)):
            if not self.params[k].rho < self.params[k - 1].rho:
                raise ScheduleError(k + 1, "rho must be strictly decreasing")

    @classmethod
    def default(cls, steps: int, alpha1: float = 0.5) -> "Schedule":
        params = [StepParams(alpha1, math.pi * 2.0**-n, cls.eps_rule(n, alpha1), 2.0 ** -(n + 2))
                  for n in range(1, steps + 1)]
        return cls(params, adaptive=True)

    @staticmethod
    def eps_rule(n: int, alpha: float) -> float:
        return 2.0 ** -(n + 1) * min(1.0, alpha)

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, n: int) -> StepParams:
        if not 1 <= n <= len(self.params):
            raise IndexError(f"schedule has no step {n}")
        return self.params[n - 1]

    def realize(self, n: int, alpha: float | None = None) -> StepParams:
        base = self[n]
        if not self.adaptive or alpha is None:
            return base
        return StepParams(alpha, base.tau, self.eps_rule(n, alpha), base.rho)

    def to_json(self) -> dict:
        return {"adaptive": self.adaptive, "params": [p.to_json() for p in self.params]}


@dataclass(frozen=True, eq=False)
class Target:
    measure: CircleMeasure
    density: DensityGrid

    @classmethod
    def of(cls, measure: CircleMeasure, G: int) -> "Target":
        return cls(measure, to_density(measure, G, measure.max_order))


def pair_key(i: int, j: int, eta: str) -> str:
    """1-based indices, e.g. ``"1,2,i"``."""
    return f"{i},{j},{eta}"


@dataclass(frozen=True, eq=False)
class ConstructionState:
    n: int
    root: FiniteSystem
    subset: np.ndarray
    system: FiniteSystem
    family: list[Observable]
    singles: list[Target]
    pairs: dict[str, Target]
    schedule: Schedule
    params: list[StepParams]
    deleted_mass: float
    certificates: list[dict]
    seed: int
    G: int = 256
    P: int = 32
    deltas: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    track: list[Observable] | None = None
    track_report: list[dict] = field(default_factory=list)

    @property
    def measure(self) -> float:
        return self.subset.size / self.root.n_atoms

    def current(self) -> StepParams:
        return self.params[-1]


def _pair_observables(family: Sequence[Observable]) -> dict[str, Observable]:
    out = {}
    for i in range(len(family)):
        for j in range(i + 1, len(family)):
            for name, eta in ETAS.items():
                out[pair_key(i + 1, j + 1, name)] = family[i].combine(family[j], eta)
    return out


def add_orthogonal_function(
    state: ConstructionState,
    rho: float,
    seed: int,
    retries: int = 100,
) -> Observable:
    """A new +-1 function on the current system, flat and orthogonal to the family.

    A Rokhlin tower of height ``ceil(4/rho)`` is cut in the current system and
    an independent fair-coin word is written up each column. The result must
    satisfy ``d(sigma(f), Leb) < rho`` and
    ``d(sigma(f + eta f_j), sigma(f_j) + Leb) < rho`` for eta in {-1, 1, i}.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    s, P = state.system, state.P
    h = math.ceil(4 / rho)
    try:
        tower = rokhlin_tower(s, h, rho / 4)
    except TowerError as exc:
        raise ConstructionError(state.n + 1, "add_orthogonal_function", f"{exc}; use a larger N") from exc
    cols = np.asarray(tower.columns, dtype=np.int64).reshape(-1, h)
    leb = lebesgue(P)
    olds = spectral_measures(state.family, P)
    best = None
    for attempt in range(retries):
        rng = make_rng(seed, attempt)
        labels = np.empty(s.n_atoms, dtype=np.int64)
        labels[cols] = rng.integers(0, 2, size=cols.shape)
        labels[tower.residual] = rng.integers(0, 2, size=tower.residual.size)
        f, _ = Observable.centered(s, labels, np.array([-1.0, 1.0]))
        combos = [f] + [f.combine(g, eta) for g in state.family for eta in ADD_ETAS.values()]
        measured = spectral_measures(combos, P)
        dists = [weak_distance(measured[0], leb)]
        k = 1
        for old in olds:
            for _ in ADD_ETAS:
                dists.append(weak_distance(measured[k], old + leb))
                k += 1
        if best is None or max(dists) < max(best):
            best = dists
        if max(dists) < rho:
            return f
    raise ConstructionError(
        state.n + 1, "add_orthogonal_function",
        f"best distances {[round(d, 4) for d in best]} not below rho={rho}; use a larger N or taller tower",
    )


def _deviations(new: dict[str, DensityGrid], ref: dict[str, DensityGrid], tau: float) -> dict[str, float]:
    return {k: ratio_deviation(ref[k], new[k], tau) for k in new}


def _a2_pairs(old: ConstructionState, new_singles: dict[str, DensityGrid], new_pairs: dict[str, DensityGrid],
              m: int) -> tuple[dict[str, DensityGrid], dict[str, DensityGrid]]:
    """(new, reference) density pairs for the strong-closeness chain at step m = n + 1."""
    G = old.G
    one = DensityGrid.constant(1.0, G)
    new, ref = {}, {}
    for j in range(1, m):
        new[f"f{j}"] = new_singles[f"f{j}"]
        ref[f"f{j}"] = old.singles[j - 1].density
    for key, d in new_pairs.items():
        i = int(key.split(",")[0])
        new[key] = d
        # a pair created at this step starts from the old single target plus 1
        ref[key] = old.pairs[key].density if key in old.pairs else old.singles[i - 1].density + 1.0
    new[f"f{m}"] = new_singles[f"f{m}"]
    ref[f"f{m}"] = one
    return new, ref


def _single_min(densities: Sequence[DensityGrid], tau: float) -> float:
    mask = off_gap_mask(densities[0].grid_size, tau)
    return float(min(d.values[mask].min() for d in densities))


def init_state(
    root: FiniteSystem,
    schedule: Schedule,
    seed: int,
    G: int = 256,
    P: int = 32,
) -> ConstructionState:
    """Step 1: A_1 = X, target 1 for a first flat function."""
    params = schedule.realize(1)
    leb = lebesgue(P)
    empty = ConstructionState(
        n=0, root=root, subset=np.arange(root.n_atoms), system=root, family=[], singles=[],
        pairs={}, schedule=schedule, params=[], deleted_mass=0.0, certificates=[], seed=seed, G=G, P=P,
    )
    f1 = add_orthogonal_function(empty, params.rho, _stream(seed, 1, _ADD))
    target = Target.of(leb, G)
    sigma = spectral_measures([f1], P)[0]
    d = weak_distance(sigma, leb)
    a1 = is_good(target.density, GoodSpec(params.alpha, params.tau))
    cert = {
        "n": 1,
        "params": params.to_json(),
        "delta": None,
        "A1": {"passed": a1, "alpha": params.alpha, "min_off_gap": [_single_min([target.density], params.tau)]},
        "A2": {"passed": True, "deviations": {}},
        "A3": {"passed": True, "drifts": []},
        "A4": {"passed": d < params.rho, "distances": {"f1": d}},
        "mass": {"passed": True, "removed": 0.0, "measure": 1.0},
    }
    cert["passed"] = all(cert[k]["passed"] for k in ("A1", "A2", "A3", "A4", "mass"))
    if not cert["passed"]:
        raise ConstructionError(1, "A4" if a1 else "A1",
                                f"flatness unreachable (d={d:.4g}, rho={params.rho}); use a larger N", cert)
    return replace(
        empty, n=1, family=[f1], singles=[target], params=[params], certificates=[cert],
        history=[{"sigmas": [sigma]}],
    )


def _stream(seed: int, n: int, kind: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(n, kind)).generate_state(1, np.uint64)[0])


def inductive_step(state: ConstructionState, max_halvings: int = 20, spread_tries: int = 20) -> ConstructionState:
    """Advance from step n to n + 1; the input state is never modified."""
    n, m = state.n, state.n + 1
    G, P = state.G, state.P
    if m > len(state.schedule):
        raise ConstructionError(m, "schedule", f"schedule covers only {len(state.schedule)} steps")
    if not state.certificates or not state.certificates[-1]["passed"]:
        raise ConstructionError(m, "precondition", "current state is not certified")
    cur = state.current()
    provisional = state.schedule.realize(m, cur.alpha)
    rho = provisional.rho

    # adjoin f_{n+1} with targets 1 and phi_i + 1
    f_new = add_orthogonal_function(state, rho, _stream(state.seed, m, _ADD))
    family = state.family + [f_new]
    leb = lebesgue(P)
    old_pairs = dict(state.pairs)
    for i in range(1, m):
        for name in ETAS:
            old_pairs[pair_key(i, m, name)] = Target.of(state.singles[i - 1].measure + leb, G)
    staged = replace(state, singles=state.singles + [Target.of(leb, G)], pairs=old_pairs)

    pair_obs = _pair_observables(family)
    names = [f"f{j}" for j in range(1, m + 1)] + list(pair_obs)
    observables = family + list(pair_obs.values())
    base = spectral_measures(observables, 2 * P)

    # Step 1: shrink delta until the spread densities stay eps-close to the targets
    delta = provisional.eps / 2
    for _ in range(max_halvings + 1):
        spread = {k: Target.of(spread_out(b, delta, P), G) for k, b in zip(names, base)}
        singles = {k: spread[k].density for k in names[:m]}
        pairs = {k: spread[k].density for k in pair_obs}
        new, ref = _a2_pairs(staged, singles, pairs, m)
        devs = _deviations(new, ref, provisional.tau)
        if max(devs.values()) <= provisional.eps:
            break
        delta /= 2
    else:
        raise ConstructionError(
            m, "Step 1 margin unreachable",
            f"worst deviation {max(devs.values()):.4g} > eps={provisional.eps:.4g} after {max_halvings} halvings",
        )

    # Step 2: induce so that measured spectra approach the spread targets
    track = state.track or []
    try:
        res = spread_by_inducing(state.system, observables + track, delta, rho, spread_tries,
                                 _stream(state.seed, m, _SPREAD), P)
    except SpreadError as exc:
        raise ConstructionError(m, "spread_by_inducing", str(exc)) from exc

    new_singles = [spread[k] for k in names[:m]]
    new_pairs = {k: spread[k] for k in pair_obs}
    alpha = 0.5 * _single_min([t.density for t in new_singles], provisional.tau)
    params = state.schedule.realize(m, alpha)
    new_family = res.observables[:m]
    subset = state.subset[res.induced.subset]
    cert, sigmas = certify_step(
        state.family, state.singles, state.pairs, state.subset,
        new_family, new_singles, new_pairs, subset,
        state.root, res.induced.system, params, delta,
        [p.as_tuple() for p in state.params], state.deltas,
    )
    cert["attempts"] = len(res.attempts)
    if not cert["passed"]:
        failed = [k for k in ("A1", "A2", "A3", "A4", "mass", "schedule") if not cert[k]["passed"]]
        raise ConstructionError(m, ",".join(failed), "step certificate failed", cert)

    track_report = list(state.track_report)
    new_track = None
    if state.track is not None:
        k0 = len(observables)
        new_track = res.observables[k0:]
        track_report.append({
            "n": m,
            "rho": params.rho,
            "distances": res.distances[k0:],
            "psi": [t.to_json() for t in res.targets[k0:]],
        })
    return replace(
        state,
        n=m,
        subset=subset,
        system=res.induced.system,
        family=new_family,
        singles=new_singles,
        pairs=new_pairs,
        params=state.params + [params],
        deleted_mass=1.0 - subset.size / state.root.n_atoms,
        certificates=state.certificates + [cert],
        deltas=state.deltas + [delta],
        history=state.history + [{"sigmas": sigmas}],
        track=new_track,
        track_report=track_report,
    )


def certify_step(
    old_family: Sequence[Observable],
    old_singles: Sequence[Target],
    old_pairs: dict[str, Target],
    old_subset: np.ndarray,
    new_family: Sequence[Observable],
    new_singles: Sequence[Target],
    new_pairs: dict[str, Target],
    new_subset: np.ndarray,
    root: FiniteSystem,
    system: FiniteSystem,
    params: StepParams,
    delta: float,
    previous_params: Sequence[tuple],
    previous_deltas: Sequence[float],
) -> tuple[dict, list[CircleMeasure]]:
    """Recompute the step certificate from stored objects only.

    ``old_*`` describe step n and ``new_*`` step n + 1 = m.
    """
    m = len(new_family)
    G = new_singles[0].density.grid_size
    P = new_singles[0].measure.max_order
    N = root.n_atoms

    a1_ok = all(is_good(t.density, GoodSpec(params.alpha, params.tau)) for t in new_singles)
    a1 = {"passed": a1_ok, "alpha": params.alpha,
          "min_off_gap": [_single_min([t.density], params.tau) for t in new_singles]}

    ref_state = _RefState(old_singles, old_pairs, G)
    new, ref = _a2_pairs(
        ref_state, {f"f{j + 1}": t.density for j, t in enumerate(new_singles)},
        {k: t.density for k, t in new_pairs.items()}, m,
    )
    devs = _deviations(new, ref, params.tau)
    a2 = {"passed": max(devs.values()) <= params.eps, "deviations": devs}

    # A3: distance between f_j^{(m)} and the restriction of f_j^{(n)}
    pos = np.searchsorted(old_subset, new_subset)
    drifts = []
    for j, f in enumerate(old_family):
        prev = f.values[pos]
        drifts.append(float(np.sqrt(np.mean(np.abs(new_family[j].values - prev) ** 2))))
    a3 = {"passed": all(d <= params.eps for d in drifts), "drifts": drifts}

    pair_obs = _pair_observables(new_family)
    measured = spectral_measures(list(new_family) + list(pair_obs.values()), P)
    sigmas = measured[:m]
    dist = {f"f{j + 1}": weak_distance(measured[j], new_singles[j].measure) for j in range(m)}
    for k, (key, _) in enumerate(pair_obs.items()):
        dist[key] = weak_distance(measured[m + k], new_pairs[key].measure)
    a4 = {"passed": max(dist.values()) < params.rho, "distances": dist}

    removed = (old_subset.size - new_subset.size) / N
    measure = new_subset.size / N
    eps_sum = sum(p[2] for p in previous_params) + params.eps
    two_delta_sum = 2 * (sum(previous_deltas) + delta)
    mass = {
        "passed": bool(removed < params.eps and measure >= 1 - eps_sum and measure >= 1 - two_delta_sum),
        "removed": removed,
        "measure": measure,
    }
    try:
        validate_schedule(list(previous_params) + [params.as_tuple()])
        sched = {"passed": True, "message": ""}
    except ScheduleError as exc:
        sched = {"passed": False, "message": str(exc)}
    cert = {
        "n": m,
        "params": params.to_json(),
        "delta": delta,
        "A1": a1,
        "A2": a2,
        "A3": a3,
        "A4": a4,
        "mass": mass,
        "schedule": sched,
    }
    cert["passed"] = all(cert[k]["passed"] for k in ("A1", "A2", "A3", "A4", "mass", "schedule"))
    return cert, sigmas


@dataclass
class _RefState:
    singles: Sequence[Target]
    pairs: dict[str, Target]
    G: int


@dataclass
class Trace:
    state: ConstructionState
    witness: MultiplicityCertificate | None
    convergence: list[dict]
    error: ConstructionError | None = None
    final_flatness: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (
            self.error is None
            and all(c["passed"] for c in self.state.certificates)
            and self.witness is not None
            and self.witness.certified_bound == self.state.n
        )


def convergence_reports(state: ConstructionState) -> list[dict]:
    """Convergence check of each function's target sequence across the completed steps."""
    out = []
    for j in range(1, state.n + 1):
        phis, sigmas, sched = [], [], []
        for n in range(j, state.n + 1):
            cert = state.certificates[n - 1]
            phis.append(_history_density(state, n, j))
            sigmas.append(state.history[n - 1]["sigmas"][j - 1])
            sched.append(StepParams(**cert["params"]).as_tuple())
        rep = check_convergence(phis, sigmas, sched, start=j)
        out.append({"function": j, **rep.to_json()})
    return out


def _history_density(state: ConstructionState, n: int, j: int) -> DensityGrid:
    return state.history[n - 1]["densities"][j - 1]


def run_construction(
    root: FiniteSystem,
    steps: int,
    schedule: Schedule,
    seed: int,
    G: int = 256,
    P: int = 32,
    witness_eps: float = 0.25,
    threshold: float = 0.5,
    coverage_goal: float = 0.9,
    dense_family: Sequence[Observable] | None = None,
) -> Trace:
    """Run ``steps - 1`` inductive steps after the initial one and certify the result."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if steps > len(schedule):
        raise ValueError(f"schedule covers {len(schedule)} steps, {steps} requested")
    state = init_state(root, schedule, seed, G, P)
    state = _record_densities(state)
    if dense_family is not None:
        state = replace(state, track=list(dense_family))
    error = None
    while state.n < steps:
        try:
            state = _record_densities(inductive_step(state))
        except ConstructionError as exc:
            error = exc
            break
    witness = None
    flat = []
    if error is None:
        tau = state.current().tau
        witness = multiplicity_witness(state.family, witness_eps, tau, G, P, coverage_goal, threshold)
        one = DensityGrid.constant(1.0, G)
        flat = [ratio_deviation(one, t.density, tau) for t in state.singles]
    conv = convergence_reports(state)
    return Trace(state, witness, conv, error, flat)


def _record_densities(state: ConstructionState) -> ConstructionState:
    """Snapshot the current step into ``history`` for reports and traces."""
    hist = list(state.history)
    hist[-1] = {
        **hist[-1],
        "densities": [t.density for t in state.singles],
        "subset": state.subset,
        "family": list(state.family),
        "singles": list(state.singles),
        "pairs": dict(state.pairs),
    }
    return replace(state, history=hist)


def lebesgue_track(
    state: ConstructionState,
    dense_family: Sequence[Observable],
    steps: int = 1,
) -> tuple[list[dict], ConstructionState]:
    """Carry a second family along ``steps`` inductive steps and report its distances.

    ``dense_family`` lives on the root; it is first restricted to the current
    subset. Each report entry lists ``d(sigma(h_j^{(n)}), psi_{j,n})`` where
    ``psi_{j,n}`` is the spread measure of the previous ``h_j``.
    """
    if not dense_family:
        return [], state
    carried = []
    for h in dense_family:
        if h.system is not state.root and h.system != state.root:
            raise ValueError("dense family must live on the root system")
        carried.append(Observable.centered(state.system, h.labels[state.subset], h.class_values)[0])
    state = replace(state, track=carried, track_report=[])
    if not state.history or "densities" not in state.history[-1]:
        state = _record_densities(state)
    for _ in range(steps):
        state = _record_densities(inductive_step(state))
    return list(state.track_report), state

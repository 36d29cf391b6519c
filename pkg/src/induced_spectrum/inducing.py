"""First-return maps, Rokhlin towers and inducing that imitates spreading."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np

from .circle_measures import CircleMeasure, spread_out, weak_distance
from .systems import FiniteSystem, Observable, Partition, make_rng, refine, spectral_measures

__all__ = [
    "InducedSystem",
    "Tower",
    "Restriction",
    "SpreadResult",
    "NonReturningOrbitError",
    "IndependenceError",
    "TowerError",
    "SpreadError",
    "induce",
    "kac_check",
    "restrict_observable",
    "partition_discrepancy",
    "independent_subset",
    "orbit_order",
    "rokhlin_tower",
    "renewal_subset",
    "spread_by_inducing",
    "attempt_log",
]


class NonReturningOrbitError(ValueError):
    def __init__(self, witness: int):
        super().__init__(f"non-returning orbit: the cycle of atom {witness} misses A")
        self.witness = witness


class IndependenceError(RuntimeError):
    def __init__(self, best: float, tol: float):
        super().__init__(f"no independent subset found: best discrepancy {best:.3g} > tol {tol:.3g}")
        self.best = best


class TowerError(ValueError):
    pass


class SpreadError(RuntimeError):
    def __init__(self, message: str, attempts: list[dict]):
        super().__init__(message)
        self.attempts = attempts

    @property
    def best_distances(self) -> list[float] | None:
        scored = [a for a in self.attempts if a.get("distances")]
        if not scored:
            return None
        return min(scored, key=lambda a: max(a["distances"]))["distances"]


@dataclass(frozen=True, eq=False)
class InducedSystem:
    """First-return structure of ``parent`` on the sorted atom list ``subset``.

    ``system`` is the induced map on positions ``0..|A|-1`` of ``subset``.
    """

    parent: FiniteSystem
    subset: np.ndarray
    return_time: np.ndarray
    system: FiniteSystem

    @property
    def induced_perm(self) -> np.ndarray:
        """``T_A`` in parent atom indices, aligned with ``subset``."""
        return self.subset[self.system.perm]

    @property
    def measure(self) -> float:
        return self.subset.size / self.parent.n_atoms

    def return_time_histogram(self) -> dict[int, int]:
        vals, counts = np.unique(self.return_time, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    def to_json(self, parent_ref: str = "parent") -> dict:
        return {
            "parent": parent_ref,
            "subset": self.subset.tolist(),
            "return_times": self.return_time.tolist(),
        }


def induce(s: FiniteSystem, A) -> InducedSystem:
    A = np.unique(np.asarray(A, dtype=np.int64))
    if A.size == 0:
        raise ValueError("A must be nonempty")
    if A[0] < 0 or A[-1] >= s.n_atoms:
        raise ValueError("A contains atoms outside the system")
    ncyc, ids = s.cycles()
    hit = np.zeros(ncyc, dtype=bool)
    hit[ids[A]] = True
    if not hit.all():
        missed = np.flatnonzero(~hit[ids])
        raise NonReturningOrbitError(int(missed[0]))
    in_a = np.zeros(s.n_atoms, dtype=bool)
    in_a[A] = True
    cur = s.perm[A].copy()
    r = np.ones(A.size, dtype=np.int64)
    active = np.flatnonzero(~in_a[cur])
    while active.size:
        cur[active] = s.perm[cur[active]]
        r[active] += 1
        active = active[~in_a[cur[active]]]
    pos = np.searchsorted(A, cur)
    system = FiniteSystem(pos, label=f"{s.label}|A")
    return InducedSystem(s, A, r, system)


def kac_check(ind: InducedSystem) -> tuple[Fraction, bool]:
    """Mean return time as an exact rational and whether it equals ``N/|A|``."""
    expected = Fraction(int(ind.return_time.sum()), int(ind.subset.size))
    return expected, expected == Fraction(ind.parent.n_atoms, int(ind.subset.size))


class Restriction(NamedTuple):
    observable: Observable
    mean_drift: complex


def restrict_observable(f: Observable, ind: InducedSystem) -> Restriction:
    """Copy ``f`` onto A and re-center it under the normalized measure on A."""
    if f.system is not ind.parent and f.system != ind.parent:
        raise ValueError("observable is not defined on the parent system")
    obs, drift = Observable.centered(ind.system, f.labels[ind.subset], f.class_values)
    return Restriction(obs, drift)


def partition_discrepancy(A, parts: Sequence[Partition], N: int) -> float:
    """``max_C | |A n C|/N - (|A|/N)(|C|/N) |`` over the joint refinement."""
    if not parts:
        return 0.0
    codes = refine(*[p.labels for p in parts])
    size = np.bincount(codes)
    inside = np.bincount(codes[np.asarray(A, dtype=np.int64)], minlength=size.size)
    dens = len(A) / N
    return float(np.abs(inside / N - dens * size / N).max())


def independent_subset(
    s: FiniteSystem,
    parts: Sequence[Partition],
    density: float,
    tol: float,
    seed: int,
    retries: int = 100,
) -> np.ndarray:
    """Sample a fraction ``density`` of every refinement class."""
    if not 0 < density < 1:
        raise ValueError("density must lie in (0, 1)")
    N = s.n_atoms
    codes = refine(*[p.labels for p in parts]) if parts else np.zeros(N, dtype=np.int64)
    order = np.argsort(codes, kind="stable")
    bounds = np.cumsum(np.bincount(codes))
    best = math.inf
    for attempt in range(retries):
        rng = make_rng(seed, attempt)
        chosen = []
        start = 0
        for stop in bounds:
            members = order[start:stop]
            k = int(round(density * members.size))
            chosen.append(rng.choice(members, size=k, replace=False))
            start = stop
        A = np.sort(np.concatenate(chosen))
        disc = partition_discrepancy(A, parts, N)
        gap = abs(A.size / N - density)
        best = min(best, max(disc, gap))
        if disc <= tol and gap <= tol:
            return A
    raise IndependenceError(best, tol)


def orbit_order(s: FiniteSystem) -> list[np.ndarray]:
    """Atoms of each cycle in orbit order, starting from the smallest atom."""
    perm = s.perm.tolist()
    seen = bytearray(s.n_atoms)
    out = []
    for start in range(s.n_atoms):
        if seen[start]:
            continue
        cyc = []
        x = start
        while not seen[x]:
            seen[x] = 1
            cyc.append(x)
            x = perm[x]
        out.append(np.asarray(cyc, dtype=np.int64))
    return out


@dataclass(frozen=True, eq=False)
class Tower:
    base: np.ndarray
    height: int
    levels: list[np.ndarray]
    residual: np.ndarray
    columns: list[np.ndarray] = field(default_factory=list)

    def residual_fraction(self, N: int) -> float:
        return self.residual.size / N


def rokhlin_tower(s: FiniteSystem, height: int, residual_bound: float) -> Tower:
    """Greedy tower: each cycle is cut into consecutive columns of ``height`` atoms."""
    if height < 1:
        raise ValueError("height must be at least 1")
    columns, residual = [], []
    worst = 0
    for cyc in orbit_order(s):
        k = cyc.size // height
        columns.extend(cyc[: k * height].reshape(k, height))
        rest = cyc[k * height :]
        residual.append(rest)
        if rest.size:
            worst = max(worst, cyc.size)
    residual = np.sort(np.concatenate(residual)) if residual else np.zeros(0, dtype=np.int64)
    if residual.size > residual_bound * s.n_atoms:
        raise TowerError(
            f"residual {residual.size}/{s.n_atoms} exceeds bound {residual_bound}; "
            f"offending cycle length {worst} < height/bound = {height / residual_bound:g}"
        )
    cols = np.asarray(columns, dtype=np.int64).reshape(-1, height)
    levels = [np.sort(cols[:, k]) for k in range(height)]
    return Tower(np.sort(cols[:, 0]), height, levels, residual, list(cols))


def renewal_subset(s: FiniteSystem, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Keep atoms along each orbit at gaps drawn i.i.d. from {1: 1-delta, 2: delta}.

    Every kept atom then returns to the subset after 1 or 2 steps, and the
    return times along an induced orbit form an i.i.d. (1-delta, delta) word
    drawn independently of any observable.
    """
    kept = []
    for cyc in orbit_order(s):
        gaps = 1 + (rng.random(cyc.size) < delta)
        pos = np.concatenate([[0], np.cumsum(gaps)])
        kept.append(cyc[pos[pos < cyc.size]])
    return np.sort(np.concatenate(kept))


def attempt_log(attempts: Sequence[dict]) -> str:
    """One JSON object per attempt and line: index, seed, distances, accepted."""
    return "".join(json.dumps(a, sort_keys=True) + "\n" for a in attempts)


@dataclass
class SpreadResult:
    induced: InducedSystem
    observables: list[Observable]
    distances: list[float]
    drifts: list[complex]
    targets: list[CircleMeasure]
    delta: float
    attempts: list[dict]

    @property
    def deleted_fraction(self) -> float:
        return 1.0 - self.induced.measure


def spread_by_inducing(
    s: FiniteSystem,
    fs: Sequence[Observable],
    delta: float,
    rho_prime: float,
    max_tries: int,
    seed: int,
    P: int = 64,
) -> SpreadResult:
    """Find A whose induced spectral measures approach the spread measures.

    Attempts are tried in order; attempt ``k`` draws from stream ``(seed, k)``.
    An attempt is accepted when ``|A^c|/N < 2 delta``, A is independent of the
    observables' partitions within ``rho_prime / 10`` and every re-induced
    observable lies within ``rho_prime`` of its spread target.
    """
    if not 0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    if rho_prime <= 0:
        raise ValueError("rho_prime must be positive")
    attempts: list[dict] = []
    if max_tries <= 0:
        raise SpreadError("no attempts allowed", attempts)
    N = s.n_atoms
    targets = [spread_out(m, delta, P) for m in spectral_measures(fs, 2 * P)]
    parts = [f.partition for f in fs]
    tol = rho_prime / 10
    for k in range(max_tries):
        rng = make_rng(seed, k)
        A = renewal_subset(s, delta, rng)
        deleted = 1.0 - A.size / N
        disc = partition_discrepancy(A, parts, N)
        record = {"attempt": k, "seed": int(seed), "deleted": deleted, "discrepancy": disc,
                  "distances": [], "accepted": False}
        attempts.append(record)
        if deleted >= 2 * delta or disc > tol:
            continue
        ind = induce(s, A)
        restricted = [restrict_observable(f, ind) for f in fs]
        measured = spectral_measures([r.observable for r in restricted], P)
        dists = [weak_distance(m, t) for m, t in zip(measured, targets)]
        record["distances"] = dists
        if all(d < rho_prime for d in dists):
            record["accepted"] = True
            return SpreadResult(
                ind,
                [r.observable for r in restricted],
                dists,
                [r.mean_drift for r in restricted],
                targets,
                float(delta),
                attempts,
            )
    raise SpreadError(f"tolerance {rho_prime} not met within {max_tries} attempts", attempts)

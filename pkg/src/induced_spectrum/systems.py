"""Equal-weight permutation systems, simple observables and Koopman correlations.

An N-atom system gives every atom mass 1/N, so any permutation preserves
the measure. Observables are simple functions: an integer class label per
atom plus one complex value per class. Correlations are computed from
joint class counts, which are exact integers, so results do not depend on
the order atoms are visited in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .circle_measures import CircleMeasure

__all__ = [
    "FiniteSystem",
    "Partition",
    "Observable",
    "SkewSampler",
    "ConsistencyError",
    "CrossSpectrum",
    "make_rng",
    "build_cyclic",
    "product",
    "bernoulli_approx",
    "correlation",
    "correlation_table",
    "spectral_measure",
    "cross_spectral",
    "meilijson_mc",
]

MAX_ATOMS = 2**24
ZERO_MEAN_TOL = 1e-12


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 stream ``stream`` derived from a root seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(stream))))


class ConsistencyError(RuntimeError):
    """Direct and polarized cross tables disagree."""


@dataclass(frozen=True, eq=False)
class FiniteSystem:
    perm: np.ndarray
    label: str = ""

    def __post_init__(self):
        perm = np.array(self.perm, dtype=np.int64).reshape(-1)
        N = perm.size
        if N < 1:
            raise ValueError("a system needs at least one atom")
        if perm.min() < 0 or perm.max() >= N:
            raise ValueError("perm entries out of range")
        inv = np.full(N, -1, dtype=np.int64)
        inv[perm] = np.arange(N)
        if np.any(inv < 0):
            raise ValueError("perm is not a bijection")
        perm.setflags(write=False)
        inv.setflags(write=False)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "_inverse", inv)

    @property
    def n_atoms(self) -> int:
        return self.perm.size

    @property
    def inverse(self) -> np.ndarray:
        return self._inverse

    def power(self, n: int) -> np.ndarray:
        """Index array of ``T**n`` (negative ``n`` uses the inverse)."""
        step = self.perm if n >= 0 else self._inverse
        idx = np.arange(self.n_atoms)
        for _ in range(abs(n)):
            idx = step[idx]
        return idx

    def cycles(self) -> tuple[int, np.ndarray]:
        """Number of cycles and the cycle id of every atom."""
        N = self.n_atoms
        graph = csr_matrix((np.ones(N), (np.arange(N), self.perm)), shape=(N, N))
        return connected_components(graph, directed=True, connection="weak")

    def cycle_lengths(self) -> list[int]:
        _, ids = self.cycles()
        return np.bincount(ids).tolist()

    def __eq__(self, other):
        if not isinstance(other, FiniteSystem):
            return NotImplemented
        return np.array_equal(self.perm, other.perm)

    __hash__ = None

    def to_json(self) -> dict:
        return {"N": self.n_atoms, "perm": self.perm.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "FiniteSystem":
        s = cls(data["perm"], label=data.get("label", ""))
        if s.n_atoms != int(data["N"]):
            raise ValueError(f"N={data['N']} but perm has {s.n_atoms} entries")
        return s


@dataclass(frozen=True, eq=False)
class Partition:
    """Class code per atom; ``symbols`` optionally names the codes."""

    labels: np.ndarray
    symbols: tuple = ()

    def __post_init__(self):
        labels = np.array(self.labels).reshape(-1)
        if labels.dtype.kind not in "iu":
            _, labels = np.unique(labels, return_inverse=True)
        labels = labels.astype(np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def classes(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(np.bincount(self.labels))[:-1]
        return np.split(order, bounds)

    @classmethod
    def trivial(cls, N: int) -> "Partition":
        return cls(np.zeros(N, dtype=np.int64))


def refine(*label_arrays: np.ndarray) -> np.ndarray:
    """Compact class codes of the joint refinement of several labelings."""
    stacked = np.stack([np.asarray(a, dtype=np.int64) for a in label_arrays])
    _, codes = np.unique(stacked, axis=1, return_inverse=True)
    return codes.reshape(-1).astype(np.int64)


class Observable:
    """Zero-mean simple function on a :class:`FiniteSystem`."""

    def __init__(self, system: FiniteSystem, labels, class_values):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        class_values = np.asarray(class_values, dtype=complex).reshape(-1)
        if labels.size != system.n_atoms:
            raise ValueError(f"{labels.size} labels for a {system.n_atoms}-atom system")
        if labels.size and (labels.min() < 0 or labels.max() >= class_values.size):
            raise ValueError("labels reference missing classes")
        self.system = system
        self.labels = labels
        self.class_values = class_values
        self.counts = np.bincount(labels, minlength=class_values.size)
        m = self.mean
        if abs(m) > ZERO_MEAN_TOL * max(1.0, np.abs(class_values).max(initial=0.0)):
            raise ValueError(f"observable mean {m:.3g} is not zero")

    @property
    def mean(self) -> complex:
        return complex(self.counts @ self.class_values / self.system.n_atoms)

    @property
    def values(self) -> np.ndarray:
        return self.class_values[self.labels]

    @property
    def partition(self) -> Partition:
        return Partition(self.labels)

    @property
    def n_classes(self) -> int:
        return self.class_values.size

    def norm_sq(self) -> float:
        return float(self.counts @ np.abs(self.class_values) ** 2 / self.system.n_atoms)

    @classmethod
    def centered(cls, system: FiniteSystem, labels, class_values) -> tuple["Observable", complex]:
        """Build from arbitrary class values, subtracting the mean; returns the mean too."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        class_values = np.asarray(class_values, dtype=complex).reshape(-1)
        counts = np.bincount(labels, minlength=class_values.size)
        mean = complex(counts @ class_values / system.n_atoms)
        return cls(system, labels, class_values - mean), mean

    @classmethod
    def from_values(cls, system: FiniteSystem, values, center: bool = False) -> "Observable":
        """Classes are the level sets of ``values``."""
        uniq, labels = np.unique(np.asarray(values, dtype=complex), return_inverse=True)
        if center:
            return cls.centered(system, labels, uniq)[0]
        return cls(system, labels, uniq)

    @classmethod
    def from_partition(cls, system: FiniteSystem, partition: Partition) -> "Observable":
        """Centered observable taking the partition symbols as values."""
        vals = partition.symbols or tuple(range(partition.n_classes))
        return cls.centered(system, partition.labels, np.asarray(vals, dtype=complex))[0]

    def compose(self, n: int = 1) -> "Observable":
        """``f o T**n``."""
        return Observable(self.system, self.labels[self.system.power(n)], self.class_values)

    def combine(self, other: "Observable", eta: complex = 1.0) -> "Observable":
        """``self + eta * other`` on the joint refinement."""
        _same_system(self, other)
        codes = refine(self.labels, other.labels)
        first = np.zeros(codes.max() + 1, dtype=np.int64)
        first[codes] = np.arange(codes.size)
        vals = self.class_values[self.labels[first]] + eta * other.class_values[other.labels[first]]
        return Observable(self.system, codes, vals)

    def __add__(self, other: "Observable") -> "Observable":
        return self.combine(other, 1.0)

    def __mul__(self, c: complex) -> "Observable":
        return Observable(self.system, self.labels, self.class_values * c)

    __rmul__ = __mul__

    def to_json(self) -> dict:
        return {
            "N": self.system.n_atoms,
            "values": [[float(v.real), float(v.imag)] for v in self.class_values],
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_json(cls, system: FiniteSystem, data: dict) -> "Observable":
        return cls(system, data["labels"], [complex(re, im) for re, im in data["values"]])


def _same_system(f: Observable, g: Observable):
    if f.system is not g.system and f.system != g.system:
        raise ValueError("observables live on different systems")


def build_cyclic(N: int, label: str = "") -> FiniteSystem:
    if N < 1:
        raise ValueError("N must be at least 1")
    return FiniteSystem(np.roll(np.arange(N), -1), label=label or f"cyclic({N})")


def product(s1: FiniteSystem, s2: FiniteSystem, cap: int = MAX_ATOMS) -> FiniteSystem:
    """``T1 x T2`` on atoms ``(i, j) -> i * N2 + j``."""
    N1, N2 = s1.n_atoms, s2.n_atoms
    if N1 * N2 > cap:
        raise ValueError(f"product has {N1 * N2} atoms, above the cap {cap}")
    perm = (s1.perm[:, None] * N2 + s2.perm[None, :]).reshape(-1)
    return FiniteSystem(perm, label=f"{s1.label}x{s2.label}")


def bernoulli_approx(half_window: int, seed: int) -> tuple[FiniteSystem, Partition]:
    """Cyclic system of ``2**L`` atoms with a fair-coin labeling (symbols -1, +1)."""
    if half_window < 1:
        raise ValueError("half_window must be at least 1")
    N = 2**half_window
    labels = make_rng(seed).integers(0, 2, size=N)
    return build_cyclic(N, label=f"bernoulli({half_window})"), Partition(labels, symbols=(-1, 1))


def _pair_sum(f: Observable, g: Observable, idx: np.ndarray) -> complex:
    kg = g.n_classes
    cnt = np.bincount(f.labels[idx] * kg + g.labels, minlength=f.n_classes * kg)
    weights = np.outer(f.class_values, np.conj(g.class_values)).reshape(-1)
    return complex(weights @ cnt / f.system.n_atoms)


def correlation(f: Observable, g: Observable, n: int) -> complex:
    """``<U^n f, g> = (1/N) sum_x f(T^n x) conj(g(x))``."""
    _same_system(f, g)
    if n == 0 and f is g:
        return complex(f.norm_sq())
    return _pair_sum(f, g, f.system.power(n))


def correlation_table(f: Observable, g: Observable, P: int) -> np.ndarray:
    """``<U^p f, g>`` for p = 0..P."""
    _same_system(f, g)
    perm = f.system.perm
    idx = np.arange(f.system.n_atoms)
    out = np.empty(P + 1, dtype=complex)
    for p in range(P + 1):
        out[p] = _pair_sum(f, g, idx)
        idx = perm[idx]
    return out


def correlation_tables(fs: Sequence[Observable], P: int) -> np.ndarray:
    """Autocorrelation tables of several observables, shape ``(len(fs), P + 1)``."""
    if not fs:
        return np.zeros((0, P + 1), dtype=complex)
    for f in fs[1:]:
        _same_system(fs[0], f)
    perm = fs[0].system.perm
    idx = np.arange(fs[0].system.n_atoms)
    out = np.empty((len(fs), P + 1), dtype=complex)
    for p in range(P + 1):
        for k, f in enumerate(fs):
            out[k, p] = _pair_sum(f, f, idx)
        idx = perm[idx]
    return out


def spectral_measure(f: Observable, P: int) -> CircleMeasure:
    """Coefficients ``<U^p f, f>``, p = 0..P."""
    if P < 1:
        raise ValueError("P must be at least 1")
    table = correlation_table(f, f, P)
    table[0] = f.norm_sq()
    return CircleMeasure(table)


def spectral_measures(fs: Sequence[Observable], P: int) -> list[CircleMeasure]:
    tables = correlation_tables(fs, P)
    out = []
    for f, row in zip(fs, tables):
        row[0] = f.norm_sq()
        out.append(CircleMeasure(row))
    return out


@dataclass(frozen=True)
class CrossSpectrum:
    """``direct[P + p] = <U^p f, g>`` for p = -P..P, and its polarized twin."""

    direct: np.ndarray
    polarized: np.ndarray

    @property
    def max_order(self) -> int:
        return self.direct.size // 2

    def max_gap(self) -> float:
        return float(np.abs(self.direct - self.polarized).max())


def _full_cross(f: Observable, g: Observable, P: int) -> np.ndarray:
    fg = correlation_table(f, g, P)
    gf = correlation_table(g, f, P)
    # <U^-p f, g> = conj(<U^p g, f>)
    return np.concatenate([np.conj(gf[:0:-1]), fg])


def cross_spectral(f: Observable, g: Observable, P: int, tol: float = 1e-8) -> CrossSpectrum:
    """Direct cross table and its reconstruction from four spectral measures.

    With ``S_eta = sigma(f + eta g) - sigma(f) - sigma(g)`` one has
    ``c = (S_1 + i S_i) / 2``.
    """
    _same_system(f, g)
    direct = _full_cross(f, g, P)
    sf, sg = spectral_measure(f, P).full(), spectral_measure(g, P).full()
    s1 = spectral_measure(f.combine(g, 1.0), P).full() - sf - sg
    si = spectral_measure(f.combine(g, 1j), P).full() - sf - sg
    polarized = (s1 + 1j * si) / 2
    out = CrossSpectrum(direct, polarized)
    if out.max_gap() > tol:
        raise ConsistencyError(f"polarization mismatch {out.max_gap():.3g} exceeds {tol}")
    return out


class SkewSampler:
    """i.i.d. symbols in {1, 2} with probabilities ``(1 - delta, delta)``.

    Fiber action of the skew product applies ``T**omega`` over the fiber.
    """

    def __init__(self, fiber: FiniteSystem, delta: float, seed: int):
        if not 0 < delta <= 0.5:
            raise ValueError(f"delta must lie in (0, 1/2], got {delta}")
        self.fiber = fiber
        self.delta = float(delta)
        self.seed = int(seed)
        self._rng = make_rng(seed)

    def words(self, length: int, count: int) -> np.ndarray:
        return 1 + (self._rng.random((count, length)) < self.delta)

    def word_sums(self, length: int, count: int, chunk: int = 1 << 16) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        for start in range(0, count, chunk):
            stop = min(count, start + chunk)
            out[start:stop] = self.words(length, stop - start).sum(axis=1)
        return out

    def advance(self, x: np.ndarray, word: np.ndarray) -> np.ndarray:
        """Fiber coordinate after applying the word symbol by symbol."""
        x = np.asarray(x)
        for w in word:
            x = self.fiber.perm[self.fiber.perm[x]] if w == 2 else self.fiber.perm[x]
        return x


def meilijson_mc(f: Observable, delta: float, p: int, samples: int, seed: int) -> complex:
    """Average of ``<U^{w_0+...+w_{p-1}} f, f>`` over random (1-delta, delta) words."""
    if p < 1 or samples < 1:
        raise ValueError("p and samples must be positive")
    if delta == 0:
        return correlation(f, f, p)
    table = correlation_table(f, f, 2 * p)
    sums = SkewSampler(f.system, delta, seed).word_sums(p, samples)
    hist = np.bincount(sums, minlength=2 * p + 1)
    return complex(hist @ table / samples)

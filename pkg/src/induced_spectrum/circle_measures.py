"""Positive measures on the circle, stored by truncated Fourier coefficients.

Angles are radians in [0, 2*pi). Coefficients follow
``sigma_hat(p) = integral of exp(-i p t) d sigma(t)``, so a density ``phi``
has ``phi(t) = sum_p sigma_hat(p) exp(i p t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, xlog1py, xlogy

__all__ = [
    "CircleMeasure",
    "AtomicMeasure",
    "DensityGrid",
    "GoodSpec",
    "ConvergenceReport",
    "ScheduleError",
    "from_density",
    "to_density",
    "weak_distance",
    "spread_out",
    "spread_weights",
    "is_good",
    "strong_close",
    "ratio_deviation",
    "off_gap_mask",
    "check_convergence",
    "lebesgue",
    "dirac",
]

DEFAULT_ORDER = 64


class ScheduleError(ValueError):
    """A schedule entry violates ``eps_n < min(2**-n, alpha_n / 2)``."""

    def __init__(self, index: int, message: str):
        super().__init__(f"schedule violation at n={index}: {message}")
        self.index = index


@dataclass(frozen=True, eq=False)
class CircleMeasure:
    """Truncated coefficients ``sigma_hat(0..P)``; negative orders by conjugation."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex).reshape(-1)
        if c.size < 2:
            raise ValueError("need at least orders 0 and 1")
        if abs(c[0].imag) > 1e-12 * max(1.0, abs(c[0].real)):
            raise ValueError("sigma_hat(0) must be real")
        c[0] = c[0].real
        if c[0].real < -1e-12:
            raise ValueError("mass must be nonnegative")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def max_order(self) -> int:
        return self.coeffs.size - 1

    @property
    def mass(self) -> float:
        return float(self.coeffs[0].real)

    def coefficient(self, p: int) -> complex:
        if abs(p) > self.max_order:
            raise IndexError(f"order {p} beyond max_order {self.max_order}")
        c = self.coeffs[abs(p)]
        return complex(c if p >= 0 else np.conj(c))

    def full(self) -> np.ndarray:
        """Coefficients for p = -P..P."""
        return np.concatenate([np.conj(self.coeffs[:0:-1]), self.coeffs])

    def truncate(self, P: int) -> "CircleMeasure":
        if P > self.max_order:
            raise ValueError(f"cannot truncate order {self.max_order} to {P}")
        return CircleMeasure(self.coeffs[: P + 1])

    def __add__(self, other: "CircleMeasure") -> "CircleMeasure":
        P = min(self.max_order, other.max_order)
        return CircleMeasure(self.coeffs[: P + 1] + other.coeffs[: P + 1])

    def scaled(self, factor: float) -> "CircleMeasure":
        return CircleMeasure(self.coeffs * float(factor))

    def is_positive(self, tol: float = 1e-9) -> bool:
        """Toeplitz certificate: ``[sigma_hat(i - j)]`` is PSD up to ``tol``."""
        from scipy.linalg import toeplitz

        col = self.coeffs
        mat = toeplitz(col, np.conj(col))
        return bool(np.linalg.eigvalsh(mat).min() >= -tol * max(1.0, self.mass))

    @classmethod
    def from_full(cls, full: Sequence[complex]) -> "CircleMeasure":
        full = np.asarray(full, dtype=complex)
        if full.size % 2 == 0:
            raise ValueError("full coefficient list must have odd length 2P+1")
        P = full.size // 2
        pos, neg = full[P:], full[:P][::-1]
        if not np.allclose(neg, np.conj(pos[1:]), rtol=0, atol=1e-12):
            raise ValueError("coefficients are not Hermitian-symmetric")
        return cls(pos)

    def to_json(self) -> dict:
        return {"P": self.max_order, "coeffs": [[float(c.real), float(c.imag)] for c in self.full()]}

    @classmethod
    def from_json(cls, data: dict) -> "CircleMeasure":
        coeffs = [complex(re, im) for re, im in data["coeffs"]]
        m = cls.from_full(coeffs)
        if m.max_order != int(data["P"]):
            raise ValueError(f"P={data['P']} does not match {len(coeffs)} coefficients")
        return m


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    """Finite sum of weighted Dirac masses, kept exact for spreading."""

    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.mod(np.asarray(self.positions, dtype=float).reshape(-1), 2 * np.pi)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pos.shape != w.shape:
            raise ValueError("positions and weights differ in length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def moments(self, z: np.ndarray, P: int) -> np.ndarray:
        """``sum_k w_k z_k**p`` for p = 0..P."""
        powers = np.power.outer(z, np.arange(P + 1))
        return self.weights @ powers

    def coefficients(self, P: int) -> CircleMeasure:
        return CircleMeasure(self.moments(np.exp(-1j * self.positions), P))


def lebesgue(P: int = DEFAULT_ORDER, mass: float = 1.0) -> CircleMeasure:
    c = np.zeros(P + 1, dtype=complex)
    c[0] = mass
    return CircleMeasure(c)


def dirac(t: float, P: int = DEFAULT_ORDER, mass: float = 1.0) -> CircleMeasure:
    return AtomicMeasure([t], [mass]).coefficients(P)


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Nonnegative density sampled at ``theta_k = 2*pi*k/G``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        G = v.size
        if G < 256 or G & (G - 1):
            raise ValueError(f"grid size must be a power of two >= 256, got {G}")
        if np.any(v < 0):
            raise ValueError("density values must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def grid_size(self) -> int:
        return self.values.size

    @property
    def mass(self) -> float:
        return float(self.values.mean())

    @property
    def theta(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.grid_size) / self.grid_size

    @classmethod
    def constant(cls, value: float, G: int = 256) -> "DensityGrid":
        return cls(np.full(G, float(value)))

    @classmethod
    def from_function(cls, func, G: int = 256) -> "DensityGrid":
        return cls(func(2 * np.pi * np.arange(G) / G))

    def __add__(self, other) -> "DensityGrid":
        if isinstance(other, DensityGrid):
            _same_grid(self, other)
            return DensityGrid(self.values + other.values)
        return DensityGrid(self.values + float(other))

    def to_json(self) -> dict:
        return {"G": self.grid_size, "values": [float(v) for v in self.values]}

    @classmethod
    def from_json(cls, data: dict) -> "DensityGrid":
        d = cls(data["values"])
        if d.grid_size != int(data["G"]):
            raise ValueError(f"G={data['G']} does not match {d.grid_size} values")
        return d

    def to_csv(self) -> str:
        rows = ["theta,value"]
        rows += [f"{t:.17g},{v:.17g}" for t, v in zip(self.theta, self.values)]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "DensityGrid":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "theta,value":
            raise ValueError("density CSV must start with header 'theta,value'")
        values = []
        for lineno, ln in enumerate(lines[1:], start=2):
            try:
                t, v = ln.split(",")
                float(t)
                values.append(float(v))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: malformed row {ln!r}") from exc
        return cls(values)


@dataclass(frozen=True)
class GoodSpec:
    alpha: float
    tau: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.tau < np.pi:
            raise ValueError("tau must lie in (0, pi)")


def _same_grid(a: DensityGrid, b: DensityGrid):
    if a.grid_size != b.grid_size:
        raise ValueError(f"grid mismatch: {a.grid_size} vs {b.grid_size}")


def from_density(d: DensityGrid, P: int) -> CircleMeasure:
    """Rectangle-rule Fourier coefficients of ``phi(t) dt / 2pi``."""
    G = d.grid_size
    if G < 4 * P:
        raise ValueError(f"grid too coarse: G={G} < 4P={4 * P}")
    coeffs = np.fft.fft(d.values)[: P + 1] / G
    return CircleMeasure(coeffs)


def fejer_weights(order: int) -> np.ndarray:
    return 1.0 - np.arange(order + 1) / (order + 1)


def _fejer_values(coeffs: np.ndarray, G: int, order: int) -> np.ndarray:
    """Real Fejer sum on the grid for one-sided coefficients (may be a stack)."""
    coeffs = np.asarray(coeffs)
    w = fejer_weights(order)
    c = coeffs[..., : order + 1] * w
    spec = np.zeros(coeffs.shape[:-1] + (G,), dtype=complex)
    spec[..., : order + 1] = c
    spec[..., G - order :] = np.conj(c[..., :0:-1])
    return np.fft.ifft(spec, axis=-1) * G


def to_density(m: CircleMeasure, G: int = 256, order: int | None = None) -> DensityGrid:
    """Fejer mean of order ``order`` on a G-point grid."""
    order = m.max_order if order is None else order
    if order > m.max_order:
        raise ValueError(f"order {order} exceeds max_order {m.max_order}")
    if G <= 2 * order:
        raise ValueError(f"grid size {G} must exceed twice the order {order}")
    vals = _fejer_values(m.coeffs, G, order).real
    floor = -1e-9 * max(1.0, m.mass)
    if vals.min() < floor:
        raise ValueError(f"Fejer mean is negative ({vals.min():.3g}); not a positive measure")
    return DensityGrid(np.maximum(vals, 0.0))


def weak_distance(a: CircleMeasure, b: CircleMeasure) -> float:
    """``sum_{|p|<=P} 2**-|p| |a_hat(p) - b_hat(p)|``."""
    if a.max_order != b.max_order:
        raise ValueError(f"order mismatch: {a.max_order} vs {b.max_order}")
    diff = np.abs(a.coeffs - b.coeffs)
    w = 2.0 ** -np.arange(a.max_order + 1)
    w[1:] *= 2.0
    return float(diff @ w)


def _z(delta: float, t: np.ndarray) -> np.ndarray:
    return (1 - delta) * np.exp(-1j * t) + delta * np.exp(-2j * t)


def spread_weights(delta: float, p: int) -> np.ndarray:
    """Law of the number of doubled steps among ``p`` (1-delta, delta) coin flips."""
    k = np.arange(p + 1)
    log_w = gammaln(p + 1) - gammaln(k + 1) - gammaln(p - k + 1) + xlogy(k, delta) + xlog1py(p - k, -delta)
    return np.exp(log_w)


def spread_out(m, delta: float, P: int | None = None) -> CircleMeasure:
    """The measure with coefficients ``integral z_delta(t)**p d sigma(t)``.

    ``m`` may be an :class:`AtomicMeasure` (exact sum), a :class:`DensityGrid`
    (rectangle rule, requires ``G >= 8P``) or a :class:`CircleMeasure` of order
    at least ``2P``; expanding ``z**p`` binomially makes the last form exact.
    """
    if not 0 <= delta <= 0.5:
        raise ValueError(f"delta must lie in [0, 1/2], got {delta}")
    if isinstance(m, AtomicMeasure):
        P = DEFAULT_ORDER if P is None else P
        out = m.moments(_z(delta, m.positions), P)
        out[0] = m.mass
        return CircleMeasure(out)
    if isinstance(m, DensityGrid):
        P = DEFAULT_ORDER if P is None else P
        if m.grid_size < 8 * P:
            raise ValueError(f"grid too coarse for spreading: G={m.grid_size} < 8P={8 * P}")
        z = _z(delta, m.theta)
        out = (m.values @ np.power.outer(z, np.arange(P + 1))) / m.grid_size
        out[0] = m.mass
        return CircleMeasure(out)
    if isinstance(m, CircleMeasure):
        P = m.max_order // 2 if P is None else P
        if m.max_order < 2 * P:
            raise ValueError(f"need coefficients up to order {2 * P}, have {m.max_order}")
        if delta == 0:
            return m.truncate(P)
        out = np.empty(P + 1, dtype=complex)
        out[0] = m.mass
        for p in range(1, P + 1):
            out[p] = spread_weights(delta, p) @ m.coeffs[p : 2 * p + 1]
        return CircleMeasure(out)
    raise TypeError(f"cannot spread {type(m).__name__}")


def off_gap_mask(G: int, tau: float) -> np.ndarray:
    """Grid points whose angular distance to 0 exceeds ``tau``."""
    theta = 2 * np.pi * np.arange(G) / G
    return np.minimum(theta, 2 * np.pi - theta) > tau


def is_good(d: DensityGrid, spec: GoodSpec) -> bool:
    if np.any(d.values < 0):
        return False
    return bool(np.all(d.values[off_gap_mask(d.grid_size, spec.tau)] > spec.alpha))


def ratio_deviation(a: DensityGrid, b: DensityGrid, tau: float) -> float:
    """Smallest eps with ``a/(1+eps) <= b <= (1+eps) a`` off ``(-tau, tau)``."""
    _same_grid(a, b)
    mask = off_gap_mask(a.grid_size, tau)
    x, y = a.values[mask], b.values[mask]
    if x.size == 0:
        return 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.maximum(y / x, x / y)
    r = np.where((x == 0) & (y == 0), 1.0, r)
    r = np.where(np.isnan(r), np.inf, r)
    return float(r.max() - 1.0)


def strong_close(a: DensityGrid, b: DensityGrid, eps: float, tau: float) -> bool:
    """``b`` is eps-strongly close to the reference ``a`` off ``(-tau, tau)``."""
    _same_grid(a, b)
    mask = off_gap_mask(a.grid_size, tau)
    x, y = a.values[mask], b.values[mask]
    return bool(np.all(x / (1 + eps) <= y) and np.all(y <= (1 + eps) * x))


@dataclass
class ConvergenceReport:
    start: int
    good: list[bool] = field(default_factory=list)
    close: list[bool] = field(default_factory=list)
    weak: list[bool] = field(default_factory=list)
    weak_distances: list[float] = field(default_factory=list)
    cauchy: dict[float, list[float]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.good) and all(self.close) and all(self.weak)

    def failures(self) -> list[tuple[str, int]]:
        """(check, n) pairs for every failed check, n counted from ``start``."""
        out = []
        for name, flags in (("good", self.good), ("close", self.close), ("weak", self.weak)):
            out += [(name, self.start + k) for k, ok in enumerate(flags) if not ok]
        return sorted(out, key=lambda t: t[1])

    def to_json(self) -> dict:
        return {
            "start": self.start,
            "passed": self.passed,
            "good": self.good,
            "close": self.close,
            "weak": self.weak,
            "weak_distances": self.weak_distances,
            "cauchy": {f"{t:.17g}": gaps for t, gaps in self.cauchy.items()},
        }


def validate_schedule(schedule, start: int = 1):
    """Raise :class:`ScheduleError` on the first entry breaking the eps bound."""
    for k, (alpha, tau, eps, rho) in enumerate(schedule):
        n = start + k
        if not alpha > 0:
            raise ScheduleError(n, f"alpha={alpha} must be positive")
        if not eps < min(2.0**-n, alpha / 2):
            raise ScheduleError(n, f"eps={eps} >= min(2^-{n}, alpha/2)={min(2.0**-n, alpha / 2)}")
        if not rho > 0:
            raise ScheduleError(n, f"rho={rho} must be positive")
        if k and tau >= schedule[k - 1][1]:
            raise ScheduleError(n, "tau must be strictly decreasing")


def check_convergence(
    phis: Sequence[DensityGrid],
    sigmas: Sequence[CircleMeasure],
    schedule: Sequence[tuple[float, float, float, float]],
    start: int = 1,
    cauchy_taus: Sequence[float] = (np.pi / 2, np.pi / 4, np.pi / 8),
) -> ConvergenceReport:
    """Check goodness, strong closeness of successive densities and weak closeness.

    ``schedule[k]`` is ``(alpha, tau, eps, rho)`` for step ``n = start + k``.
    """
    if not (len(phis) == len(sigmas) == len(schedule)):
        raise ValueError("phis, sigmas and schedule must have equal length")
    validate_schedule(schedule, start)
    report = ConvergenceReport(start=start)
    for k, (phi, sigma, (alpha, tau, eps, rho)) in enumerate(zip(phis, sigmas, schedule)):
        report.good.append(is_good(phi, GoodSpec(alpha, tau)))
        if k + 1 < len(phis):
            report.close.append(strong_close(phi, phis[k + 1], eps, tau))
        d = weak_distance(sigma, from_density(phi, sigma.max_order))
        report.weak_distances.append(d)
        report.weak.append(d < rho)
    theta = phis[0].theta
    dist = np.minimum(theta, 2 * np.pi - theta)
    for t in cauchy_taus:
        mask = dist >= t - 1e-12
        report.cauchy[float(t)] = [
            float(np.abs(b.values - a.values)[mask].max()) for a, b in zip(phis, phis[1:])
        ]
    return report

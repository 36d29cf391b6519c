"""Cross-spectral density matrices and a finite multiplicity witness.

If m observables have flat spectral densities and are pairwise nearly
orthogonal under every Koopman shift, their smoothed Gram field is close
to the identity; wherever its smallest eigenvalue stays away from zero,
the spectral multiplicity is at least m.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .circle_measures import DensityGrid, _fejer_values, off_gap_mask, ratio_deviation, to_density
from .systems import Observable, _full_cross, _same_system, spectral_measure

__all__ = [
    "DensityMatrixField",
    "MultiplicityCertificate",
    "density_matrix",
    "multiplicity_witness",
    "flatness_report",
]


@dataclass(frozen=True, eq=False)
class DensityMatrixField:
    order: int
    matrices: np.ndarray  # (G, m, m)

    @property
    def grid_size(self) -> int:
        return self.matrices.shape[0]

    @property
    def size(self) -> int:
        return self.matrices.shape[1]

    @property
    def theta(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.grid_size) / self.grid_size

    def diagonal(self, i: int) -> np.ndarray:
        return self.matrices[:, i, i].real

    def lambda_min(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrices)[:, 0]


def density_matrix(fs: Sequence[Observable], G: int = 256, P: int = 64) -> DensityMatrixField:
    """Fejer-smoothed densities of the cross tables ``p -> <U^p f_i, f_j>``."""
    if not fs:
        raise ValueError("need at least one observable")
    for f in fs[1:]:
        _same_system(fs[0], f)
    if G < 4 * P:
        raise ValueError(f"grid too coarse: G={G} < 4P={4 * P}")
    m = len(fs)
    out = np.zeros((G, m, m), dtype=complex)
    w = np.concatenate([1 - np.arange(P, 0, -1) / (P + 1), 1 - np.arange(P + 1) / (P + 1)])
    for i, f in enumerate(fs):
        out[:, i, i] = to_density(spectral_measure(f, P), G, P).values
        for j in range(i + 1, m):
            full = _full_cross(f, fs[j], P) * w
            spec = np.zeros(G, dtype=complex)
            spec[: P + 1] = full[P:]
            spec[G - P :] = full[:P]
            vals = np.fft.ifft(spec) * G
            out[:, i, j] = vals
            out[:, j, i] = np.conj(vals)
    return DensityMatrixField(P, out)


@dataclass
class MultiplicityCertificate:
    family_size: int
    epsilon: float
    tau: float
    threshold: float
    coverage_goal: float
    coverage: float
    certified_bound: int
    flatness: list[float]
    pair_deviations: dict[str, float]
    failures: list[dict] = field(default_factory=list)
    lambda_min: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    grid_size: int = 256
    order: int = 64

    def to_json(self) -> dict:
        return {
            "family_size": self.family_size,
            "epsilon": self.epsilon,
            "tau": self.tau,
            "threshold": self.threshold,
            "coverage_goal": self.coverage_goal,
            "coverage": self.coverage,
            "certified_bound": self.certified_bound,
            "flatness": self.flatness,
            "pair_deviations": self.pair_deviations,
            "failures": self.failures,
            "grid_size": self.grid_size,
            "order": self.order,
        }

    def lambda_csv(self) -> str:
        theta = 2 * np.pi * np.arange(self.lambda_min.size) / max(1, self.lambda_min.size)
        rows = ["theta,lambda_min"] + [f"{t:.17g},{v:.17g}" for t, v in zip(theta, self.lambda_min)]
        return "\n".join(rows) + "\n"


def _eta_name(eta: complex) -> str:
    eta = complex(eta)
    if eta == 1j:
        return "i"
    if eta == -1j:
        return "-i"
    return f"{eta.real:g}"


def _worst_theta(ref: np.ndarray, d: np.ndarray, tau: float) -> float:
    G = d.size
    mask = off_gap_mask(G, tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.maximum(d / ref, ref / d)
    r = np.where(mask, np.nan_to_num(r, nan=np.inf), -np.inf)
    return float(2 * np.pi * int(np.argmax(r)) / G)


def multiplicity_witness(
    fs: Sequence[Observable],
    eps: float,
    tau: float,
    G: int = 256,
    P: int = 64,
    coverage_goal: float = 0.9,
    threshold: float = 0.5,
    etas: Sequence[complex] = (1, 1j),
) -> MultiplicityCertificate:
    """Certify multiplicity ``>= len(fs)`` from flatness, polarized sums and the Gram field."""
    if not eps < 0.5:
        raise ValueError("eps must be below 1/2")
    m = len(fs)
    field_ = density_matrix(fs, G, P)
    one = np.ones(G)
    failures = []
    flatness = []
    for i in range(m):
        d = field_.diagonal(i)
        dev = ratio_deviation(DensityGrid(one), DensityGrid(np.maximum(d, 0)), tau)
        flatness.append(dev)
        if dev > eps:
            failures.append({"condition": "cond1", "i": i, "j": None, "eta": None,
                             "theta": _worst_theta(one, d, tau), "deviation": dev})
    pair_dev = {}
    for i in range(m):
        for j in range(i + 1, m):
            for eta in etas:
                d = to_density(spectral_measure(fs[i].combine(fs[j], eta), P), G, P).values
                dev = ratio_deviation(DensityGrid(2 * one), DensityGrid(d), tau)
                pair_dev[f"{i},{j},{_eta_name(eta)}"] = dev
                if dev > eps:
                    failures.append({"condition": "cond2", "i": i, "j": j, "eta": _eta_name(eta),
                                     "theta": _worst_theta(2 * one, d, tau), "deviation": dev})
    lam = field_.lambda_min()
    coverage = float(np.mean(lam > threshold))
    ok = not failures and coverage >= coverage_goal
    return MultiplicityCertificate(
        family_size=m,
        epsilon=float(eps),
        tau=float(tau),
        threshold=float(threshold),
        coverage_goal=float(coverage_goal),
        coverage=coverage,
        certified_bound=m if ok else 0,
        flatness=flatness,
        pair_deviations=pair_dev,
        failures=failures,
        lambda_min=lam,
        grid_size=G,
        order=P,
    )


def flatness_report(f: Observable, eps: float, tau: float, G: int = 256, P: int = 64) -> tuple[bool, float]:
    """Whether the smoothed density of ``sigma(f)`` is eps-close to 1 off the gap."""
    d = to_density(spectral_measure(f, P), G, P)
    dev = ratio_deviation(DensityGrid.constant(1.0, G), d, tau)
    return dev <= eps, dev

"""Validated run configurations for the command-line front end.

Every command reads one JSON object. Unknown keys are rejected and all
checks happen before any computation starts.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .circle_measures import AtomicMeasure, CircleMeasure, DensityGrid
from .systems import FiniteSystem, Observable, bernoulli_approx, build_cyclic, make_rng

__all__ = [
    "ConfigError",
    "GridConfig",
    "SystemSource",
    "ObservableSource",
    "MeasureSource",
    "StepConfig",
    "WitnessSettings",
    "ConstructConfig",
    "SpreadConfig",
    "WitnessConfig",
    "InduceConfig",
    "SpectrumConfig",
    "load_config",
    "load_system",
    "load_observables",
    "load_measure",
    "read_json",
]


class ConfigError(ValueError):
    """Schema or input-file problem; the message names the field or path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridConfig(_Strict):
    G: int = 256
    P: int = 32

    @model_validator(mode="after")
    def _check(self):
        if self.G < 256 or self.G & (self.G - 1):
            raise ValueError(f"G must be a power of two >= 256, got {self.G}")
        if self.P < 1 or self.G < 4 * self.P:
            raise ValueError(f"need 1 <= P and G >= 4P, got G={self.G}, P={self.P}")
        return self


class SystemSource(_Strict):
    """Exactly one of ``cyclic``, ``perm`` or ``path``."""

    cyclic: int | None = Field(default=None, ge=1)
    perm: list[int] | None = None
    path: str | None = None

    @model_validator(mode="after")
    def _one(self):
        given = [k for k in ("cyclic", "perm", "path") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"give exactly one of cyclic, perm, path (got {given or 'none'})")
        return self


class BernoulliFamily(_Strict):
    """``count`` independent fair-coin labelings of the cyclic system of ``2**L`` atoms."""

    L: int = Field(ge=1, le=24)
    count: int = Field(default=1, ge=1)
    seed: int = 0


class InlineObservable(_Strict):
    labels: list[int]
    values: list[tuple[float, float]]


class ObservableSource(_Strict):
    """Observables from a JSON file, inline records or random labelings."""

    path: str | None = None
    inline: list[InlineObservable] | None = None
    bernoulli: BernoulliFamily | None = None

    @model_validator(mode="after")
    def _one(self):
        given = [k for k in ("path", "inline", "bernoulli") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"give exactly one of path, inline, bernoulli (got {given or 'none'})")
        return self


class AtomsInput(_Strict):
    positions: list[float]
    weights: list[float]


class MeasureSource(_Strict):
    """A measure given by atoms, a density CSV or a coefficient JSON file."""

    atoms: AtomsInput | None = None
    density: str | None = None
    coefficients: str | None = None

    @model_validator(mode="after")
    def _one(self):
        given = [k for k in ("atoms", "density", "coefficients") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"give exactly one of atoms, density, coefficients (got {given or 'none'})")
        return self


class StepConfig(_Strict):
    alpha: float
    tau: float
    eps: float
    rho: float


class WitnessSettings(_Strict):
    eps: float = Field(default=0.25, gt=0, lt=0.5)
    threshold: float = 0.5
    coverage_goal: float = Field(default=0.9, ge=0, le=1)


class ConstructConfig(_Strict):
    root: SystemSource = SystemSource(cyclic=2**18)
    steps: int = Field(default=3, ge=1)
    schedule: Literal["default"] | list[StepConfig] = "default"
    seed: int = Field(default=0, ge=0)
    grid: GridConfig = GridConfig()
    witness: WitnessSettings = WitnessSettings()
    dense_family: ObservableSource | None = None

    @model_validator(mode="after")
    def _length(self):
        if isinstance(self.schedule, list) and len(self.schedule) < self.steps:
            raise ValueError(f"schedule lists {len(self.schedule)} steps, {self.steps} requested")
        return self


class MonteCarloCheck(_Strict):
    system: SystemSource
    observable: ObservableSource
    samples: int = Field(default=100_000, ge=1)
    max_p: int = Field(default=16, ge=1)


class SpreadConfig(_Strict):
    measure: MeasureSource
    deltas: list[float] = Field(min_length=1)
    seed: int = Field(default=0, ge=0)
    grid: GridConfig = GridConfig()
    mc: MonteCarloCheck | None = None

    @field_validator("deltas")
    @classmethod
    def _range(cls, deltas):
        for k, d in enumerate(deltas):
            if not 0 <= d <= 0.5:
                raise ValueError(f"entry {k} = {d} outside [0, 1/2]")
        return deltas


class WitnessConfig(_Strict):
    system: SystemSource | None = None
    observables: ObservableSource
    eps: float = Field(default=0.25, gt=0, lt=0.5)
    tau: float = Field(default=0.1, ge=0)
    threshold: float = 0.5
    coverage_goal: float = Field(default=0.9, ge=0, le=1)
    grid: GridConfig = GridConfig()


class InduceConfig(_Strict):
    system: SystemSource
    subset: list[int] | None = None
    subset_path: str | None = None
    observables: ObservableSource | None = None

    @model_validator(mode="after")
    def _one(self):
        if (self.subset is None) == (self.subset_path is None):
            raise ValueError("give exactly one of subset, subset_path")
        return self


class SpectrumConfig(_Strict):
    system: SystemSource | None = None
    observables: ObservableSource
    grid: GridConfig = GridConfig()


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def read_json(path: str | Path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def load_config(model: type[_Strict], path: str | Path | None, overrides: dict | None = None):
    """Parse ``path`` (or an empty object) into ``model`` after applying ``overrides``."""
    data = {} if path is None else read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "grid":
            data["grid"] = {**data.get("grid", {}), **value}
        else:
            data[key] = value
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        where = f"{path}: " if path is not None else ""
        raise ConfigError(f"{where}{_format_validation(exc)}") from exc


def load_system(src: SystemSource) -> FiniteSystem:
    try:
        if src.cyclic is not None:
            return build_cyclic(src.cyclic)
        if src.perm is not None:
            return FiniteSystem(src.perm)
        return FiniteSystem.from_json(read_json(src.path))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"system {src.path or 'perm'}: {exc}") from exc


def _bernoulli_family(spec: BernoulliFamily) -> tuple[FiniteSystem, list[Observable]]:
    system = None
    out = []
    for k in range(spec.count):
        s, part = bernoulli_approx(spec.L, int(make_rng(spec.seed, k).integers(2**63)))
        system = system or s
        out.append(Observable.from_partition(system, part))
    return system, out


def load_observables(
    src: ObservableSource, system: FiniteSystem | None
) -> tuple[FiniteSystem, list[Observable]]:
    """Build the observables; random labelings bring their own cyclic system."""
    if src.bernoulli is not None:
        s, fs = _bernoulli_family(src.bernoulli)
        if system is not None and system != s:
            raise ConfigError("bernoulli observables need system cyclic(2**L) or no system")
        return s, fs
    if system is None:
        raise ConfigError("observables given by path or inline need a system")
    if src.inline is not None:
        records = [o.model_dump() for o in src.inline]
        origin = "inline"
    else:
        data = read_json(src.path)
        records = data if isinstance(data, list) else [data]
        origin = src.path
    fs = []
    for k, rec in enumerate(records):
        try:
            if "N" in rec and int(rec["N"]) != system.n_atoms:
                raise ValueError(f"N={rec['N']} but the system has {system.n_atoms} atoms")
            fs.append(Observable.from_json(system, rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{origin}: observable {k}: {exc}") from exc
    return system, fs


def load_measure(src: MeasureSource, P: int) -> AtomicMeasure | CircleMeasure | DensityGrid:
    if src.atoms is not None:
        try:
            return AtomicMeasure(np.asarray(src.atoms.positions), np.asarray(src.atoms.weights))
        except ValueError as exc:
            raise ConfigError(f"measure.atoms: {exc}") from exc
    if src.density is not None:
        path = Path(src.density)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
        try:
            return DensityGrid.from_csv(text)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    data = read_json(src.coefficients)
    try:
        m = CircleMeasure.from_json(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{src.coefficients}: {exc}") from exc
    if m.max_order < 2 * P:
        raise ConfigError(f"{src.coefficients}: need coefficients up to order {2 * P}, have {m.max_order}")
    return m

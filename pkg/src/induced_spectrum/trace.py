"""On-disk construction traces and their independent re-verification.

Layout::

    manifest.json          config, step count, overall verdict, file list
    root.json              {"N", "perm"}
    step_<n>/subset.json   A_n as root atom indices
    step_<n>/family.json   observables on the induced system
    step_<n>/targets.json  target measures (singles and polarized pairs)
    step_<n>/density_<name>.csv
    step_<n>/certificate.json
    witness.json, lambda_min.csv, convergence.json
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .circle_measures import CircleMeasure, DensityGrid, GoodSpec, is_good, lebesgue, to_density, weak_distance
from .construction import StepParams, Target, Trace, _single_min, certify_step
from .inducing import induce
from .spectra import multiplicity_witness
from .systems import FiniteSystem, Observable, spectral_measures

__all__ = ["write_trace", "verify_trace", "dumps", "TraceError"]

DENSITY_TOL = 1e-9
QUANTITY_TOL = 1e-9


class TraceError(RuntimeError):
    pass


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def _safe(name: str) -> str:
    return name.replace(",", "_")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_trace(trace: Trace, out: Path, config: dict | None = None) -> Path:
    """Write every step, the witness and the convergence report; returns the manifest path."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    st = trace.state
    files = ["root.json"]
    _write(out / "root.json", dumps(st.root.to_json()))
    for n in range(1, st.n + 1):
        d = out / f"step_{n}"
        info = st.history[n - 1]
        _write(d / "subset.json", dumps({"n": n, "subset": info["subset"].tolist()}))
        _write(d / "family.json", dumps({"n": n, "family": [f.to_json() for f in info["family"]]}))
        targets = {"singles": {f"f{j + 1}": t.measure.to_json() for j, t in enumerate(info["singles"])},
                   "pairs": {k: t.measure.to_json() for k, t in info["pairs"].items()}}
        _write(d / "targets.json", dumps(targets))
        for j, t in enumerate(info["singles"]):
            _write(d / f"density_f{j + 1}.csv", t.density.to_csv())
        for k, t in info["pairs"].items():
            _write(d / f"density_pair_{_safe(k)}.csv", t.density.to_csv())
        _write(d / "certificate.json", dumps(st.certificates[n - 1]))
        files += [str(p.relative_to(out)) for p in sorted(d.iterdir())]
    if trace.witness is not None:
        _write(out / "witness.json", dumps(trace.witness.to_json()))
        _write(out / "lambda_min.csv", trace.witness.lambda_csv())
        files += ["witness.json", "lambda_min.csv"]
    _write(out / "convergence.json", dumps(trace.convergence))
    files.append("convergence.json")
    manifest = {
        "steps": st.n,
        "grid": {"G": st.G, "P": st.P},
        "seed": st.seed,
        "passed": trace.passed,
        "error": None if trace.error is None else str(trace.error),
        "final_flatness": trace.final_flatness,
        "deltas": st.deltas,
        "config": config or {},
        "files": sorted(files),
    }
    if trace.error is not None and trace.error.certificate is not None:
        _write(out / "failed_certificate.json", dumps(trace.error.certificate))
    _write(out / "manifest.json", dumps(manifest))
    return out / "manifest.json"


def _load_json(path: Path, problems: list[str]):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        problems.append(f"missing file {path}")
    except json.JSONDecodeError as exc:
        problems.append(f"{path}: invalid JSON ({exc})")
    return None


def _compare(tag: str, stored, fresh, problems: list[str], where: str):
    if isinstance(stored, dict):
        if not isinstance(fresh, dict) or set(stored) != set(fresh):
            problems.append(f"{where}: {tag} keys differ")
            return
        for k in stored:
            _compare(f"{tag}.{k}", stored[k], fresh[k], problems, where)
    elif isinstance(stored, list):
        if not isinstance(fresh, list) or len(stored) != len(fresh):
            problems.append(f"{where}: {tag} length differs")
            return
        for k, (a, b) in enumerate(zip(stored, fresh)):
            _compare(f"{tag}[{k}]", a, b, problems, where)
    elif isinstance(stored, bool) or stored is None or isinstance(stored, str):
        if stored != fresh:
            problems.append(f"{where}: {tag} stored {stored!r}, recomputed {fresh!r}")
    else:
        if not np.isclose(float(stored), float(fresh), rtol=QUANTITY_TOL, atol=QUANTITY_TOL):
            problems.append(f"{where}: {tag} stored {stored!r}, recomputed {fresh!r}")


def verify_trace(trace_dir: Path) -> list[str]:
    """Recompute every stored certificate; returns the list of discrepancies."""
    trace_dir = Path(trace_dir)
    manifest_path = trace_dir / "manifest.json"
    if not manifest_path.exists():
        raise TraceError(f"no manifest in {trace_dir}")
    problems: list[str] = []
    manifest = _load_json(manifest_path, problems)
    if manifest is None:
        return problems
    for rel in manifest["files"]:
        if not (trace_dir / rel).exists():
            problems.append(f"missing file {rel}")
    if problems:
        return problems
    root = FiniteSystem.from_json(json.loads((trace_dir / "root.json").read_text()))
    G = manifest["grid"]["G"]
    prev = None
    params_so_far: list[tuple] = []
    deltas: list[float] = []
    for n in range(1, manifest["steps"] + 1):
        d = trace_dir / f"step_{n}"
        cert = _load_json(d / "certificate.json", problems)
        sub = _load_json(d / "subset.json", problems)
        fam = _load_json(d / "family.json", problems)
        tgt = _load_json(d / "targets.json", problems)
        if None in (cert, sub, fam, tgt):
            return problems
        subset = np.asarray(sub["subset"], dtype=np.int64)
        system = induce(root, subset).system if subset.size < root.n_atoms else root
        try:
            family = [Observable.from_json(system, f) for f in fam["family"]]
        except ValueError as exc:
            problems.append(f"{d / 'family.json'}: {exc}")
            return problems
        singles, pairs = [], {}
        for name, data in tgt["singles"].items():
            singles.append(_target(d, f"density_{name}.csv", CircleMeasure.from_json(data), G, problems))
        for key, data in tgt["pairs"].items():
            pairs[key] = _target(d, f"density_pair_{_safe(key)}.csv", CircleMeasure.from_json(data), G, problems)
        params = StepParams(**cert["params"])
        if n == 1:
            fresh = _certify_first(family, singles, params)
            _compare("certificate", {k: cert[k] for k in fresh}, fresh, problems, str(d / "certificate.json"))
        else:
            fresh, _ = certify_step(
                prev["family"], prev["singles"], prev["pairs"], prev["subset"],
                family, singles, pairs, subset, root, system, params, cert["delta"],
                params_so_far, deltas,
            )
            cert_cmp = {k: v for k, v in cert.items() if k != "attempts"}
            _compare("certificate", cert_cmp, fresh, problems, str(d / "certificate.json"))
            deltas.append(cert["delta"])
        params_so_far.append(params.as_tuple())
        prev = {"family": family, "singles": singles, "pairs": pairs, "subset": subset}
    if "witness.json" in manifest["files"] and prev is not None:
        stored = json.loads((trace_dir / "witness.json").read_text())
        w = multiplicity_witness(prev["family"], stored["epsilon"], stored["tau"], stored["grid_size"],
                                 stored["order"], stored["coverage_goal"], stored["threshold"])
        _compare("witness", stored, w.to_json(), problems, "witness.json")
    return problems


def _target(d: Path, csv_name: str, measure: CircleMeasure, G: int, problems: list[str]) -> Target:
    fresh = to_density(measure, G, measure.max_order)
    path = d / csv_name
    try:
        stored = DensityGrid.from_csv(path.read_text())
    except (FileNotFoundError, ValueError) as exc:
        problems.append(f"{path}: {exc}")
        return Target(measure, fresh)
    if stored.grid_size != G or np.abs(stored.values - fresh.values).max() > DENSITY_TOL:
        problems.append(f"{path}: density disagrees with targets.json")
    return Target(measure, stored)


def _certify_first(family, singles, params) -> dict:
    P = singles[0].measure.max_order
    sigma = spectral_measures(family, P)[0]
    d = weak_distance(sigma, lebesgue(P))
    a1 = is_good(singles[0].density, GoodSpec(params.alpha, params.tau))
    lebesgue_target = np.abs(singles[0].measure.coeffs - lebesgue(P).coeffs).max() == 0
    return {
        "A1": {"passed": bool(a1 and lebesgue_target), "alpha": params.alpha,
               "min_off_gap": [_single_min([singles[0].density], params.tau)]},
        "A4": {"passed": d < params.rho, "distances": {"f1": d}},
    }

"""Batch command-line front end.

Every subcommand reads a JSON config (``--config``), writes its results under
``--out`` and exits 0 on success. Exit code 1 means a computed check failed
(construction certificate, trace verification, induced orbit); exit code 2
means the input could not be used (schema, missing file).

The thread count of the numerical kernels can be capped with the
``INDUCED_SPECTRUM_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .circle_measures import spread_out, to_density
from .config import (
    ConfigError,
    ConstructConfig,
    InduceConfig,
    SpectrumConfig,
    SpreadConfig,
    WitnessConfig,
    load_config,
    load_measure,
    load_observables,
    load_system,
    read_json,
)
from .construction import ConstructionError, Schedule, StepParams, run_construction
from .inducing import NonReturningOrbitError, induce, kac_check, restrict_observable
from .spectra import multiplicity_witness
from .systems import make_rng, meilijson_mc, spectral_measure, spectral_measures
from .trace import TraceError, dumps, verify_trace, write_trace

log = logging.getLogger("induced_spectrum")

THREADS_ENV = "INDUCED_SPECTRUM_THREADS"


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _overrides(args) -> dict:
    grid = {}
    if args.grid is not None:
        grid["G"] = args.grid
    if args.order is not None:
        grid["P"] = args.order
    return {"grid": grid or None}


def _delta_tag(delta: float) -> str:
    return f"{delta:g}".replace(".", "p")


def cmd_spread(args) -> int:
    cfg = load_config(SpreadConfig, args.config, {**_overrides(args), "seed": args.seed})
    G, P = cfg.grid.G, cfg.grid.P
    m = load_measure(cfg.measure, P)
    out = Path(args.out)
    summary = {"deltas": cfg.deltas, "G": G, "P": P, "files": []}
    for delta in cfg.deltas:
        try:
            s = spread_out(m, delta, P)
            d = to_density(s, G, P)
        except ValueError as exc:
            raise ConfigError(f"delta={delta}: {exc}") from exc
        tag = _delta_tag(delta)
        _write(out, f"spread_{tag}.json", dumps({"delta": delta, **s.to_json()}))
        _write(out, f"density_{tag}.csv", d.to_csv())
        summary["files"] += [f"spread_{tag}.json", f"density_{tag}.csv"]
    if cfg.mc is not None:
        rows = _mc_rows(cfg)
        _write(out, "mc_check.csv", "\n".join(rows) + "\n")
        summary["files"].append("mc_check.csv")
        within = sum(r.endswith(",1") for r in rows[1:])
        summary["mc_within_bound"] = f"{within}/{len(rows) - 1}"
        log.info("Monte Carlo cross-check: %d/%d within 3|f|^2/sqrt(M)", within, len(rows) - 1)
    _write(out, "spread.json", dumps(summary))
    return 0


def _mc_rows(cfg: SpreadConfig) -> list[str]:
    mc = cfg.mc
    system = load_system(mc.system)
    _, fs = load_observables(mc.observable, system)
    f = fs[0]
    base = spectral_measure(f, 2 * mc.max_p)
    bound = 3 * f.norm_sq() / math.sqrt(mc.samples)
    rows = ["delta,p,mc_re,mc_im,exact_re,exact_im,error,bound,within"]
    for k, delta in enumerate(cfg.deltas):
        exact = spread_out(base, delta, mc.max_p)
        for p in range(1, mc.max_p + 1):
            seed = int(make_rng(cfg.seed, k, p).integers(2**63))
            est = meilijson_mc(f, delta, p, mc.samples, seed)
            ref = exact.coefficient(p)
            err = abs(est - ref)
            rows.append(f"{delta:.17g},{p},{est.real:.17g},{est.imag:.17g},{ref.real:.17g},"
                        f"{ref.imag:.17g},{err:.17g},{bound:.17g},{int(err <= bound)}")
    return rows


def cmd_witness(args) -> int:
    cfg = load_config(WitnessConfig, args.config, _overrides(args))
    system = load_system(cfg.system) if cfg.system is not None else None
    _, fs = load_observables(cfg.observables, system)
    cert = multiplicity_witness(fs, cfg.eps, cfg.tau, cfg.grid.G, cfg.grid.P, cfg.coverage_goal, cfg.threshold)
    out = Path(args.out)
    _write(out, "witness.json", dumps(cert.to_json()))
    _write(out, "lambda_min.csv", cert.lambda_csv())
    print(f"certified multiplicity bound: {cert.certified_bound} (coverage {cert.coverage:.3f})")
    for fail in cert.failures:
        print(f"  {fail['condition']} i={fail['i']} j={fail['j']} eta={fail['eta']} "
              f"deviation={fail['deviation']:.4g} at theta={fail['theta']:.4f}")
    return 0


def _schedule(cfg: ConstructConfig) -> Schedule:
    if cfg.schedule == "default":
        return Schedule.default(cfg.steps)
    return Schedule([StepParams(**s.model_dump()) for s in cfg.schedule])


def cmd_construct(args) -> int:
    cfg = load_config(ConstructConfig, args.config, {**_overrides(args), "seed": args.seed})
    root = load_system(cfg.root)
    dense = None
    if cfg.dense_family is not None:
        _, dense = load_observables(cfg.dense_family, root)
    out = Path(args.out)
    schedule = _schedule(cfg)
    try:
        trace = run_construction(
            root, cfg.steps, schedule, cfg.seed, cfg.grid.G, cfg.grid.P,
            cfg.witness.eps, cfg.witness.threshold, cfg.witness.coverage_goal, dense,
        )
    except ConstructionError as exc:
        # nothing certified yet: keep a manifest recording the failure
        _write(out, "manifest.json", dumps({
            "steps": 0, "passed": False, "error": str(exc), "seed": cfg.seed,
            "grid": cfg.grid.model_dump(), "config": cfg.model_dump(mode="json"), "files": [],
        }))
        if exc.certificate is not None:
            _write(out, "failed_certificate.json", dumps(exc.certificate))
        print(f"construction failed: {exc}", file=sys.stderr)
        return 1
    write_trace(trace, out, cfg.model_dump(mode="json"))
    st = trace.state
    for cert in st.certificates:
        status = "pass" if cert["passed"] else "FAIL"
        print(f"step {cert['n']}: {status}  measure={cert['mass']['measure']:.4f}")
    if trace.error is not None:
        print(f"construction stopped: {trace.error}", file=sys.stderr)
    if trace.witness is not None:
        print(f"certified multiplicity bound: {trace.witness.certified_bound}")
    return 0 if trace.passed else 1


def cmd_verify(args) -> int:
    try:
        problems = verify_trace(Path(args.trace_dir))
    except TraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for p in problems:
        print(p)
    if problems:
        print(f"{len(problems)} discrepancies", file=sys.stderr)
        return 1
    print("trace verified")
    return 0


def cmd_induce(args) -> int:
    cfg = load_config(InduceConfig, args.config)
    s = load_system(cfg.system)
    if cfg.subset is not None:
        A = cfg.subset
    else:
        data = read_json(cfg.subset_path)
        A = data["subset"] if isinstance(data, dict) else data
    try:
        ind = induce(s, A)
    except NonReturningOrbitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        raise ConfigError(f"subset: {exc}") from exc
    expected, holds = kac_check(ind)
    out = Path(args.out)
    payload = {
        **ind.to_json("system"),
        "induced": ind.system.to_json(),
        "return_time_histogram": {str(k): v for k, v in ind.return_time_histogram().items()},
        "kac": {"expected_return": f"{expected.numerator}/{expected.denominator}", "holds": holds},
    }
    _write(out, "induced.json", dumps(payload))
    if cfg.observables is not None:
        _, fs = load_observables(cfg.observables, s)
        restricted = [restrict_observable(f, ind) for f in fs]
        _write(out, "restricted.json", dumps([
            {**r.observable.to_json(), "mean_drift": [r.mean_drift.real, r.mean_drift.imag]}
            for r in restricted
        ]))
    print(f"|A| = {ind.subset.size}, mean return time {expected} (Kac {'holds' if holds else 'fails'})")
    return 0


def cmd_spectrum(args) -> int:
    cfg = load_config(SpectrumConfig, args.config, _overrides(args))
    system = load_system(cfg.system) if cfg.system is not None else None
    _, fs = load_observables(cfg.observables, system)
    G, P = cfg.grid.G, cfg.grid.P
    out = Path(args.out)
    for k, m in enumerate(spectral_measures(fs, P), start=1):
        _write(out, f"spectrum_f{k}.json", dumps(m.to_json()))
        _write(out, f"density_f{k}.csv", to_density(m, G, P).to_csv())
    return 0


COMMANDS = {
    "spread": (cmd_spread, "spread a measure for a list of deltas"),
    "witness": (cmd_witness, "certify a multiplicity lower bound for a family"),
    "construct": (cmd_construct, "run the inductive construction and write a trace"),
    "verify": (cmd_verify, "recompute every certificate of a stored trace"),
    "induce": (cmd_induce, "first-return system on a subset"),
    "spectrum": (cmd_spectrum, "spectral coefficients and smoothed densities"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--grid", type=int, help="density grid size G")
    common.add_argument("--order", type=int, help="Fourier order P")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="induced-spectrum", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "verify":
            p.add_argument("trace_dir", type=Path)
        p.set_defaults(func=func)
    return parser


def _thread_limit() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=_thread_limit()):
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

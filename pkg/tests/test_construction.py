import math

import numpy as np
import pytest

from induced_spectrum.circle_measures import (
    DensityGrid,
    ScheduleError,
    lebesgue,
    ratio_deviation,
    weak_distance,
)
from induced_spectrum.construction import (
    ConstructionError,
    Schedule,
    StepParams,
    add_orthogonal_function,
    init_state,
    inductive_step,
    lebesgue_track,
    pair_key,
    run_construction,
)
from induced_spectrum.systems import Observable, build_cyclic, spectral_measure

N16 = 2**16


def default_with(steps, changes):
    base = Schedule.default(steps)
    params = [StepParams(**{**p.to_json(), **changes.get(n, {})}) for n, p in enumerate(base.params, start=1)]
    return Schedule(params, adaptive=True)


@pytest.fixture(scope="module")
def start16():
    return init_state(build_cyclic(N16), Schedule.default(3), seed=1)


@pytest.fixture(scope="module")
def run16():
    return run_construction(build_cyclic(N16), 2, Schedule.default(2), seed=5)


class TestSchedule:
    def test_default_rule(self):
        s = Schedule.default(4)
        for n in range(1, 5):
            p = s[n]
            assert p.tau == math.pi * 2.0**-n
            assert p.rho == 2.0 ** -(n + 2)
            assert p.eps == 2.0 ** -(n + 1) * min(1, p.alpha)
        assert s.realize(2, 0.3).eps == 2.0**-3 * 0.3

    def test_invalid_eps(self):
        with pytest.raises(ScheduleError):
            Schedule([StepParams(0.5, math.pi / 2, 1.0, 0.1)])

    def test_rho_must_decrease(self):
        with pytest.raises(ScheduleError):
            Schedule([StepParams(0.5, 1.0, 0.1, 0.1), StepParams(0.5, 0.5, 0.05, 0.1)])

    def test_indexing(self):
        with pytest.raises(IndexError):
            Schedule.default(2)[3]


class TestInitState:
    def test_first_step(self, start16):
        cert = start16.certificates[0]
        assert cert["passed"] and cert["A1"]["passed"] and cert["A4"]["passed"]
        assert cert["params"]["alpha"] == 0.5 and cert["params"]["tau"] == math.pi / 2
        assert np.array_equal(start16.singles[0].density.values, np.ones(256))
        assert np.array_equal(start16.singles[0].measure.coeffs, lebesgue(32).coeffs)
        assert start16.subset.size == N16

    def test_flat_first_function(self, start16):
        f = start16.family[0]
        assert f.mean == 0
        assert weak_distance(spectral_measure(f, 32), lebesgue(32)) < start16.params[0].rho


class TestAddOrthogonal:
    def test_empty_family(self):
        s = init_state(build_cyclic(N16), Schedule.default(2), seed=3)
        empty = type(s)(**{**s.__dict__, "n": 0, "family": [], "singles": []})
        f = add_orthogonal_function(empty, 0.1, seed=4)
        assert weak_distance(spectral_measure(f, 32), lebesgue(32)) < 0.1

    def test_pairs_with_existing(self, start16):
        f1 = start16.family[0]
        f2 = add_orthogonal_function(start16, 0.1, seed=8)
        target = spectral_measure(f1, 32) + lebesgue(32)
        for eta in (1, -1, 1j):
            assert weak_distance(spectral_measure(f2.combine(f1, eta), 32), target) < 0.1

    def test_vacuous_tolerance_takes_first_draw(self, start16):
        a = add_orthogonal_function(start16, 10.0, seed=8, retries=1)
        b = add_orthogonal_function(start16, 10.0, seed=8)
        assert np.array_equal(a.values, b.values)

    def test_too_small_system(self):
        s = init_state(build_cyclic(N16), Schedule.default(2), seed=3)
        small = type(s)(**{**s.__dict__, "system": build_cyclic(40), "family": []})
        with pytest.raises(ConstructionError, match="larger N"):
            add_orthogonal_function(small, 0.01, seed=0)


class TestInductiveStep:
    def test_step_on_large_root(self):
        sched = default_with(2, {2: {"rho": 0.05}})
        state = init_state(build_cyclic(2**18), sched, seed=2)
        nxt = inductive_step(state)
        cert = nxt.certificates[-1]
        assert cert["passed"], cert
        assert cert["params"]["rho"] == 0.05
        assert nxt.n == 2 and len(nxt.family) == 2
        assert state.n == 1 and len(state.family) == 1

    def test_pair_targets_follow_update_rule(self, start16):
        nxt = inductive_step(start16)
        devs = nxt.certificates[-1]["A2"]["deviations"]
        old = start16.singles[0].density + 1.0
        tau = nxt.params[-1].tau
        for eta in ("1", "i"):
            key = pair_key(1, 2, eta)
            assert devs[key] == ratio_deviation(old, nxt.pairs[key].density, tau)

    def test_margin_unreachable(self):
        sched = Schedule([StepParams(0.5, math.pi / 2, 0.125, 0.125), StepParams(0.45, math.pi / 4, 1e-7, 0.0625)])
        state = init_state(build_cyclic(2**14), sched, seed=0)
        with pytest.raises(ConstructionError, match="Step 1 margin unreachable"):
            inductive_step(state)

    def test_requires_schedule_room(self):
        state = init_state(build_cyclic(N16), Schedule.default(1), seed=0)
        with pytest.raises(ConstructionError, match="schedule"):
            inductive_step(state)


class TestRunConstruction:
    def test_two_steps(self, run16):
        assert run16.passed
        assert run16.witness.certified_bound == 2
        assert all(c["passed"] for c in run16.convergence)

    def test_single_step(self):
        tr = run_construction(build_cyclic(N16), 1, Schedule.default(1), seed=0)
        assert tr.passed
        assert tr.witness.certified_bound == 1

    def test_mass_bookkeeping(self, run16):
        st = run16.state
        eps_sum = sum(p.eps for p in st.params)
        assert st.measure >= 1 - eps_sum
        assert st.measure >= 1 - 2 * sum(st.deltas)
        for c in st.certificates:
            assert c["mass"]["passed"]

    def test_drift_bounded(self, run16):
        for c, p in zip(run16.state.certificates[1:], run16.state.params[1:]):
            assert all(d <= p.eps for d in c["A3"]["drifts"])

    def test_chained_flattening(self, run16):
        st = run16.state
        one = DensityGrid.constant(1.0, st.G)
        for j in range(1, st.n + 1):
            tau_j = st.params[j - 1].tau
            bound = 1.0
            for n in range(j, st.n + 1):
                # every step after the first compared the targets at its own eps
                if n > 1:
                    bound *= 1 + st.params[n - 1].eps
                dev = ratio_deviation(one, st.history[n - 1]["densities"][j - 1], tau_j)
                assert 1 + dev <= bound + 1e-12

    def test_under_provisioned(self):
        tr = run_construction(build_cyclic(2**8), 4, Schedule.default(4), seed=0)
        assert not tr.passed
        assert tr.error.step == 2
        assert tr.state.n == 1

    def test_deterministic(self, run16):
        again = run_construction(build_cyclic(N16), 2, Schedule.default(2), seed=5)
        assert again.state.certificates == run16.state.certificates
        assert np.array_equal(again.state.subset, run16.state.subset)


class TestLebesgueTrack:
    def test_empty(self, start16):
        report, state = lebesgue_track(start16, [])
        assert report == [] and state is start16

    def test_coarse_characters(self, start16):
        root = start16.root
        block = np.arange(N16) // (N16 // 4)
        dense = [Observable.centered(root, block, v)[0] for v in ([1, -1, 1, -1], [1, 1, -1, -1])]
        report, state = lebesgue_track(start16, dense, steps=1)
        assert len(report) == 1
        assert all(d < report[0]["rho"] for d in report[0]["distances"])
        assert state.certificates[-1]["passed"]

    def test_overlap_gives_identical_diagnostics(self, start16):
        report, state = lebesgue_track(start16, [start16.family[0]], steps=1)
        assert report[0]["distances"][0] == state.certificates[-1]["A4"]["distances"]["f1"]

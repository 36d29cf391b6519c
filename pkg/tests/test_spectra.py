import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from induced_spectrum.circle_measures import to_density
from induced_spectrum.spectra import density_matrix, flatness_report, multiplicity_witness
from induced_spectrum.systems import (
    FiniteSystem,
    Observable,
    bernoulli_approx,
    build_cyclic,
    product,
    spectral_measure,
)


def labelings(L, seeds):
    system = None
    out = []
    for seed in seeds:
        s, part = bernoulli_approx(L, seed)
        system = system or s
        out.append(Observable.from_partition(system, part))
    return out


@pytest.fixture(scope="module")
def three_flat():
    return labelings(16, [101, 202, 303])


def exactly_flat(N: int, P: int) -> Observable:
    """Two opposite point masses further apart than P: correlations vanish for 1 <= |p| <= P."""
    s = build_cyclic(N)
    v = np.zeros(N)
    v[0], v[N // 2] = 1.0, -1.0
    assert N // 2 > P
    return Observable.from_values(s, v * np.sqrt(N / 2))


class TestDensityMatrix:
    def test_single_flat_function(self):
        f = exactly_flat(512, 64)
        field = density_matrix([f], 256, 64)
        assert np.allclose(field.matrices[:, 0, 0], 1.0, atol=1e-12)

    def test_duplicate_is_rank_one(self, three_flat):
        f = three_flat[0]
        field = density_matrix([f, f], 256, 32)
        d = field.diagonal(0)
        assert np.allclose(field.matrices[:, 0, 1], d, atol=1e-12)
        assert np.allclose(field.matrices[:, 1, 1], d, atol=1e-12)
        assert np.abs(field.lambda_min()).max() < 1e-10

    def test_product_factors_nearly_identity(self):
        s1, a = bernoulli_approx(8, 1)
        s2, b = bernoulli_approx(9, 2)
        s = product(s1, s2)
        f = Observable.from_values(s, np.repeat(Observable.from_partition(s1, a).values, s2.n_atoms))
        g = Observable.from_values(s, np.tile(Observable.from_partition(s2, b).values, s1.n_atoms))
        field = density_matrix([f, g], 256, 16)
        assert np.abs(field.matrices[:, 0, 1]).max() < 1e-12

    def test_hermitian(self, three_flat):
        m = density_matrix(three_flat, 256, 16).matrices
        assert np.array_equal(m, np.conj(np.transpose(m, (0, 2, 1))))

    def test_diagonal_is_exact_fejer_density(self, three_flat):
        field = density_matrix(three_flat, 256, 32)
        for i, f in enumerate(three_flat):
            assert np.array_equal(field.diagonal(i), to_density(spectral_measure(f, 32), 256, 32).values)

    def test_unitary_change(self, three_flat):
        fs = list(three_flat)
        before = density_matrix(fs, 256, 32)
        fs[1] = fs[1].compose(1)
        after = density_matrix(fs, 256, 32)
        for i in range(3):
            assert np.array_equal(before.diagonal(i), after.diagonal(i))
        off = np.linalg.norm(after.matrices - before.matrices, ord=2, axis=(1, 2))
        assert np.all(np.abs(after.lambda_min() - before.lambda_min()) <= 2 * off + 1e-12)

    def test_coarse_grid(self, three_flat):
        with pytest.raises(ValueError, match="coarse"):
            density_matrix(three_flat, 256, 65)


class TestWitness:
    def test_single_flat(self, three_flat):
        cert = multiplicity_witness(three_flat[:1], 0.2, 0.1, 256, 64)
        assert cert.certified_bound == 1
        assert cert.coverage == pytest.approx(1.0)

    def test_three_independent(self, three_flat):
        cert = multiplicity_witness(three_flat, 0.2, 0.1, 256, 64, coverage_goal=0.9, threshold=0.5)
        assert cert.certified_bound == 3
        assert cert.coverage >= 0.9
        assert not cert.failures

    def test_duplicate_fails_cond2(self, three_flat):
        f = three_flat[0]
        cert = multiplicity_witness([f, f], 0.2, 0.1, 256, 64)
        assert cert.certified_bound == 0
        assert any(x["condition"] == "cond2" and x["eta"] == "1" for x in cert.failures)
        # sigma(2f) = 4 sigma(f): the density is near 4 where 2 was required
        assert cert.pair_deviations["0,1,1"] > 0.8

    def test_monotone_under_removal(self, three_flat):
        assert multiplicity_witness(three_flat, 0.2, 0.1, 256, 32).certified_bound == 3
        for drop in range(3):
            rest = [f for k, f in enumerate(three_flat) if k != drop]
            assert multiplicity_witness(rest, 0.2, 0.1, 256, 32).certified_bound == 2

    def test_serialization(self, three_flat):
        cert = multiplicity_witness(three_flat[:2], 0.2, 0.1, 256, 16)
        data = json.loads(json.dumps(cert.to_json()))
        assert data["certified_bound"] == 2
        assert set(data["pair_deviations"]) == {"0,1,1", "0,1,i"}
        rows = cert.lambda_csv().splitlines()
        assert rows[0] == "theta,lambda_min"
        assert len(rows) == 257

    def test_eps_range(self, three_flat):
        with pytest.raises(ValueError):
            multiplicity_witness(three_flat, 0.5, 0.1)

    @settings(max_examples=15)
    @given(st.integers(0, 2**31), st.integers(0, 2), st.complex_numbers(min_magnitude=0.5, max_magnitude=3))
    def test_never_certifies_with_a_repeat(self, seed, slot, scale):
        rng = np.random.default_rng(seed)
        s = FiniteSystem(rng.permutation(2048))
        fs = [Observable.centered(s, rng.integers(0, 2, 2048), [-1.0, 1.0])[0] for _ in range(2)]
        fs.insert(slot, fs[0] * scale)
        assert multiplicity_witness(fs, 0.25, 0.1, 256, 16).certified_bound == 0


class TestFlatness:
    def test_exactly_flat(self):
        holds, dev = flatness_report(exactly_flat(512, 64), 1e-9, 0.1, 256, 64)
        assert holds
        assert dev <= 1e-12

    def test_dirac_fails(self):
        f = Observable.from_values(build_cyclic(2), [1.0, -1.0])
        holds, dev = flatness_report(f, 0.2, 0.1, 256, 64)
        assert not holds and dev > 1

    def test_labeling_holds(self, three_flat):
        holds, dev = flatness_report(three_flat[0], 0.2, 0.1, 256, 64)
        assert holds, dev

import json

import numpy as np
import pytest

from induced_spectrum.circle_measures import AtomicMeasure, DensityGrid
from induced_spectrum.cli import main
from induced_spectrum.config import ConfigError, ConstructConfig, GridConfig, load_config
from induced_spectrum.systems import Observable, bernoulli_approx
from induced_spectrum.trace import TraceError, verify_trace


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def trace_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("trace")
    cfg = write_json(base / "c.json", {"root": {"cyclic": 2**16}, "steps": 2})
    assert main(["construct", "--config", cfg, "--out", str(base / "run"), "--seed", "3"]) == 0
    return base / "run"


class TestConfig:
    def test_unknown_key_names_field(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"steps": 2, "colour": "red"})
        with pytest.raises(ConfigError, match="colour"):
            load_config(ConstructConfig, cfg)

    def test_nested_field_named(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"grid": {"G": 300}})
        with pytest.raises(ConfigError, match="grid"):
            load_config(ConstructConfig, cfg)

    def test_overrides(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"grid": {"G": 512}})
        c = load_config(ConstructConfig, cfg, {"grid": {"P": 16}, "seed": 9})
        assert c.grid == GridConfig(G=512, P=16) and c.seed == 9

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{\n"steps": 2,\n}')
        with pytest.raises(ConfigError, match="line 3"):
            load_config(ConstructConfig, path)

    def test_schedule_too_short(self):
        with pytest.raises(ConfigError, match="schedule"):
            load_config(ConstructConfig, None, {"steps": 2, "schedule": [
                {"alpha": 0.5, "tau": 1.0, "eps": 0.1, "rho": 0.1}]})


class TestSpread:
    def test_dirac_half_is_flat(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {
            "measure": {"atoms": {"positions": [np.pi], "weights": [1.0]}}, "deltas": [0.5]})
        assert main(["spread", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        d = DensityGrid.from_csv((tmp_path / "o" / "density_0p5.csv").read_text())
        assert np.allclose(d.values, 1.0, atol=1e-12)

    def test_delta_zero_returns_input(self, tmp_path):
        atoms = {"positions": [0.3, 2.0], "weights": [0.25, 0.75]}
        cfg = write_json(tmp_path / "s.json", {"measure": {"atoms": atoms}, "deltas": [0]})
        assert main(["spread", "--config", cfg, "--out", str(tmp_path / "o"), "--order", "16"]) == 0
        out = json.loads((tmp_path / "o" / "spread_0.json").read_text())
        expected = AtomicMeasure(np.array(atoms["positions"]), np.array(atoms["weights"])).coefficients(16)
        assert np.allclose([complex(*c) for c in out["coeffs"]], expected.full(), atol=1e-15)

    def test_delta_out_of_range(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "s.json", {
            "measure": {"atoms": {"positions": [0.0], "weights": [1.0]}}, "deltas": [0.6]})
        assert main(["spread", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "deltas" in capsys.readouterr().err

    def test_density_file_with_bad_row(self, tmp_path, capsys):
        text = DensityGrid.constant(1.0).to_csv().splitlines()
        text[5] = "0.1,abc"
        (tmp_path / "d.csv").write_text("\n".join(text))
        cfg = write_json(tmp_path / "s.json", {"measure": {"density": str(tmp_path / "d.csv")},
                                               "deltas": [0.1], "grid": {"P": 16}})
        assert main(["spread", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "line 6" in capsys.readouterr().err

    def test_monte_carlo_cross_check(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {
            "measure": {"atoms": {"positions": [1.0], "weights": [1.0]}},
            "deltas": [0.25],
            "mc": {"system": {"cyclic": 2**12}, "observable": {"bernoulli": {"L": 12}},
                   "samples": 20000, "max_p": 4},
        })
        assert main(["spread", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        rows = (tmp_path / "o" / "mc_check.csv").read_text().splitlines()
        assert rows[0].startswith("delta,p,")
        assert len(rows) == 5


class TestWitness:
    def test_three_labelings(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "w.json", {"observables": {"bernoulli": {"L": 16, "count": 3}},
                                               "eps": 0.2, "grid": {"P": 64}})
        assert main(["witness", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        cert = json.loads((tmp_path / "o" / "witness.json").read_text())
        assert cert["certified_bound"] == 3
        assert (tmp_path / "o" / "lambda_min.csv").read_text().startswith("theta,lambda_min\n")

    def test_single_function(self, tmp_path):
        cfg = write_json(tmp_path / "w.json", {"observables": {"bernoulli": {"L": 14}}})
        assert main(["witness", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o" / "witness.json").read_text())["certified_bound"] == 1

    def test_duplicate_pair(self, tmp_path, capsys):
        s, part = bernoulli_approx(14, 3)
        f = Observable.from_partition(s, part)
        write_json(tmp_path / "sys.json", s.to_json())
        write_json(tmp_path / "obs.json", [f.to_json(), f.to_json()])
        cfg = write_json(tmp_path / "w.json", {"system": {"path": str(tmp_path / "sys.json")},
                                               "observables": {"path": str(tmp_path / "obs.json")}})
        assert main(["witness", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        cert = json.loads((tmp_path / "o" / "witness.json").read_text())
        assert cert["certified_bound"] == 0
        assert any(x["condition"] == "cond2" for x in cert["failures"])
        assert "cond2" in capsys.readouterr().out

    def test_missing_file_names_path(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "w.json", {"system": {"path": str(tmp_path / "nope.json")},
                                               "observables": {"path": str(tmp_path / "obs.json")}})
        assert main(["witness", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "nope.json" in capsys.readouterr().err


class TestConstructAndVerify:
    def test_fresh_trace_verifies(self, trace_dir, capsys):
        manifest = json.loads((trace_dir / "manifest.json").read_text())
        assert manifest["passed"] and manifest["steps"] == 2
        assert verify_trace(trace_dir) == []
        assert main(["verify", str(trace_dir)]) == 0

    def test_perturbed_density_named(self, trace_dir, tmp_path, capsys):
        import shutil

        copy = tmp_path / "copy"
        shutil.copytree(trace_dir, copy)
        target = copy / "step_2" / "density_f1.csv"
        d = DensityGrid.from_csv(target.read_text())
        target.write_text(DensityGrid(d.values * 1.1).to_csv())
        assert main(["verify", str(copy)]) == 1
        assert "step_2/density_f1.csv" in capsys.readouterr().out

    def test_tampered_certificate(self, trace_dir, tmp_path, capsys):
        import shutil

        copy = tmp_path / "copy"
        shutil.copytree(trace_dir, copy)
        path = copy / "step_2" / "certificate.json"
        cert = json.loads(path.read_text())
        cert["A4"]["distances"]["f1"] *= 0.5
        path.write_text(json.dumps(cert))
        assert main(["verify", str(copy)]) == 1
        assert "A4.distances.f1" in capsys.readouterr().out

    def test_missing_artifact(self, trace_dir, tmp_path, capsys):
        import shutil

        copy = tmp_path / "copy"
        shutil.copytree(trace_dir, copy)
        (copy / "step_1" / "family.json").unlink()
        assert main(["verify", str(copy)]) == 1
        assert "family.json" in capsys.readouterr().out

    def test_empty_directory(self, tmp_path, capsys):
        with pytest.raises(TraceError, match="no manifest"):
            verify_trace(tmp_path)
        assert main(["verify", str(tmp_path)]) == 2
        assert "no manifest" in capsys.readouterr().err

    def test_single_step(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"root": {"cyclic": 2**14}, "steps": 1})
        assert main(["construct", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        assert "bound: 1" in capsys.readouterr().out

    def test_under_provisioned(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"root": {"cyclic": 2**8}, "steps": 4})
        out = tmp_path / "o"
        assert main(["construct", "--config", cfg, "--out", str(out)]) != 0
        assert "step 2" in capsys.readouterr().err
        manifest = json.loads((out / "manifest.json").read_text())
        assert not manifest["passed"] and manifest["steps"] == 1
        assert (out / "step_1" / "certificate.json").exists()

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"root": {"cyclic": 2**14}, "steps": 1, "seed": 4})
        for name in ("a", "b"):
            assert main(["construct", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        for rel in ("step_1/certificate.json", "witness.json", "step_1/density_f1.csv"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestInduceAndSpectrum:
    def test_induce_five_cycle(self, tmp_path):
        cfg = write_json(tmp_path / "i.json", {"system": {"cyclic": 5}, "subset": [0, 1, 3]})
        assert main(["induce", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        data = json.loads((tmp_path / "o" / "induced.json").read_text())
        assert data["return_times"] == [1, 2, 2]
        assert data["kac"] == {"expected_return": "5/3", "holds": True}

    def test_induce_missing_cycle(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "i.json", {"system": {"perm": [1, 0, 3, 2]}, "subset": [0]})
        assert main(["induce", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
        assert "misses A" in capsys.readouterr().err

    def test_induce_restricts_observables(self, tmp_path):
        cfg = write_json(tmp_path / "i.json", {
            "system": {"cyclic": 4}, "subset": [0, 2],
            "observables": {"inline": [{"labels": [0, 1, 0, 1], "values": [[1, 0], [-1, 0]]}]}})
        assert main(["induce", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        restricted = json.loads((tmp_path / "o" / "restricted.json").read_text())
        assert restricted[0]["mean_drift"] == [1.0, 0.0]

    def test_spectrum(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {
            "system": {"cyclic": 2}, "observables": {"inline": [{"labels": [0, 1], "values": [[1, 0], [-1, 0]]}]}})
        assert main(["spectrum", "--config", cfg, "--out", str(tmp_path / "o"), "--order", "4"]) == 0
        m = json.loads((tmp_path / "o" / "spectrum_f1.json").read_text())
        assert [c[0] for c in m["coeffs"]] == [1, -1, 1, -1, 1, -1, 1, -1, 1]

    def test_thread_env_validated(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("INDUCED_SPECTRUM_THREADS", "zero")
        cfg = write_json(tmp_path / "i.json", {"system": {"cyclic": 5}, "subset": [0]})
        assert main(["induce", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "INDUCED_SPECTRUM_THREADS" in capsys.readouterr().err

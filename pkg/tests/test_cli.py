import json
import subprocess
import sys

import pytest

from fracml.cli import ConfigError, load_config, main, resolve_section

GAMMA_GRID = """[fode]
scheme = gl
alpha = 0.4
beta = 0.3
gamma = 1/4, 1/2, 1, 2, 4
y0 = 5
tau = 0.1
horizon = 10000
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(cfg, out, *extra):
    return main([extra[0] if extra else cfg.stem, "--config", str(cfg), "--out", str(out)]
                + list(extra[1:]))


def outputs(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


class TestValidation:
    def test_beta_at_boundary(self, tmp_path, capsys):
        cfg = write(tmp_path, "[fode]\nalpha = 0.5\nbeta = -0.5\n")
        assert main(["fode", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "'beta'" in err
        assert not (tmp_path / "o").exists()

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write(tmp_path, "[fode]\nalpha = 0.5\nbeta = 0.1\nbogus = 3\n")
        assert main(["fode", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "'bogus'" in capsys.readouterr().err

    def test_unknown_section(self, tmp_path, capsys):
        cfg = write(tmp_path, "[fode]\nalpha = 0.5\nbeta = 0.1\n[extra]\nx = 1\n")
        assert main(["fode", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "'extra'" in capsys.readouterr().err

    def test_missing_section_and_key(self, tmp_path):
        cfg = write(tmp_path, "[pde]\nalpha = 0.5\n")
        assert main(["fode", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        with pytest.raises(ConfigError) as info:
            load_config(cfg, "pde")
        assert info.value.key == "beta"

    @pytest.mark.parametrize("section,key", [
        ({"alpha": "1.2", "beta": "0"}, "alpha"),
        ({"alpha": "0.5", "beta": "0.1", "gamma": "0"}, "gamma"),
        ({"alpha": "0.5", "beta": "0.1", "tau": "0.3", "horizon": "1"}, "horizon"),
        ({"alpha": "0.5", "beta": "0.1", "tau": "x"}, "tau"),
        ({"alpha": "0.5, 0.6, 0.7", "beta": "0.1, 0.2"}, "beta"),
        ({"alpha": "0.5", "beta": "0.1", "lag": "2.5"}, "lag"),
        ({"alpha": "0.5", "beta": "0.1", "engine": "gpu"}, "engine"),
    ])
    def test_named_key(self, section, key):
        with pytest.raises(ConfigError) as info:
            resolve_section("fode", section)
        assert info.value.key == key

    def test_fraction_and_case(self):
        raw, v = resolve_section("fode", {"alpha": "0.4", "beta": "0.3", "gamma": "1/4", "K": "2"})
        assert v["gamma"] == [0.25] and v["K"] == 2.0 and raw["gamma"] == "1/4"
        with pytest.raises(ConfigError):
            resolve_section("fode", {"alpha": "0.4", "beta": "0.3", "k": "2"})

    def test_missing_file(self, tmp_path):
        assert main(["fode", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == 1


class TestWeights:
    def test_gl_half_all_pass(self, tmp_path):
        cfg = write(tmp_path, "[weights]\nscheme = gl\nalpha = 0.5\nn_max = 1000\nplateau_lo = 100\n")
        out = tmp_path / "o"
        assert main(["weights", "--config", str(cfg), "--out", str(out)]) == 0
        rows = (out / "certification.csv").read_text().splitlines()
        assert rows[0] == "scheme,alpha,check,status,detail"
        assert all(r.split(",")[3] == "pass" for r in rows[1:])
        assert len(rows) >= 7
        man = json.loads((out / "manifest.json").read_text())
        entry = man["summary"]["tables"]["gl_alpha_0.5"]
        assert entry["c3"] < entry["c4"] and man["status"] == 0
        assert (out / "weights_gl_alpha_0.5.csv").read_text().startswith("n,omega,delta\n")


class TestFode:
    def test_table_layout(self, tmp_path):
        cfg = write(tmp_path, GAMMA_GRID)
        out = tmp_path / "o"
        assert main(["fode", "--config", str(cfg), "--out", str(out)]) == 0
        lines = (out / "decay_table.csv").read_text().splitlines()
        assert lines[0] == "t_n,gamma=1/4,gamma=1/2,gamma=1,gamma=2,gamma=4"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["2000", "4000", "6000", "8000", "10000",
                                                         "rate"]
        assert all(len(ln.split(",")) == 6 for ln in lines)
        last = [float(x) for x in lines[5].split(",")[1:]]
        for got, ref in zip(last, [2.800263, 1.400176, 0.700137, 0.348967, 0.173348]):
            assert got == pytest.approx(ref, rel=2e-3)
        assert lines[6] == "rate,2.8,1.4,0.7,0.35,0.175"
        man = json.loads((out / "manifest.json").read_text())
        assert set(man["outputs"]) == {p.name for p in out.iterdir()} - {"manifest.json"}
        assert man["summary"]["decay_constants"]["gamma=1"]["c3"] > 0
        assert man["wall_time_s"] > 0

    def test_bit_identical_and_manifest_roundtrip(self, tmp_path):
        cfg = write(tmp_path, "[fode]\nalpha = 0.8\nbeta = -0.3\ngamma = 1, 2\nhorizon = 500\n"
                               "checkpoints = 100, 500\n")
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert main(["fode", "--config", str(cfg), "--out", str(a)]) == 0
        assert main(["fode", "--config", str(cfg), "--out", str(b)]) == 0
        assert outputs(a) == outputs(b)
        assert main(["fode", "--config", str(a / "manifest.json"), "--out", str(c)]) == 0
        assert outputs(c) == outputs(a)
        assert json.loads((c / "manifest.json").read_text())["config"] == \
            json.loads((a / "manifest.json").read_text())["config"]

    def test_engine_override(self, tmp_path):
        cfg = write(tmp_path, "[fode]\nalpha = 0.4\nbeta = 0.3\nhorizon = 300\nengine = fast\n"
                               "checkpoints = 300\n")
        assert main(["fode", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 0
        assert main(["fode", "--config", str(cfg), "--out", str(tmp_path / "n"),
                     "--engine", "naive"]) == 0
        man = json.loads((tmp_path / "n" / "manifest.json").read_text())
        assert man["config"]["fode"]["engine"] == "naive"
        fast = (tmp_path / "f" / "trajectory_alpha_0.4.csv").read_text().splitlines()
        naive = (tmp_path / "n" / "trajectory_alpha_0.4.csv").read_text().splitlines()
        assert abs(float(fast[-1].split(",")[2]) - float(naive[-1].split(",")[2])) <= 1e-12


class TestPde:
    BASE = "[pde]\nalpha = 0.5\nbeta = 0.3\nm = 12\ntau = 0.1\nhorizon = 5\ncheckpoints = 2,5\n"

    def test_run(self, tmp_path):
        out = tmp_path / "o"
        assert main(["pde", "--config", str(write(tmp_path, self.BASE)), "--out", str(out)]) == 0
        norms = (out / "norms_alpha_0.5.csv").read_text().splitlines()
        assert norms[0] == "n,t,norm" and len(norms) == 52
        run_ = json.loads((out / "manifest.json").read_text())["summary"]["runs"]["alpha=0.5"]
        assert run_["norm_inequality_passed"] and run_["min_nodal_value"] > 0

    def test_nonconvergence_exit_2(self, tmp_path, capsys):
        cfg = write(tmp_path, self.BASE + "max_iter = 1\n")
        assert main(["pde", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "step 1" in capsys.readouterr().err


class TestBarriers:
    def test_audit(self, tmp_path):
        cfg = write(tmp_path, "[barriers]\nalpha = 0.4\nbeta = 0.3\ngamma = 2\nn_steps = 2000\n")
        out = tmp_path / "o"
        assert main(["barriers", "--config", str(cfg), "--out", str(out)]) == 0
        lines = (out / "barrier_audit.csv").read_text().splitlines()
        assert lines[0] == "n,t,sub,mid,sup,slack_sub,slack_sup" and len(lines) == 2002
        s = json.loads((out / "manifest.json").read_text())["summary"]
        assert s["passed"] and s["envelope_violations"] == 0 and s["C5"] <= s["C6"]

    def test_source_needs_large_y0(self, tmp_path, capsys):
        cfg = write(tmp_path, "[barriers]\nalpha = 0.4\nbeta = 0.3\nK = 1\ny0 = 0.01\n"
                               "n_steps = 500\n")
        assert main(["barriers", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "'y0'" in capsys.readouterr().err


class TestSweep:
    def test_threads_and_subdirs(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FRACML_THREADS", "2")
        cfg = write(tmp_path, "[sweep]\ncommand = fode\nvary = gamma\nvalues = 1/2, 1, 2\n"
                               "[fode]\nalpha = 0.4\nbeta = 0.3\nhorizon = 200\ncheckpoints = 200\n")
        out = tmp_path / "o"
        assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["threads"] == 2
        subdirs = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert subdirs == ["gamma_1", "gamma_1over2", "gamma_2"]
        for d in subdirs:
            assert (out / d / "decay_table.csv").exists()
            assert json.loads((out / d / "manifest.json").read_text())["status"] == 0
        # each subdirectory reproduces a standalone run
        single = tmp_path / "single"
        assert main(["fode", "--config", str(out / "gamma_2" / "manifest.json"),
                     "--out", str(single)]) == 0
        assert outputs(single) == outputs(out / "gamma_2")

    def test_bad_value_fails_before_running(self, tmp_path):
        cfg = write(tmp_path, "[sweep]\ncommand = fode\nvary = gamma\nvalues = 1, -1\n"
                               "[fode]\nalpha = 0.4\nbeta = 0.3\nhorizon = 200\n")
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert not (tmp_path / "o").exists()

    def test_bad_thread_cap(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FRACML_THREADS", "zero")
        cfg = write(tmp_path, "[sweep]\ncommand = fode\nvary = gamma\nvalues = 1\n"
                               "[fode]\nalpha = 0.4\nbeta = 0.3\nhorizon = 10\n")
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, "[fode]\nalpha = 0.5\nbeta = -0.5\n")
    proc = subprocess.run([sys.executable, "-m", "fracml", "fode", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 1 and "beta" in proc.stderr

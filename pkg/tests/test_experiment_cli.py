import json
from pathlib import Path

import pytest

import dsblo.verify as verify_mod
from dsblo.cli import main
from dsblo.errors import ConfigError
from dsblo.experiment import (CSV_HEADER, config_from_dict, load_config,
                              run_experiment, write_objective_svg)


def tiny_config(tmp_path, **over):
    doc = {
        "instance": {"d_u": 6, "d_l": 6, "k": 3, "seed": 1},
        "algorithms": [
            {"name": "dsblo", "label": "dsblo", "T": 30, "beta": 0.9,
             "gamma1": 10.0, "gamma2": 30.0, "K": 5, "delta_y": 1e-8},
            {"name": "igd", "label": "igd", "T": 30, "step": 0.02},
        ],
        "seeds": [1],
        "output_dir": str(tmp_path / "out"),
        "eval_every": 1,
    }
    doc.update(over)
    return doc


class TestConfig:
    def test_requires_algorithms(self, tmp_path):
        with pytest.raises(ConfigError, match="no algorithms"):
            config_from_dict(tiny_config(tmp_path, algorithms=[]))

    def test_requires_instance(self, tmp_path):
        doc = tiny_config(tmp_path)
        del doc["instance"]
        with pytest.raises(ConfigError, match="instance"):
            config_from_dict(doc)

    def test_unique_labels(self, tmp_path):
        doc = tiny_config(tmp_path)
        doc["algorithms"][1]["label"] = "dsblo"
        with pytest.raises(ConfigError, match="unique"):
            config_from_dict(doc)

    def test_unknown_algorithm(self, tmp_path):
        doc = tiny_config(tmp_path, algorithms=[{"name": "newton", "T": 5}])
        with pytest.raises(ConfigError, match="unknown name"):
            config_from_dict(doc)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError, match="format"):
            config_from_dict(tiny_config(tmp_path, formats=["png"]))

    def test_missing_instance_file(self, tmp_path):
        doc = tiny_config(tmp_path, instance={"path": "nope.json"})
        with pytest.raises(ConfigError, match="not found"):
            config_from_dict(doc, base_dir=tmp_path)

    def test_load_config_bad_json(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(p)


class TestRunExperiment:
    def test_outputs(self, tmp_path):
        cfg = config_from_dict(tiny_config(tmp_path))
        summary = run_experiment(cfg)
        assert not summary["failed"]
        out = Path(summary["output_dir"])
        csvs = sorted(p.name for p in out.glob("*.csv"))
        assert csvs == ["dsblo.csv", "igd.csv"]
        assert (out / "objective_vs_time.svg").exists()
        assert (out / "summary.json").exists()
        assert (out / "dsblo.runlog.json").exists()
        header = (out / "dsblo.csv").read_text().splitlines()[0]
        assert header == CSV_HEADER == "t,wall_time_s,F,eta,m_norm,stationarity_norm,q_norm"
        meta = json.loads((out / "dsblo.runlog.json").read_text())
        assert meta["instance_fingerprint"] == summary["instance_fingerprint"]
        assert meta["diagnostics"]["displacement"]["violations"] == 0

    def test_seed_suffixed_filenames(self, tmp_path):
        cfg = config_from_dict(tiny_config(tmp_path, seeds=[1, 2, 3]))
        summary = run_experiment(cfg)
        out = Path(summary["output_dir"])
        names = sorted(p.name for p in out.glob("dsblo_seed*.csv"))
        assert names == ["dsblo_seed1.csv", "dsblo_seed2.csv", "dsblo_seed3.csv"]

    def test_failure_recorded_others_proceed(self, tmp_path):
        doc = tiny_config(tmp_path)
        doc["algorithms"][1]["step"] = -1.0  # invalid; must not sink the dsblo run
        summary = run_experiment(config_from_dict(doc))
        assert summary["failed"]
        by_label = {r["label"]: r for r in summary["runs"]}
        assert by_label["dsblo"]["status"] == "ok"
        assert by_label["igd"]["status"] == "error"

    def test_worker_pool_matches_serial(self, tmp_path):
        doc = tiny_config(tmp_path, seeds=[1, 2])
        s1 = run_experiment(config_from_dict({**doc, "output_dir": str(tmp_path / "a"),
                                              "workers": 1}))
        s2 = run_experiment(config_from_dict({**doc, "output_dir": str(tmp_path / "b"),
                                              "workers": 4}))
        for f in ("dsblo_seed1.csv", "igd_seed2.csv"):
            a = (Path(s1["output_dir"]) / f).read_text().splitlines()
            b = (Path(s2["output_dir"]) / f).read_text().splitlines()
            assert [l.split(",")[2:] for l in a] == [l.split(",")[2:] for l in b]

    def test_env_overrides(self, tmp_path, monkeypatch):
        other = tmp_path / "env_out"
        monkeypatch.setenv("DSBLO_OUT_DIR", str(other))
        cfg = config_from_dict(tiny_config(tmp_path))
        summary = run_experiment(cfg)
        assert Path(summary["output_dir"]) == other
        assert other.exists()

    def test_wall_clock_budget_truncates(self, tmp_path):
        doc = tiny_config(tmp_path, wall_clock_budget_s=0.0)
        doc["algorithms"] = [doc["algorithms"][0]]
        doc["algorithms"][0]["T"] = 5000
        summary = run_experiment(config_from_dict(doc))
        assert summary["runs"][0]["truncated"]

    def test_instance_from_file(self, tmp_path):
        from dsblo.problem import generate_instance, save_instance, fingerprint
        inst = generate_instance(6, 6, 3, seed=1)
        p = tmp_path / "inst.json"
        save_instance(inst, p)
        doc = tiny_config(tmp_path, instance={"path": str(p)})
        summary = run_experiment(config_from_dict(doc))
        assert summary["instance_fingerprint"] == fingerprint(inst)


class TestSvg:
    def test_polyline_and_legend(self, tmp_path):
        p = tmp_path / "plot.svg"
        write_objective_svg(
            [{"label": "alg<1>", "time": [0.0, 1.0, 2.0], "value": [3.0, 1.0, 0.5]}], p)
        text = p.read_text()
        assert "<polyline" in text
        assert "alg&lt;1&gt;" in text
        assert "wall time (s)" in text

    def test_empty_series(self, tmp_path):
        p = tmp_path / "empty.svg"
        write_objective_svg([], p)
        assert "</svg>" in p.read_text()


class TestCli:
    def test_generate_deterministic_fingerprint(self, tmp_path, capsys):
        out = tmp_path / "inst.json"
        args = ["generate", "--du", "10", "--dl", "10", "--k", "5",
                "--seed", "1", "-o", str(out)]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        second = capsys.readouterr().out
        fp1 = [l for l in first.splitlines() if l.startswith("fingerprint")]
        fp2 = [l for l in second.splitlines() if l.startswith("fingerprint")]
        assert fp1 == fp2 and fp1

    def test_generate_k_zero(self, tmp_path):
        out = tmp_path / "boxed.json"
        assert main(["generate", "--du", "3", "--dl", "3", "--k", "0",
                     "--seed", "0", "-o", str(out)]) == 0
        from dsblo.problem import load_instance
        inst = load_instance(out)
        assert inst.constraints.n_random_rows == 0
        assert inst.constraints.k == 6

    def test_generate_no_box_rejected(self, tmp_path, capsys):
        rc = main(["generate", "--du", "3", "--dl", "3", "--k", "2",
                   "--seed", "0", "--no-box", "-o", str(tmp_path / "x.json")])
        assert rc == 1
        assert "bounded" in capsys.readouterr().err

    def test_inspect(self, tmp_path, capsys):
        out = tmp_path / "inst.json"
        main(["generate", "--du", "4", "--dl", "5", "--k", "2", "--seed", "3",
              "-o", str(out)])
        capsys.readouterr()
        assert main(["inspect", str(out)]) == 0
        text = capsys.readouterr().out
        assert "d_u=4 d_l=5" in text
        assert "2 random" in text

    def test_inspect_missing_file(self, tmp_path, capsys):
        assert main(["inspect", str(tmp_path / "missing.json")]) == 1

    def test_run_end_to_end(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_config(tmp_path)))
        assert main(["run", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "[ok] dsblo" in out and "[ok] igd" in out

    def test_run_bad_config(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_config(tmp_path, algorithms=[])))
        assert main(["run", "--config", str(cfg_path)]) == 2

    def test_verify_wiring(self, capsys, monkeypatch):
        canned = [verify_mod.CheckResult("a", True, "fine", 0.1),
                  verify_mod.CheckResult("b", False, "broken", 0.2)]
        monkeypatch.setattr("dsblo.cli.verify_mod.run_verify", lambda level: canned)
        assert main(["verify", "--level", "fast", "--json"]) == 1
        out = capsys.readouterr().out
        assert "PASS a" in out and "FAIL b" in out
        assert '"passed": false' in out

    def test_verify_detects_tampered_gradient(self, monkeypatch):
        # fault injection: a sign flip in the gradient assembly must trip the
        # finite-difference gate
        real = verify_mod.implicit_gradient

        def flipped(problem, x, sol):
            g = real(problem, x, sol)
            return type(g)(grad=-g.grad, jac_y=g.jac_y, jac_lambda=g.jac_lambda,
                           used_approx=g.used_approx, component=g.component)

        monkeypatch.setattr(verify_mod, "implicit_gradient", flipped)
        res = verify_mod.check_implicit_fd(n_instances=1, n_points=2)
        assert not res.passed

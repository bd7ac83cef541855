import csv
import json

import numpy as np
import pytest

from shapecal.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from shapecal.forward import BendingBumpModel
from shapecal.geometry import InterfaceMesh
from shapecal.pipeline import PipelineConfig, read_convergence_csv, read_training_csv

SMALL = {
    "design": {"n_train": 40},
    "gp": {"restarts": 1, "maxiter": 100},
    "smc": {"n_particles": 300, "n_rejuvenation": 3, "zeta": 0.95},
    "analysis": {"map_bins": 10, "hist_bins": 10, "kde_mode": "silverman", "kde_points": 50},
    "gp_convergence": None,
}


def write_config(tmp_path, data, name="run.json"):
    data = dict(data)
    data.setdefault("output_dir", "out")
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def merged(*blocks):
    out = {}
    for b in blocks:
        for k, v in b.items():
            out[k] = {**out[k], **v} if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def numeric_artifacts(out_dir):
    return {p.relative_to(out_dir).as_posix(): p.read_bytes()
            for p in sorted(out_dir.rglob("*")) if p.suffix in (".csv", ".json") and p.name != "manifest.json"}


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig.from_dict({})
        assert cfg.box.dim == 2 and cfg.smc.n_particles == 5000 and cfg.smc.zeta == 0.995
        assert cfg.names == ["E_1", "nu_1"]

    @pytest.mark.parametrize("data", [{"bogus": 1}, {"smc": {"zeta": 1.0}}, {"gp": {"kernel": "rbf"}},
                                      {"design": {"n_train": 1}}, {"priors": [{"kind": "uniform", "lo": 0,
                                                                               "hi": 1}]}])
    def test_invalid_config_exit_code(self, tmp_path, data, capsys):
        assert main(["generate-obs", "--config", str(write_config(tmp_path, data))]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_unreadable_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["generate-obs", "--config", str(bad)]) == EXIT_CONFIG
        assert main(["generate-obs", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    def test_seed_override(self):
        cfg = PipelineConfig.from_dict({}).with_seed(11)
        assert cfg.data["observation"]["seed"] == cfg.data["gp"]["seed"] == cfg.data["smc"]["seed"] == 11


class TestGenerateObs:
    def test_default_apex(self, tmp_path):
        assert main(["generate-obs", "--out", str(tmp_path / "o")]) == EXIT_OK
        obs = InterfaceMesh.load(tmp_path / "o" / "observation.json")
        ref = BendingBumpModel().reference().nodes
        apex = np.argmax(ref[:, 1])
        assert obs.nodes[apex, 0] - ref[apex, 0] == pytest.approx(0.05, rel=1e-12)

    def test_noisy_rerun_identical(self, tmp_path):
        cfg = write_config(tmp_path, {"observation": {"sigma_obs": 0.001, "seed": 5}})
        for out in ("a", "b"):
            assert main(["generate-obs", "--config", str(cfg), "--out", str(tmp_path / out)]) == EXIT_OK
        assert (tmp_path / "a/observation.json").read_bytes() == (tmp_path / "b/observation.json").read_bytes()

    def test_failing_ground_truth(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"observation": {"E": [50.0]}})
        assert main(["generate-obs", "--config", str(cfg)]) == EXIT_STAGE
        assert "stage failure" in capsys.readouterr().err


class TestDesignEval:
    def run(self, tmp_path, name, n_train, workers=1):
        cfg = write_config(tmp_path, {"design": {"n_train": n_train}, "output_dir": name}, f"{name}.json")
        assert main(["generate-obs", "--config", str(cfg)]) == EXIT_OK
        assert main(["design-eval", "--config", str(cfg), "--workers", str(workers)]) == EXIT_OK
        return tmp_path / name / "training.csv"

    def test_worker_count_independent(self, tmp_path):
        a = self.run(tmp_path, "w1", 10, 1)
        b = self.run(tmp_path, "w2", 10, 2)
        assert a.read_bytes() == b.read_bytes()
        names, train, _ = read_training_csv(a)
        assert names == ["E_1", "nu_1"] and train.inputs.shape == (10, 2)

    def test_failure_corner(self, tmp_path):
        _, train, D = read_training_csv(self.run(tmp_path, "c", 200))
        E, nu = train.inputs[:, 0], train.inputs[:, 1]
        corner = (E <= 153) & (nu <= 0)
        assert np.any(train.failed_mask[corner])
        assert np.all(np.isnan(train.log_liks[train.failed_mask])) and np.all(np.isnan(D[train.failed_mask]))
        assert np.all(np.isfinite(train.log_liks[~train.failed_mask]))

    def test_prefix(self, tmp_path):
        _, small, _ = read_training_csv(self.run(tmp_path, "s", 100))
        _, big, _ = read_training_csv(self.run(tmp_path, "b", 1000))
        np.testing.assert_array_equal(big.inputs[:100], small.inputs)
        np.testing.assert_array_equal(big.failed_mask[:100], small.failed_mask)

    def test_all_failed(self, tmp_path):
        cfg = write_config(tmp_path, {"priors": [{"name": "E_1", "kind": "uniform", "lo": 100, "hi": 110},
                                                 {"name": "nu_1", "kind": "uniform", "lo": -0.8, "hi": -0.7}]})
        assert main(["generate-obs", "--config", str(cfg)]) == EXIT_OK
        assert main(["design-eval", "--config", str(cfg)]) == EXIT_STAGE


class TestStages:
    def test_missing_upstream_names_stage(self, tmp_path, capsys):
        assert main(["fit-gp", "--out", str(tmp_path / "x")]) == EXIT_STAGE
        assert "design-eval" in capsys.readouterr().err
        assert main(["smc", "--out", str(tmp_path / "x")]) == EXIT_STAGE
        assert "fit-gp" in capsys.readouterr().err

    def test_end_to_end_noop_and_force(self, tmp_path):
        cfg = str(write_config(tmp_path, SMALL))
        assert main(["pipeline", "--config", cfg]) == EXIT_OK
        out = tmp_path / "out"
        summary = json.loads((out / "analysis/summary.json").read_text())
        assert len(summary["posterior_mean"]) == 2 and "laplace" in summary
        with open(out / "particles.csv") as fh:
            assert len(list(csv.reader(fh))) == 301
        before = numeric_artifacts(out)
        runs = len(json.loads((out / "manifest.json").read_text())["runs"])
        assert main(["pipeline", "--config", cfg]) == EXIT_OK
        assert len(json.loads((out / "manifest.json").read_text())["runs"]) == runs
        assert main(["smc", "--config", cfg, "--force"]) == EXIT_OK
        assert len(json.loads((out / "manifest.json").read_text())["runs"]) == runs + 1
        assert numeric_artifacts(out) == before

    def test_stage_isolation(self, tmp_path):
        cfg = str(write_config(tmp_path, SMALL))
        assert main(["pipeline", "--config", cfg]) == EXIT_OK
        out = tmp_path / "out"
        before = numeric_artifacts(out)
        for f in (out / "analysis").iterdir():
            f.unlink()
        (out / "particles.csv").unlink()
        assert main(["pipeline", "--config", cfg]) == EXIT_OK
        assert numeric_artifacts(out) == before

    def test_seed_determinism(self, tmp_path):
        data = merged(SMALL, {"observation": {"sigma_obs": 0.001}})
        cfg = str(write_config(tmp_path, data))
        for out in ("r1", "r2"):
            assert main(["pipeline", "--config", cfg, "--out", str(tmp_path / out), "--seed-override", "3"]) == 0
        assert numeric_artifacts(tmp_path / "r1") == numeric_artifacts(tmp_path / "r2")

    def test_gp_convergence(self, tmp_path):
        cfg = str(write_config(tmp_path, {"gp": {"restarts": 2}, "gp_convergence": {"sizes": [50, 100, 200]}}))
        assert main(["generate-obs", "--config", cfg]) == EXIT_OK
        assert main(["gp-convergence", "--config", cfg]) == EXIT_OK
        n, err = read_convergence_csv(tmp_path / "out/gp_convergence.csv")
        np.testing.assert_array_equal(n, [50, 100, 200])
        assert err[-1] < err[0]

    def test_gp_convergence_disabled(self, tmp_path):
        cfg = str(write_config(tmp_path, {"gp_convergence": None}))
        assert main(["generate-obs", "--config", cfg]) == EXIT_OK
        assert main(["gp-convergence", "--config", cfg]) == EXIT_STAGE

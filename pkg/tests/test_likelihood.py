import json
import math

import numpy as np
import pytest
from scipy import integrate

from shapecal.forward import BendingBumpModel, ModelParams, UncertainConditions
from shapecal.likelihood import (LikelihoodConfig, ObservationError, generate_observation, log_likelihood,
                                 write_observation)

GT = ModelParams([400.0], [0.3])
THETA = UncertainConditions(100.0)


def test_zero_discrepancy_ten_terms():
    assert log_likelihood(0.0, LikelihoodConfig(0.01, 10)) == pytest.approx(-5 * math.log(2 * math.pi * 1e-4),
                                                                            rel=1e-14)
    # quoted elsewhere as 36.8628; the exact value is 36.86232
    assert log_likelihood(0.0, LikelihoodConfig(0.01, 10)) == pytest.approx(36.8628, abs=1e-3)


def test_one_sigma():
    assert log_likelihood(1.0, LikelihoodConfig(1.0, 1)) == pytest.approx(-1.41894, abs=1e-5)


def test_monotone_and_vectorized():
    D = np.linspace(0, 1, 50)
    L = log_likelihood(D, LikelihoodConfig.from_variance(0.0005))
    assert L.shape == (50,) and np.all(np.diff(L) < 0)


def test_density_normalizes():
    cfg = LikelihoodConfig(0.3, 1)
    total = integrate.quad(lambda d: math.exp(log_likelihood(d, cfg)), -np.inf, np.inf)[0]
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("kw", [{"sigma_n": 0.0}, {"sigma_n": 1.0, "n_terms": 0}, {"sigma_n": 1.0, "n_terms": 1.5}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        LikelihoodConfig(**kw)


def test_noise_free_observation_is_ground_truth():
    obs = generate_observation(GT, THETA, 0.0, seed=3)
    want = BendingBumpModel().deform(GT, THETA).mesh
    assert obs.nodes.tobytes() == want.nodes.tobytes()


def test_seeded_noise():
    a = generate_observation(GT, THETA, 0.001, seed=1)
    b = generate_observation(GT, THETA, 0.001, seed=1)
    c = generate_observation(GT, THETA, 0.001, seed=2)
    assert a.nodes.tobytes() == b.nodes.tobytes()
    assert not np.array_equal(a.nodes, c.nodes)


def test_noise_level():
    truth = BendingBumpModel().deform(GT, THETA).mesh.nodes
    resid = np.stack([generate_observation(GT, THETA, 0.001, seed=s).nodes - truth for s in range(10_000)])
    per_coord_std = resid.std(axis=0)
    assert np.all(np.abs(per_coord_std / 0.001 - 1) < 0.05)


def test_failing_ground_truth():
    with pytest.raises(ObservationError):
        generate_observation(ModelParams([50.0], [0.3]), THETA, 0.0, seed=0)


def test_provenance_sidecar(tmp_path):
    obs = generate_observation(GT, THETA, 0.001, seed=4)
    side = write_observation(obs, tmp_path / "obs.json", GT, THETA, 0.001, 4)
    meta = json.loads(side.read_text())
    assert meta == {"E": [400.0], "nu": [0.3], "v_in": 100.0, "sigma_obs": 0.001, "seed": 4}
    assert (tmp_path / "obs.json").exists()

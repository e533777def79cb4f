import numpy as np
import pytest

from ambientflow.diffengine import Streams, Tensor, backward, no_grad, ops
from ambientflow.errors import ConfigError, NumericError
from ambientflow.flowcore import build_conditional_flow, build_flow
from ambientflow.imaging import MeasurementModel, SparsityModel
from ambientflow.inference import (AffineGaussianPosterior, gaussian_flow, linear_gaussian_posterior,
                                   log_evidence)
from ambientflow.objectives import (ObjectiveConfig, ambient_bound, ambient_terms, bound_ordering,
                                    constraint_monitor, elbo, logavgexp, nll, practical_objective)

from helpers import perturb


def _pair(n=2, m=2, seed=0):
    prior = perturb(build_flow(n, 2, 8, seed=seed), seed=seed)
    post = perturb(build_conditional_flow(n, m, 2, 8, 4, seed=seed + 1), seed=seed + 1)
    return prior, post


def test_objective_config_validation():
    with pytest.raises(ConfigError):
        ObjectiveConfig(M=0)
    with pytest.raises(ConfigError):
        ObjectiveConfig(lam=-1)
    with pytest.raises(ConfigError):
        ObjectiveConfig(mu=1.0)


def test_nll_of_identity_flow_is_gaussian_entropy():
    flow = build_flow(3, 2, 8, actnorm=False, mix="none")
    x = np.random.default_rng(0).standard_normal((20_000, 3))
    with no_grad():
        val = nll(flow, x).item()
    assert val == pytest.approx(1.5 * np.log(2 * np.pi * np.e), abs=4 * np.sqrt(1.5 / 20_000))


def test_practical_reduces_to_bound():
    prior, post = _pair()
    meas = MeasurementModel("identity", (2,), 0.45)
    g = np.random.default_rng(1).standard_normal((6, 2))
    s = Streams(3)
    with no_grad():
        a = practical_objective(prior, post, meas, g, ObjectiveConfig(M=4), streams=s, step=2)
        b = ambient_bound(prior, post, meas, g, 4, streams=s, step=2)
    assert a.value.item() == b.item()
    assert a.bound == pytest.approx(b.item(), abs=1e-12)


def test_lambda_zero_ignores_measurement():
    prior, post = _pair()
    for name, t in post.params.items():
        if name.startswith("cond"):
            t.data = np.zeros_like(t.data)
    meas = MeasurementModel("identity", (2,), 0.45)
    rng = np.random.default_rng(2)
    g = rng.standard_normal((5, 2))
    zeta = rng.standard_normal((3, 5, 2))
    cfg = ObjectiveConfig(M=3, lam=0.0)
    with no_grad():
        a = practical_objective(prior, post, meas, g, cfg, zeta=zeta).value.item()
        b = practical_objective(prior, post, meas, g + 3.0, cfg, zeta=zeta).value.item()
        c = practical_objective(prior, post, meas, g + 3.0, ObjectiveConfig(M=3), zeta=zeta).value.item()
    assert a == pytest.approx(b, abs=1e-12)
    assert c != pytest.approx(a)


def test_exact_posterior_makes_bound_equal_evidence():
    rng = np.random.default_rng(4)
    mean = np.array([0.5, -1.0, 0.2])
    L = rng.standard_normal((3, 3))
    cov = L @ L.T + 0.5 * np.eye(3)
    H = rng.standard_normal((2, 3))
    prior = gaussian_flow(mean, cov)
    post = AffineGaussianPosterior(*linear_gaussian_posterior(mean, cov, H, 0.3))
    meas = MeasurementModel("dense", (3,), 0.3, matrix=H)
    g = rng.standard_normal((4, 2))
    truth = log_evidence(mean, cov, H, 0.3, g).mean()
    for M in (1, 5):
        with no_grad():
            val = ambient_bound(prior, post, meas, g, M, streams=Streams(0)).item()
        assert val == pytest.approx(truth, abs=1e-9)


def test_bound_increases_with_M():
    prior, post = _pair(seed=3)
    meas = MeasurementModel("identity", (2,), 0.45)
    g = np.random.default_rng(5).standard_normal((4000, 2))
    est = bound_ordering(prior, post, meas, g, (1, 4, 16), Streams(0))
    assert est[1][0] < est[4][0] < est[16][0]


def test_objective_gradients_match_finite_differences():
    prior, post = _pair(seed=6)
    meas = MeasurementModel("identity", (2,), 0.45)
    rng = np.random.default_rng(7)
    g = rng.standard_normal((3, 2))
    zeta = rng.standard_normal((4, 3, 2))
    name = post.params.names()[3]
    tensor = post.params[name]
    base = tensor.data.copy()

    h = 1e-6
    tensor.grad = None
    val = practical_objective(prior, post, meas, g, ObjectiveConfig(M=4, lam=0.8), zeta=zeta).value
    backward(val)
    ana = tensor.grad.copy()
    num = np.zeros_like(base)
    for i in range(base.size):
        for sgn in (1, -1):
            d = base.copy()
            d.flat[i] += sgn * h
            tensor.data = d
            with no_grad():
                v = practical_objective(prior, post, meas, g, ObjectiveConfig(M=4, lam=0.8), zeta=zeta).value.item()
            num.flat[i] += sgn * v / (2 * h)
    tensor.data = base
    assert np.max(np.abs(ana - num) / (np.abs(num) + 1e-12)) < 1e-5


def test_nonfinite_term_is_named():
    prior, post = _pair()
    meas = MeasurementModel("identity", (2,), 0.45)
    for t in prior.params.tensors():
        t.data = t.data * 1e300
    with pytest.raises(NumericError, match="prior term"):
        with no_grad():
            ambient_terms(prior, post, meas, np.ones((2, 2)), 2, streams=Streams(0))


def test_constraint_monitor_zero_for_sparse_outputs():
    post = build_conditional_flow(4, 4, 2, 8, 4, actnorm=False, mix="none")
    sm = SparsityModel("identity", 4, (4,))
    assert constraint_monitor(post, sm, np.zeros((2, 4)), 3, Streams(0)) == 0.0
    sm1 = SparsityModel("identity", 1, (4,))
    assert constraint_monitor(post, sm1, np.zeros((2, 4)), 3, Streams(0)) > 0.0


def test_elbo_is_m1():
    prior, post = _pair()
    meas = MeasurementModel("identity", (2,), 0.45)
    g = np.ones((3, 2))
    with no_grad():
        assert elbo(prior, post, meas, g, streams=Streams(1), step=4).item() == \
            ambient_bound(prior, post, meas, g, 1, streams=Streams(1), step=4).item()


def test_logavgexp_alias():
    assert logavgexp(Tensor(np.zeros(4))).item() == 0.0

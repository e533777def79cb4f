import itertools

import numpy as np
import pytest

from ambientflow.diffengine import Streams, Tensor, no_grad
from ambientflow.diffengine.gradcheck import finite_diff_report
from ambientflow.errors import ConfigError
from ambientflow.imaging import (MeasurementModel, SparsityModel, gaussian_kernel, fourier_rows,
                                 gradient_sigma_min, project_sk, project_topk, support_bases,
                                 topk_residual)


def _np(t):
    return t.data


KINDS = [
    dict(kind="identity", input_shape=(3, 4)),
    dict(kind="gaussian-blur", input_shape=(6, 6), blur_sigma=1.5),
    dict(kind="subsampled-fourier", input_shape=(8, 8), ratio=4),
    dict(kind="dense", input_shape=(5,), matrix=np.random.default_rng(0).standard_normal((3, 5))),
]


@pytest.mark.parametrize("spec", KINDS, ids=lambda s: s["kind"])
def test_adjoint_identity(spec, rng):
    meas = MeasurementModel(sigma_n=0.1, **spec)
    f = rng.standard_normal((2, meas.n))
    g = rng.standard_normal((2, meas.m))
    with no_grad():
        lhs = np.sum(meas.apply(Tensor(f)).data * g)
        rhs = np.sum(f * meas.adjoint(Tensor(g)).data)
    assert abs(lhs - rhs) < 1e-10 * max(1, abs(lhs))
    mat = meas.matrix()
    assert mat.shape == (meas.m, meas.n)
    with no_grad():
        assert np.allclose(meas.apply(Tensor(f)).data, f @ mat.T)
    assert meas.opnorm() == pytest.approx(np.linalg.norm(mat, 2), rel=1e-6)


def test_blur_impulse_gives_kernel():
    meas = MeasurementModel("gaussian-blur", (15, 15), 0.0, blur_sigma=1.5)
    imp = np.zeros(225)
    imp[0] = 1.0
    with no_grad():
        out = meas.apply(Tensor(imp)).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.allclose(out.reshape(15, 15), gaussian_kernel((15, 15), 1.5))
    k = gaussian_kernel((15, 15), 1.5)
    assert k[0, 0] == k.max() and k[0, 1] == pytest.approx(k[0, -1])


def test_fourier_keeps_quarter_of_rows():
    rows = fourier_rows(16, 4)
    assert len(rows) == 4 and 0 in rows
    meas = MeasurementModel("subsampled-fourier", (16, 16), 0.0, ratio=4)
    assert meas.m * 4 == 2 * 16 * 16  # real/imag pairs of 25% of the rows
    assert meas.output_shape == (2, 4, 16)


def test_fully_sampled_fourier_is_unitary(rng):
    meas = MeasurementModel("subsampled-fourier", (4, 4), 0.0, ratio=1)
    f = rng.standard_normal(16)
    with no_grad():
        back = meas.adjoint(meas.apply(Tensor(f))).data
    assert np.allclose(back, f)


def test_measure_noise_statistics():
    meas = MeasurementModel("identity", (1,), 0.3)
    f = np.zeros((100_000, 1))
    g = meas.measure(f, Streams(5))
    assert abs(g.std() - 0.3) < 0.01 * 0.3
    clean = MeasurementModel("identity", (1,), 0.0)
    assert np.array_equal(clean.measure(f[:4] + 1.0, Streams(5)), f[:4] + 1.0)


def test_noise_log_density_analytic(rng):
    meas = MeasurementModel("identity", (1,), 1.0)
    with no_grad():
        assert meas.noise_log_density(Tensor(np.zeros((1, 1)))).data[0] == pytest.approx(-0.5 * np.log(2 * np.pi))
    meas = MeasurementModel("identity", (3,), 0.4)
    r = rng.standard_normal((2, 3))
    want = -np.sum(r ** 2, 1) / (2 * 0.16) - 1.5 * np.log(2 * np.pi * 0.16)
    with no_grad():
        assert np.allclose(meas.noise_log_density(Tensor(r)).data, want)
    with pytest.raises(ConfigError):
        MeasurementModel("identity", (3,), 0.0).noise_log_density(Tensor(r))


def test_operator_errors():
    with pytest.raises(ConfigError):
        MeasurementModel("nonsense", (2,), 0.1)
    meas = MeasurementModel("identity", (3,), 0.1)
    with pytest.raises(ConfigError):
        meas.apply(Tensor(np.zeros(4)))


def test_descriptor_roundtrip(tmp_path):
    meas = MeasurementModel("subsampled-fourier", (8, 8), 0.05, ratio=4)
    again = MeasurementModel.from_descriptor(meas.descriptor())
    assert np.array_equal(again.matrix(), meas.matrix())
    meas.export(tmp_path / "H.aftn")
    from ambientflow.diffengine import aftn
    mask = aftn.load(tmp_path / "H.aftn")
    assert mask.shape == (8, 8) and mask.sum() == 2 * 8
    assert np.all(mask[fourier_rows(8, 4)] == 1.0)


def test_fourier_isometry(rng):
    from ambientflow.diffengine import ops
    x = rng.standard_normal((2, 8, 8))
    with no_grad():
        spec = ops.fft2(Tensor(np.stack([x, np.zeros_like(x)], axis=1))).data
    assert abs(np.linalg.norm(spec) - np.linalg.norm(x)) < 1e-9


def test_gradient_transform_scaling():
    for shape in [(1, 16), (4, 6), (8, 8)]:
        sm = SparsityModel("discrete-gradient-2d", 2, shape)
        phi = sm.matrix()
        assert phi.shape[1] == shape[0] * shape[1]
        assert np.linalg.norm(np.linalg.pinv(phi), 2) == pytest.approx(1.0, abs=1e-10)
        assert gradient_sigma_min(shape) > 0


def test_constant_image_zero_gradient():
    sm = SparsityModel("discrete-gradient-2d", 1, (5, 5))
    with no_grad():
        c = sm.sparsify(Tensor(np.full(25, 2.0))).data
    assert np.count_nonzero(np.abs(c) > 1e-12) == 1  # only the mean row
    assert sm.penalty(Tensor(np.full((1, 25), 2.0))).data[0] == pytest.approx(0.0, abs=1e-12)


def test_piecewise_with_few_jumps_has_zero_penalty():
    from ambientflow.training import make_piecewise, piecewise_sparsity_level
    ds = make_piecewise((1, 16), 1, 5, Streams(0))
    k = piecewise_sparsity_level((1, 16), 1)
    sm = SparsityModel("discrete-gradient-2d", k, (1, 16))
    with no_grad():
        assert np.all(np.abs(sm.penalty(Tensor(ds.objects())).data) < 1e-10)


def test_topk_examples():
    c = np.array([3.0, 1.0, 0.5, 0.2])
    assert np.array_equal(project_topk(c, 2), [3.0, 1.0, 0.0, 0.0])
    assert np.abs(topk_residual(c, 2)).sum() == pytest.approx(0.7)
    sm = SparsityModel("identity", 2, (4,))
    with no_grad():
        assert sm.penalty(Tensor(c)).data == pytest.approx(0.7)
    sparse = np.array([0.0, 2.0, 0.0, -1.0])
    assert np.array_equal(project_topk(sparse, 2), sparse)
    for bad in (0, -1, 5):
        with pytest.raises(ConfigError):
            project_topk(c, bad)


def test_penalty_gradient_away_from_ties(rng):
    sm = SparsityModel("discrete-gradient-2d", 3, (3, 3))
    rep = finite_diff_report(lambda t: sm.penalty(t)[0], rng.standard_normal((1, 9)))
    assert rep.max_rel_error < 1e-4


def test_support_bases_span_sk(rng):
    phi = SparsityModel("discrete-gradient-2d", 2, (1, 6)).matrix()
    supports, bases, dims = support_bases(phi, 2)
    assert len(supports) == sum(1 for _ in itertools.combinations(range(phi.shape[0]), 2))
    for T, B, d in zip(supports, bases, dims):
        x = B[:, :d] @ rng.standard_normal(d)
        c = phi @ x
        off = [i for i in range(phi.shape[0]) if i not in T]
        assert np.abs(c[off]).max() < 1e-10


def test_project_sk_is_nearest(rng):
    sm = SparsityModel("identity", 2, (5,))
    x = rng.standard_normal((10, 5))
    p = project_sk(x, sm)
    assert np.allclose(p, np.stack([project_topk(v, 2) for v in x]))


def test_project_sk_gradient_domain_brute_force(rng):
    sm = SparsityModel("discrete-gradient-2d", 2, (1, 5))
    phi = sm.matrix()
    x = rng.standard_normal((6, 5))
    p = project_sk(x, sm)
    for xi, pi in zip(x, p):
        best = np.inf
        for T in itertools.combinations(range(phi.shape[0]), 2):
            off = [i for i in range(phi.shape[0]) if i not in T]
            _, _, vt = np.linalg.svd(phi[off])
            rank = np.linalg.matrix_rank(phi[off])
            N = vt[rank:].T
            proj = N @ (N.T @ xi)
            best = min(best, np.linalg.norm(xi - proj))
        assert np.linalg.norm(xi - pi) == pytest.approx(best, abs=1e-10)
        assert np.count_nonzero(np.abs(phi @ pi) > 1e-9) <= 2


def test_support_budget():
    from ambientflow.errors import BudgetError
    with pytest.raises(BudgetError):
        support_bases(np.eye(40), 5, budget=1000)

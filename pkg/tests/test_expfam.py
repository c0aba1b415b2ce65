import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from vbrestore.errors import FamilyMismatchError, InvalidStateError
from vbrestore.expfam import (CategoricalField, CirculantGaussian, DiagonalGaussian,
                              DirichletFactor, GammaFactor, GaussianFactor, InverseGammaFactor,
                              PointMass, categorical_normalize, factor_entropy, gamma_mean,
                              kl_divergence)

# values obtained once by adaptive quadrature of -int q ln q and int q ln(q/p)
GAUSS_UNIT_ENTROPY = 1.4189385332046727
EXPONENTIAL_ENTROPY = 1.0
KL_SHIFTED_GAUSS = 0.5
KL_GAMMA_2_1_VS_2_2 = 0.6137056388801092

params = st.floats(0.1, 10.0)
pytestmark = pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")


def _quad(f, lo, hi):
    # split at a few points so the integrand peak is not missed
    pts = np.unique(np.clip([lo, 1e-3, 0.1, 1.0, 10.0, hi], lo, hi))
    return sum(integrate.quad(f, a, b, limit=400, epsabs=1e-12, epsrel=1e-12)[0]
               for a, b in zip(pts[:-1], pts[1:]))


def _positive_support(factor):
    if isinstance(factor, GammaFactor):
        m, s = factor.mean, np.sqrt(factor.variance)
    else:
        m = factor.scale / max(factor.shape - 1, 0.5)
        s = m * 3
    return 0.0, m + 60 * s + 50


@pytest.mark.parametrize("a,b,expected", [(2, 4, 0.5), (1, 1, 1.0), (3.5, 7, 0.5)])
def test_gamma_mean_examples(a, b, expected):
    assert gamma_mean(GammaFactor(a, b)) == expected


def test_frozen_entropies():
    assert factor_entropy(GaussianFactor([0.0], [[1.0]])) == pytest.approx(GAUSS_UNIT_ENTROPY, abs=1e-12)
    assert factor_entropy(GammaFactor(1, 1)) == pytest.approx(EXPONENTIAL_ENTROPY, abs=1e-12)
    zero = GaussianFactor([0.0], [[1 / (2 * np.pi * np.e)]])
    assert factor_entropy(zero) == pytest.approx(0.0, abs=1e-12)


def test_frozen_kls():
    q = GaussianFactor([1.0], [[1.0]])
    p = GaussianFactor([0.0], [[1.0]])
    assert kl_divergence(q, p) == pytest.approx(KL_SHIFTED_GAUSS, abs=1e-12)
    val = kl_divergence(GammaFactor(2, 1), GammaFactor(2, 2))
    assert val == pytest.approx(KL_GAMMA_2_1_VS_2_2, abs=1e-8)


@pytest.mark.parametrize("factor", [
    GammaFactor(2.5, 0.7), InverseGammaFactor(3.0, 2.0), GaussianFactor([1.0, 2.0], np.eye(2)),
    DirichletFactor((0.5, 2.0, 3.0)), CategoricalField(np.full((2, 2, 2), 0.5)),
    DiagonalGaussian(np.zeros((2, 2)), np.ones((2, 2))),
    CirculantGaussian(np.zeros((2, 3)), np.full((2, 3), 2.0)),
])
def test_kl_to_self_is_zero(factor):
    assert kl_divergence(factor, factor) == pytest.approx(0.0, abs=1e-12)


def test_family_mismatch_is_rejected():
    with pytest.raises(FamilyMismatchError):
        kl_divergence(GammaFactor(1, 1), InverseGammaFactor(1, 1))


def test_point_mass_has_no_entropy():
    with pytest.raises(InvalidStateError):
        PointMass(1.0).entropy()


@given(params, params)
def test_gamma_entropy_matches_quadrature(a, b):
    g = GammaFactor(a, b)
    lo, hi = _positive_support(g)

    def integrand(x):
        if x <= 0:
            return 0.0
        lp = g.log_pdf(x)
        return -np.exp(lp) * lp

    assert g.entropy() == pytest.approx(_quad(integrand, lo, hi), abs=1e-6)


@given(params, params, params, params)
def test_gamma_kl_matches_quadrature(a1, b1, a2, b2):
    q, p = GammaFactor(a1, b1), GammaFactor(a2, b2)
    lo, hi = _positive_support(q)

    def integrand(x):
        if x <= 0:
            return 0.0
        lq = q.log_pdf(x)
        return np.exp(lq) * (lq - p.log_pdf(x))

    assert q.kl(p) == pytest.approx(_quad(integrand, lo, hi), abs=1e-6)


@given(st.floats(1.5, 10.0), params)
def test_inverse_gamma_entropy_matches_quadrature(a, b):
    ig = InverseGammaFactor(a, b)

    def integrand(x):
        if x <= 0:
            return 0.0
        lp = ig.log_pdf(x)
        return -np.exp(lp) * lp

    # integrate in log-space for the heavy right tail
    val = integrate.quad(lambda t: integrand(np.exp(t)) * np.exp(t), -20, 40,
                         limit=400, epsabs=1e-12, epsrel=1e-12, points=[np.log(b / (a + 1))])[0]
    assert ig.entropy() == pytest.approx(val, abs=1e-6)


@given(params, params, st.floats(-3, 3), st.floats(-3, 3))
def test_gaussian_kl_matches_quadrature(v1, v2, m1, m2):
    q, p = GaussianFactor([m1], [[v1]]), GaussianFactor([m2], [[v2]])

    def integrand(x):
        lq = q.log_pdf(x)
        return np.exp(lq) * (lq - p.log_pdf(x))

    s = np.sqrt(v1)
    val = integrate.quad(integrand, m1 - 40 * s, m1 + 40 * s, limit=400,
                         epsabs=1e-12, epsrel=1e-12, points=[m1])[0]
    assert q.kl(p) == pytest.approx(val, abs=1e-6)


@given(params)
def test_gaussian_entropy_matches_quadrature(v):
    q = GaussianFactor([0.0], [[v]])
    s = np.sqrt(v)
    val = integrate.quad(lambda x: -np.exp(q.log_pdf(x)) * q.log_pdf(x), -40 * s, 40 * s,
                         limit=400, epsabs=1e-12, points=[0.0])[0]
    assert q.entropy() == pytest.approx(val, abs=1e-6)


@given(params, params)
def test_two_class_dirichlet_entropy_matches_quadrature(a1, a2):
    d = DirichletFactor((a1, a2))
    # on the simplex the two-class Dirichlet is a Beta density in pi_1
    from scipy.stats import beta
    assert d.entropy() == pytest.approx(float(beta(a1, a2).entropy()), abs=1e-6)


@given(st.integers(0, 2**32 - 1))
def test_gaussian_second_moment(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    cov = a @ a.T + np.eye(3)
    mu = rng.normal(size=3)
    g = GaussianFactor(mu, cov)
    np.testing.assert_array_equal(g.second_moment(), np.outer(mu, mu) + g.cov)


def test_circulant_and_dense_entropy_agree(rng):
    spec = rng.uniform(0.5, 3.0, (3, 3))
    spec = 0.5 * (spec + np.roll(spec[::-1, ::-1], 1, axis=(0, 1)))
    c = CirculantGaussian(rng.normal(size=(3, 3)), spec)
    dense = GaussianFactor(c.mean.ravel(), c.dense_cov())
    assert c.entropy() == pytest.approx(dense.entropy(), rel=1e-12)
    np.testing.assert_allclose(c.variance().ravel(), np.diag(c.dense_cov()), rtol=1e-12)


def test_circulant_kl_matches_dense(rng):
    def sym(s):
        return 0.5 * (s + np.roll(s[::-1, ::-1], 1, axis=(0, 1)))

    q = CirculantGaussian(rng.normal(size=(4, 4)), sym(rng.uniform(0.5, 3.0, (4, 4))))
    p = CirculantGaussian(rng.normal(size=(4, 4)), sym(rng.uniform(0.5, 3.0, (4, 4))))
    qd = GaussianFactor(q.mean.ravel(), q.dense_cov())
    pd = GaussianFactor(p.mean.ravel(), p.dense_cov())
    assert q.kl(p) == pytest.approx(qd.kl(pd), rel=1e-10)


def test_diagonal_gaussian_matches_dense(rng):
    q = DiagonalGaussian(rng.normal(size=(2, 2)), rng.uniform(0.2, 2, (2, 2)))
    p = DiagonalGaussian(rng.normal(size=(2, 2)), rng.uniform(0.2, 2, (2, 2)))
    qd = GaussianFactor(q.mean.ravel(), np.diag(q.var.ravel()))
    pd = GaussianFactor(p.mean.ravel(), np.diag(p.var.ravel()))
    assert q.entropy() == pytest.approx(qd.entropy(), rel=1e-12)
    assert q.kl(p) == pytest.approx(qd.kl(pd), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_gaussian_conjugacy_closure(seed):
    rng = np.random.default_rng(seed)
    prior = GaussianFactor(rng.normal(size=2), np.eye(2) * rng.uniform(0.5, 2))
    h = rng.normal(size=(3, 2))
    y = rng.normal(size=3)
    post = prior.absorb(h.T @ h, h.T @ y)
    assert isinstance(post, GaussianFactor)
    prec = np.linalg.inv(prior.cov) + h.T @ h
    mean = np.linalg.solve(prec, np.linalg.inv(prior.cov) @ prior.mean + h.T @ y)
    np.testing.assert_allclose(post.mean, mean, rtol=1e-9, atol=1e-12)


def test_gamma_conjugacy_closure():
    post = GammaFactor(1.0, 1e-3).updated(8, 3.5)
    assert isinstance(post, GammaFactor)
    assert (post.shape, post.rate) == (9.0, 3.501)


def test_invalid_parameters_rejected():
    for bad in [(0, 1), (1, -1), (np.nan, 1)]:
        with pytest.raises(InvalidStateError):
            GammaFactor(*bad)
    with pytest.raises(InvalidStateError):
        GaussianFactor([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(InvalidStateError):
        CategoricalField(np.full((2, 1, 1), 0.6))


@pytest.mark.parametrize("logits,expected", [
    ((0.0, 0.0), (0.5, 0.5)),
    ((np.log(3), 0.0), (0.75, 0.25)),
    ((1000.0, 1000 + np.log(2)), (1 / 3, 2 / 3)),
])
def test_categorical_normalize_examples(logits, expected):
    out = categorical_normalize(np.array(logits))
    np.testing.assert_allclose(out, expected, atol=1e-14)


@given(st.integers(0, 2**32 - 1), st.floats(-500, 500))
def test_categorical_normalize_shift_invariant(seed, c):
    logits = np.random.default_rng(seed).normal(size=(3, 4, 5)) * 10
    a = categorical_normalize(logits)
    b = categorical_normalize(logits + c)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.max(np.abs(a.sum(axis=0) - 1)) <= 1e-12
    CategoricalField(a)

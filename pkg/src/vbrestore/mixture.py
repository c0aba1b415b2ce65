"""Hierarchical mixture priors with hidden labels.

Four priors on the image are supported:

* ``MSG``: independent sites, ``f(r) | z(r)=k ~ N(m_k, v_k)``.
* ``MSGM``: ``f(r) | z, f ~ N(mloc_k(r), v_k)`` where the local mean averages
  the neighbours, using ``f(r')`` for neighbours in the same class and the
  class mean ``m_k`` for the others.  The prior is the product of these
  conditionals.
* ``MGP`` / ``MGMP``: as above, plus a Potts field on the labels with fixed
  coupling ``gamma`` (energy ``gamma`` per agreeing unordered neighbour pair).

Unknowns: image ``f``, labels ``z``, class means ``m`` (Gaussian), class
variances ``v`` (Inverse-Gamma), proportions (Dirichlet) and the noise
precision (Gamma).  With K >= 2 the image factor is factorised over sites;
with K = 1 it is a full Gaussian with circulant covariance.

Every update maximises the free energy exactly over its own block: the
label field is swept in colour classes whose sites do not interact, and the
local-mean expectations are taken exactly under the factorised posterior.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import digamma

from .core import check_shape, initial_noise_precision
from .errors import ConvergenceError, InvalidStateError
from .expfam import (CategoricalField, CirculantGaussian, DiagonalGaussian, DirichletFactor,
                     GammaFactor, GaussianFactor, InverseGammaFactor, PointMass,
                     categorical_normalize)
from .operators import (DiffOperator, as_image, check_spectrum, convolve, correlate, fft2,
                        ifft2_real, lattice_offsets, neighbor_sum)

LOG_2PI = np.log(2 * np.pi)
EMPTY_CLASS = 1e-12


@dataclass(frozen=True)
class MixtureParams:
    """Class-parameter factors stored as length-K arrays.

    ``q(m_k) = N(m_hat_k, w_hat_k)``, ``q(v_k) = IG(a_hat_k, b_hat_k)`` and
    ``q(pi) = Dirichlet(alpha_hat)``.
    """

    m_hat: np.ndarray
    w_hat: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray
    alpha_hat: np.ndarray

    def __post_init__(self):
        arrays = []
        for name in ("m_hat", "w_hat", "a_hat", "b_hat", "alpha_hat"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.setflags(write=False)
            arrays.append(arr)
            object.__setattr__(self, name, arr)
        if len({a.size for a in arrays}) != 1:
            raise InvalidStateError("class parameter arrays differ in length")
        for arr, name in zip(arrays[1:], ("w_hat", "a_hat", "b_hat", "alpha_hat")):
            if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
                raise InvalidStateError(f"{name} must be positive")

    @property
    def n_classes(self):
        return self.m_hat.size

    @property
    def inv_var(self):
        """``E[1/v_k]``."""
        return self.a_hat / self.b_hat

    @property
    def mean_log_var(self):
        return np.log(self.b_hat) - digamma(self.a_hat)

    @property
    def mean_log_pi(self):
        return digamma(self.alpha_hat) - digamma(self.alpha_hat.sum())

    def mean_factor(self, k):
        return GaussianFactor([self.m_hat[k]], [[self.w_hat[k]]])

    def var_factor(self, k):
        return InverseGammaFactor(self.a_hat[k], self.b_hat[k])

    def proportions(self):
        return DirichletFactor(self.alpha_hat)

    def permuted(self, order):
        order = list(order)
        return MixtureParams(self.m_hat[order], self.w_hat[order], self.a_hat[order],
                             self.b_hat[order], self.alpha_hat[order])


@dataclass(frozen=True)
class MixtureState:
    image: object
    labels: CategoricalField
    params: MixtureParams
    theta_e: object

    def permuted(self, order):
        """Same state with the classes relabelled by ``order``."""
        return MixtureState(self.image, CategoricalField(self.labels.probs[list(order)]),
                            self.params.permuted(order), self.theta_e)


@dataclass(frozen=True)
class PottsSpec:
    gamma: float = 0.0
    neighborhood: str = "4-connected"

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("Potts coupling must be non-negative")


def potts_prior_energy(labels, spec):
    """``gamma`` times the number of agreeing unordered neighbour pairs.

    Neighbours are the distinct periodic 4-neighbours of
    :func:`~vbrestore.operators.lattice_offsets`, each pair counted once.
    """
    gamma = spec.gamma if isinstance(spec, PottsSpec) else float(spec)
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise InvalidStateError("labels must be a 2-D integer array")
    agree = sum(np.sum(labels == np.roll(labels, (-o[0], -o[1]), axis=(0, 1)))
                for o in lattice_offsets(labels.shape))
    return gamma * 0.5 * float(agree)


def bond_count(shape):
    return 0.5 * np.prod(shape) * len(lattice_offsets(shape))


@lru_cache(maxsize=64)
def site_coloring(shape, distance):
    """Greedy colouring of the periodic lattice so that sites within the given
    graph distance get different colours.  Returns an int array of colours."""
    h, w = shape
    conflicts = set()
    for dy in range(-distance, distance + 1):
        for dx in range(-distance, distance + 1):
            if 0 < abs(dy) + abs(dx) <= distance:
                conflicts.add((dy % h, dx % w))
    conflicts.discard((0, 0))
    colors = -np.ones(shape, dtype=int)
    for i in range(h):
        for j in range(w):
            used = {colors[(i + dy) % h, (j + dx) % w] for dy, dx in conflicts}
            c = 0
            while c in used:
                c += 1
            colors[i, j] = c
    colors.setflags(write=False)
    return colors


class MixtureModel:
    """Constants of a mixture run: model kind, class count, priors, kernel."""

    def __init__(self, spec, shape):
        self.spec = spec
        self.kind = spec.model
        self.n_classes = int(spec.n_classes)
        self.gamma = float(spec.gamma) if spec.has_potts else 0.0
        self.priors = spec.priors
        self.kernel = spec.kernel
        self.shape = tuple(shape)
        self.offsets = lattice_offsets(self.shape)
        self.coupled = spec.has_local_mean and len(self.offsets) > 0
        self.n_nb = len(self.offsets)
        self.h_hat = self.kernel.spectrum(self.shape)
        self.h2 = np.abs(self.h_hat) ** 2
        self.h_norm2 = float(np.sum(self.kernel.taps ** 2))
        self.diff = DiffOperator(2 if spec.has_local_mean else 0)
        self.lam = self.diff.spectrum(self.shape)
        self.alpha0 = self.priors.dirichlet0(self.n_classes)
        if self.coupled:
            distance = 2
        elif self.gamma > 0 or spec.has_potts:
            distance = 1
        else:
            distance = 0
        self.colors = site_coloring(self.shape, distance) if distance else np.zeros(
            self.shape, dtype=int)
        self.n_colors = int(self.colors.max()) + 1

    @property
    def spectral(self):
        return self.n_classes == 1

    def prior_const(self):
        """Normalising constant of the coupled prior (zero for MSG/MGP)."""
        if not self.spec.has_local_mean:
            return 0.0
        keep = self.lam > 1e-12 * self.lam.max()
        return 0.5 * float(np.sum(np.log(self.lam[keep])))


def _mean(factor):
    return float(factor.value) if isinstance(factor, PointMass) else factor.mean


def _mean_log(factor):
    return float(np.log(factor.value)) if isinstance(factor, PointMass) else factor.mean_log


def local_moments(model, q, mu, var):
    """Coefficients ``(A, B, C)`` with ``<e_k(r)^2> = A (m^2 + w) - 2 B m + C``.

    ``e_k(r)`` is the deviation of ``f(r)`` from its class-k conditional mean;
    the expectation runs over the neighbours' labels and the factorised
    image posterior.  Arrays have shape ``(K, H, W)``.
    """
    if not model.coupled:
        ones = np.ones_like(q)
        return ones, ones * mu, ones * (mu**2 + var)
    n = model.n_nb
    offs = model.offsets
    sq = neighbor_sum(q, offs)
    t = mu - neighbor_sum(q * mu, offs) / n
    c = 1 - sq / n
    pq = q * (1 - q)
    a = c**2 + neighbor_sum(pq, offs) / n**2
    b = t * c + neighbor_sum(pq * mu, offs) / n**2
    cc = t**2 + var + neighbor_sum(pq * mu**2 + q * var, offs) / n**2
    return a, b, cc


def expected_sq_dev(model, params, q, mu, var):
    """``<e_k(r)^2>`` for every class and site."""
    a, b, c = local_moments(model, q, mu, var)
    m = params.m_hat[:, None, None]
    w = params.w_hat[:, None, None]
    return a * (m**2 + w) - 2 * b * m + c


def _neighbor_influence(model, params, q, mu, var):
    """Change in the neighbours' expected prior terms when ``z(r) = k``."""
    n = model.n_nb
    offs = model.offsets
    sq = neighbor_sum(q, offs)
    t = mu - neighbor_sum(q * mu, offs) / n
    c = 1 - sq / n
    n_qc = neighbor_sum(q * c, offs)
    n_qt = neighbor_sum(q * t, offs)
    m = params.m_hat[:, None, None]
    w = params.w_hat[:, None, None]
    s = 1 - 2 * q
    d_a = -2 / n * n_qc + s / n**2 * sq
    d_b = -mu / n * n_qc - n_qt / n + s * mu / n**2 * sq
    d_c = -2 * mu / n * n_qt + (s * mu**2 + var) / n**2 * sq
    delta = d_a * (m**2 + w) - 2 * d_b * m + d_c
    return -0.5 * params.inv_var[:, None, None] * delta


def label_unary(model, state):
    """Label logits without the Potts term (constant terms dropped)."""
    params = state.params
    q = state.labels.probs
    mu, var = state.image.mean, state.image.variance()
    e2 = expected_sq_dev(model, params, q, mu, var)
    iv = params.inv_var[:, None, None]
    logits = (params.mean_log_pi - 0.5 * params.mean_log_var)[:, None, None] - 0.5 * iv * e2
    if model.coupled:
        logits = logits + _neighbor_influence(model, params, q, mu, var)
    return logits


def _potts_field(model, q):
    if model.gamma == 0:
        return 0.0
    if model.spec.mean_field == "hard":
        hard = np.argmax(q, axis=0)
        q = (np.arange(q.shape[0])[:, None, None] == hard).astype(float)
    return model.gamma * neighbor_sum(q, model.offsets)


def update_labels(model, state, data=None):
    """One colour-ordered sweep of the per-site categorical factors."""
    if model.spectral:
        return state.labels
    q = np.array(state.labels.probs)
    for color in range(model.n_colors):
        cur = MixtureState(state.image, CategoricalField(q), state.params, state.theta_e)
        logits = label_unary(model, cur) + _potts_field(model, q)
        new = categorical_normalize(logits, axis=0)
        mask = model.colors == color
        q[:, mask] = new[:, mask]
    return CategoricalField(q)


def mean_field_marginals(model, state, max_sweeps=1000, tol=1e-13):
    """Iterate label sweeps (other factors fixed) to a mean-field fixed point."""
    labels = state.labels
    for _ in range(max_sweeps):
        new = update_labels(model, MixtureState(state.image, labels, state.params,
                                                state.theta_e))
        change = np.max(np.abs(new.probs - labels.probs))
        labels = new
        if change < tol:
            break
    return labels


def _class_moments_spectral(model, state):
    """``(sum_r A, sum_r B, sum_r <e^2>)`` per class for the K = 1 case."""
    img, params = state.image, state.params
    n_sites = img.mean.size
    if model.spec.has_local_mean:
        rough = model.diff.quadratic(img.mean) + img.trace_with(model.lam)
        return np.zeros(1), np.zeros(1), np.array([rough])
    m, w = params.m_hat[0], params.w_hat[0]
    tr = float(np.sum(1.0 / img.precision_spectrum))
    dev = float(np.sum((img.mean - m) ** 2)) + n_sites * w + tr
    return np.array([float(n_sites)]), np.array([float(np.sum(img.mean))]), np.array([dev])


def update_mixture_params(model, state, data=None):
    """Conjugate updates of class means, then variances, then proportions."""
    pri = model.priors
    q = state.labels.probs
    counts = q.sum(axis=(1, 2))
    params = state.params
    iv = params.inv_var
    if model.spectral:
        sum_a, sum_b, _ = _class_moments_spectral(model, state)
    else:
        mu, var = state.image.mean, state.image.variance()
        a, b, _ = local_moments(model, q, mu, var)
        sum_a, sum_b = (q * a).sum(axis=(1, 2)), (q * b).sum(axis=(1, 2))
    prec = 1 / pri.v0 + iv * sum_a
    m_hat = (pri.m0 / pri.v0 + iv * sum_b) / prec
    w_hat = 1 / prec
    empty = counts < EMPTY_CLASS
    m_hat = np.where(empty, pri.m0, m_hat)
    w_hat = np.where(empty, pri.v0, w_hat)
    params = MixtureParams(m_hat, w_hat, params.a_hat, params.b_hat, params.alpha_hat)
    cur = MixtureState(state.image, state.labels, params, state.theta_e)
    if model.spectral:
        dev = _class_moments_spectral(model, cur)[2]
    else:
        dev = (q * expected_sq_dev(model, params, q, mu, var)).sum(axis=(1, 2))
    a_hat = np.where(empty, pri.a0, pri.a0 + 0.5 * counts)
    b_hat = np.where(empty, pri.b0, pri.b0 + 0.5 * dev)
    alpha_hat = model.alpha0 + counts
    return MixtureParams(m_hat, w_hat, a_hat, b_hat, alpha_hat)


class _PriorPrecision:
    """Prior precision ``sum_k E[1/v_k] (L_k^T diag(q_k) L_k + diag(W_k))`` and its
    linear term, for the factorised image update."""

    def __init__(self, model, q, params):
        self.model = model
        self.q = q
        self.iv = params.inv_var[:, None, None]
        self.m = params.m_hat[:, None, None]
        n = model.n_nb
        if model.coupled:
            self.sq = neighbor_sum(q, model.offsets)
            self.w = q * (1 - q) * self.sq / n**2
            self.diag = np.sum(self.iv * (q + q * self.sq / n**2), axis=0)
        else:
            self.diag = np.sum(self.iv * q, axis=0)

    def _l(self, x):
        return x - neighbor_sum(self.q * x, self.model.offsets) / self.model.n_nb

    def _lt(self, y):
        return y - self.q * neighbor_sum(y, self.model.offsets) / self.model.n_nb

    def apply(self, x):
        if not self.model.coupled:
            return self.diag * x
        xk = np.broadcast_to(x, self.q.shape)
        return np.sum(self.iv * (self._lt(self.q * self._l(xk)) + self.w * xk), axis=0)

    def linear(self):
        if not self.model.coupled:
            return np.sum(self.iv * self.m * self.q, axis=0)
        n = self.model.n_nb
        c = 1 - self.sq / n
        term = self._lt(self.q * c) + self.q * (1 - self.q) * self.sq / n**2
        return np.sum(self.iv * self.m * term, axis=0)

    def mean_coupling(self):
        """Average weight of the Laplacian-like part, for the preconditioner."""
        if not self.model.coupled:
            return 0.0
        return float(np.sum(self.iv[:, 0, 0] * self.q.mean(axis=(1, 2))))


def update_image_mixture(model, state, data):
    """Gaussian image factor given labels, class parameters and noise precision."""
    data = as_image(data, "data")
    te = _mean(state.theta_e)
    params = state.params
    if model.spectral:
        iv = params.inv_var[0]
        spec = te * model.h2 + iv * model.lam
        check_spectrum(spec, "image posterior precision")
        rhs = te * correlate(data, model.kernel)
        if not model.spec.has_local_mean:
            rhs = rhs + iv * params.m_hat[0]
        return CirculantGaussian(ifft2_real(fft2(rhs) / spec), spec)

    prior = _PriorPrecision(model, state.labels.probs, params)
    rhs = te * correlate(data, model.kernel) + prior.linear()
    diag = te * model.h_norm2 + prior.diag
    shape = data.shape
    n = data.size

    def matvec(x):
        x = x.reshape(shape)
        return (te * ifft2_real(model.h2 * fft2(x)) + prior.apply(x)).ravel()

    pre_spec = te * model.h2 + prior.mean_coupling() * model.lam + float(np.mean(prior.diag))
    pre_spec = np.maximum(pre_spec, 1e-3 * float(np.mean(diag)))

    def precond(r):
        return ifft2_real(fft2(r.reshape(shape)) / pre_spec).ravel()

    x0 = state.image.mean if state.image.mean.shape == shape else None
    a_op = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    m_op = LinearOperator((n, n), matvec=precond, dtype=np.float64)
    b = rhs.ravel()
    mean, info = cg(a_op, b, x0=None if x0 is None else x0.ravel(),
                    rtol=model.spec.pcg_rtol, atol=0.0, maxiter=model.spec.pcg_maxiter, M=m_op)
    if info != 0:
        resid = float(np.linalg.norm(b - matvec(mean)))
        raise ConvergenceError(
            f"conjugate gradients stopped after {model.spec.pcg_maxiter} iterations "
            f"with residual norm {resid:.3g}", residual=resid)
    return DiagonalGaussian(mean.reshape(shape), 1.0 / diag)


def expected_residual(model, state, data):
    """``<|g - H f|^2>`` under the image factor."""
    img = state.image
    r = data - convolve(img.mean, model.kernel)
    val = float(np.vdot(r, r))
    if isinstance(img, CirculantGaussian):
        return val + img.trace_with(model.h2)
    return val + model.h_norm2 * float(np.sum(img.var))


def update_noise_precision(model, state, data):
    pri = model.priors
    resid = expected_residual(model, state, data)
    return GammaFactor(pri.alpha_e0 + data.size / 2, pri.beta_e0 + 0.5 * resid)


def potts_expected_energy(model, q):
    """``gamma * (E[#agreeing pairs] - #pairs)`` under the factorised labels."""
    if model.gamma == 0:
        return 0.0
    agree = 0.5 * float(np.sum(q * neighbor_sum(q, model.offsets)))
    return model.gamma * (agree - bond_count(model.shape))


def free_energy(model, state, data):
    data = as_image(data, "data")
    pri = model.priors
    params = state.params
    q = state.labels.probs
    img = state.image
    n_sites = data.size
    counts = q.sum(axis=(1, 2))

    val = 0.5 * n_sites * (_mean_log(state.theta_e) - LOG_2PI)
    val -= 0.5 * _mean(state.theta_e) * expected_residual(model, state, data)

    if model.spectral:
        dev = _class_moments_spectral(model, state)[2]
    else:
        dev = (q * expected_sq_dev(model, params, q, img.mean, img.variance())).sum(axis=(1, 2))
    val += float(np.sum(-0.5 * counts * (LOG_2PI + params.mean_log_var)
                        - 0.5 * params.inv_var * dev))
    val += model.prior_const()
    val += float(np.sum(counts * params.mean_log_pi))
    val += potts_expected_energy(model, q)

    val += state.labels.entropy() + img.entropy()
    prior_m = GaussianFactor([pri.m0], [[pri.v0]])
    prior_v = InverseGammaFactor(pri.a0, pri.b0)
    for k in range(model.n_classes):
        val -= params.mean_factor(k).kl(prior_m)
        val -= params.var_factor(k).kl(prior_v)
    val -= params.proportions().kl(DirichletFactor(np.full(model.n_classes, model.alpha0)))
    if not isinstance(state.theta_e, PointMass):
        val -= state.theta_e.kl(GammaFactor(pri.alpha_e0, pri.beta_e0))
    return float(val)


def initial_class_means(data, n_classes, n_iter=50):
    """Class means from evenly spaced quantiles refined by 1-D Lloyd iterations.

    Plain quantiles put every seed inside a dominant class when the classes
    are unbalanced; a few nearest-mean passes move them onto the modes.
    """
    values = np.sort(np.ravel(data))
    means = np.quantile(values, (np.arange(n_classes) + 0.5) / n_classes)
    for _ in range(n_iter):
        cuts = np.searchsorted(values, 0.5 * (means[1:] + means[:-1]))
        groups = np.split(values, cuts)
        new = np.array([grp.mean() if grp.size else m for grp, m in zip(groups, means)])
        if np.array_equal(new, means):
            break
        means = new
    return means


class MixtureEngine:
    """Update schedule: image, labels, class parameters, noise precision."""

    def __init__(self, spec, data):
        self.spec = spec
        self.data = data
        self.model = MixtureModel(spec, data.shape)

    def initial_state(self):
        model, g, pri = self.model, self.data, self.spec.priors
        k = model.n_classes
        q_e = initial_noise_precision(pri.alpha_e0, pri.beta_e0, g)
        te = q_e.mean
        iv0 = pri.a0 / pri.b0
        mean = correlate(g, model.kernel)
        if model.spectral:
            image = CirculantGaussian(mean, np.full(g.shape, te * model.h_norm2 + iv0))
        else:
            image = DiagonalGaussian(mean, np.full(g.shape, 1 / (te * model.h_norm2 + iv0)))
        m_hat = initial_class_means(g, k)
        if model.spectral and self.spec.has_local_mean:
            # a single local-mean class never uses its mean; keep it at the prior
            m_hat = np.full(1, pri.m0)
        # nearest initial mean; uniform labels stall the coupled models
        nearest = np.argmin(np.abs(g[None] - m_hat[:, None, None]), axis=0)
        labels = CategoricalField((np.arange(k)[:, None, None] == nearest).astype(float))
        params = MixtureParams(m_hat, np.full(k, pri.v0), np.full(k, pri.a0),
                               np.full(k, pri.b0), np.full(k, model.alpha0 + g.size / k))
        state = MixtureState(image, labels, params, q_e)
        # class parameters from the initial image, consistent with the noise estimate
        return MixtureState(image, labels, update_mixture_params(model, state, g), q_e)

    def validate(self, state):
        if not isinstance(state, MixtureState):
            raise InvalidStateError(f"expected MixtureState, got {type(state).__name__}")
        check_shape(state.image.shape, self.data.shape, "image factor")
        check_shape(state.labels.shape, self.data.shape, "label field")
        k = self.model.n_classes
        if state.labels.n_classes != k or state.params.n_classes != k:
            raise InvalidStateError(f"state has the wrong class count (model has {k})")
        expected = CirculantGaussian if self.model.spectral else DiagonalGaussian
        if not isinstance(state.image, expected):
            raise InvalidStateError(f"image factor must be {expected.__name__} for K = {k}")

    def step(self, state):
        model, g = self.model, self.data
        image = update_image_mixture(model, state, g)
        state = MixtureState(image, state.labels, state.params, state.theta_e)
        labels = update_labels(model, state, g)
        state = MixtureState(image, labels, state.params, state.theta_e)
        params = update_mixture_params(model, state, g)
        state = MixtureState(image, labels, params, state.theta_e)
        if not isinstance(state.theta_e, PointMass):
            state = MixtureState(image, labels, params, update_noise_precision(model, state, g))
        return state

    def free_energy(self, state):
        return free_energy(self.model, state, self.data)

    objective = free_energy

    def summaries(self, state):
        params = state.params
        out = {"theta_e": _mean(state.theta_e)}
        pi = params.proportions().mean
        for k in range(params.n_classes):
            out[f"m_{k}"] = float(params.m_hat[k])
            out[f"v_{k}"] = float(params.b_hat[k] / params.a_hat[k])
            out[f"pi_{k}"] = float(pi[k])
        return out

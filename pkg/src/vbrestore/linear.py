"""Linear-Gaussian restoration with Gamma precisions.

Model: ``g = h * f + e`` with ``e ~ N(0, I/theta_e)`` and the smoothness prior
``p(f | theta_f) = (theta_f / 2 pi)^(N/2) pdet(D^T D)^(1/2) exp(-theta_f |Df|^2 / 2)``
where ``pdet`` is the product of the non-zero eigenvalues; both precisions
have Gamma priors.  Three regimes are provided: full variational Bayes,
joint MAP (alternating conditional modes) and EM.
"""

from dataclasses import dataclass

import numpy as np

from .core import check_shape, initial_noise_precision
from .errors import InvalidStateError, PriorError
from .expfam import CirculantGaussian, GammaFactor, PointMass
from .operators import (ConvKernel, DiffOperator, as_image, check_spectrum, convolve,
                        correlate, fft2, ifft2_real)

LOG_2PI = np.log(2 * np.pi)


def log_pdet(spectrum, rtol=1e-12):
    """Log pseudo-determinant of a PSD circulant operator from its spectrum."""
    keep = spectrum > rtol * spectrum.max()
    return float(np.sum(np.log(spectrum[keep])))


@dataclass(frozen=True)
class LinearGaussianModel:
    """Known kernel, smoothness operator and Gamma prior constants."""

    kernel: ConvKernel
    diff: DiffOperator
    alpha_e0: float = 1.0
    beta_e0: float = 1e-3
    alpha_f0: float = 1.0
    beta_f0: float = 1e-3
    residual_moment: str = "exact"

    def __post_init__(self):
        for name in ("alpha_e0", "beta_e0", "alpha_f0", "beta_f0"):
            if not getattr(self, name) > 0:
                raise PriorError(f"{name} must be positive")

    @classmethod
    def from_spec(cls, spec):
        p = spec.priors
        return cls(spec.kernel, DiffOperator(spec.diff_order), p.alpha_e0, p.beta_e0,
                   p.alpha_f0, p.beta_f0, spec.residual_moment)

    @property
    def prior_e(self):
        return GammaFactor(self.alpha_e0, self.beta_e0)

    @property
    def prior_f(self):
        return GammaFactor(self.alpha_f0, self.beta_f0)

    def spectra(self, shape):
        """``(|H|^2, eig(D^T D))`` on a lattice of the given shape."""
        h2 = np.abs(self.kernel.spectrum(shape)) ** 2
        return h2, self.diff.spectrum(shape)


@dataclass(frozen=True)
class LinearState:
    """Image factor plus the two precision factors.

    Any factor may be a :class:`PointMass`; point-mass precisions are held
    fixed by the VB updates.
    """

    image: object
    theta_e: object
    theta_f: object


def _mean(factor):
    return float(factor.value) if isinstance(factor, PointMass) else factor.mean


def _mean_log(factor):
    return float(np.log(factor.value)) if isinstance(factor, PointMass) else factor.mean_log


def posterior_spectrum(model, shape, theta_e, theta_f):
    h2, lam = model.spectra(shape)
    spec = theta_e * h2 + theta_f * lam
    check_spectrum(spec, "image posterior precision")
    return spec


def vb_update_image(model, data, theta_e_mean, theta_f_mean):
    """Gaussian image factor given expected precisions (circulant covariance)."""
    data = as_image(data, "data")
    if not (theta_e_mean > 0 and theta_f_mean >= 0):
        raise ValueError("expected precisions must be positive")
    spec = posterior_spectrum(model, data.shape, theta_e_mean, theta_f_mean)
    h_hat = model.kernel.spectrum(data.shape)
    mean = ifft2_real(theta_e_mean * np.conj(h_hat) * fft2(data) / spec)
    return CirculantGaussian(mean, spec)


def expected_residual(model, data, image, exact=True):
    """``<|g - H f|^2>``; the covariance term is dropped when ``exact`` is false."""
    mean = image.mean if not isinstance(image, PointMass) else np.asarray(image.value)
    r = data - convolve(mean, model.kernel)
    val = float(np.vdot(r, r))
    if exact and isinstance(image, CirculantGaussian):
        h2, _ = model.spectra(data.shape)
        val += image.trace_with(h2)
    return val


def expected_roughness(model, image):
    """``<|D f|^2> = |D mu|^2 + tr(D^T D Sigma)``."""
    if isinstance(image, PointMass):
        return model.diff.quadratic(np.asarray(image.value))
    val = model.diff.quadratic(image.mean)
    if isinstance(image, CirculantGaussian):
        val += image.trace_with(model.diff.spectrum(image.shape))
    return val


def vb_update_precisions(model, data, image_factor, residual_moment=None):
    """Gamma factors of ``theta_e`` and ``theta_f`` given the image factor."""
    data = as_image(data, "data")
    mode = residual_moment or model.residual_moment
    m = n = data.size
    resid = expected_residual(model, data, image_factor, exact=(mode == "exact"))
    rough = expected_roughness(model, image_factor)
    q_e = GammaFactor(model.alpha_e0 + m / 2, model.beta_e0 + 0.5 * resid)
    q_f = GammaFactor(model.alpha_f0 + n / 2, model.beta_f0 + 0.5 * rough)
    return q_e, q_f


def log_prior_image_const(model, shape):
    """``-N/2 ln(2 pi) + 1/2 ln pdet(D^T D)``."""
    return -0.5 * np.prod(shape) * LOG_2PI + 0.5 * log_pdet(model.diff.spectrum(shape))


def free_energy(model, data, state):
    """Evidence lower bound of a VB state (point-mass precisions count as known)."""
    data = as_image(data, "data")
    image = state.image
    if not isinstance(image, CirculantGaussian):
        raise InvalidStateError("free energy needs a Gaussian image factor")
    check_shape(image.shape, data.shape, "image factor")
    m = n = data.size
    resid = expected_residual(model, data, image, exact=True)
    rough = expected_roughness(model, image)
    val = 0.5 * m * (_mean_log(state.theta_e) - LOG_2PI) - 0.5 * _mean(state.theta_e) * resid
    val += 0.5 * n * _mean_log(state.theta_f) + log_prior_image_const(model, data.shape)
    val -= 0.5 * _mean(state.theta_f) * rough
    val += image.entropy()
    for q, p in ((state.theta_e, model.prior_e), (state.theta_f, model.prior_f)):
        if not isinstance(q, PointMass):
            val -= q.kl(p)
    return float(val)


def log_joint(model, data, image, theta_e, theta_f):
    """``ln p(g, f, theta_e, theta_f)`` at point values."""
    data = as_image(data, "data")
    m = n = data.size
    r = data - convolve(image, model.kernel)
    val = 0.5 * m * (np.log(theta_e) - LOG_2PI) - 0.5 * theta_e * float(np.vdot(r, r))
    val += 0.5 * n * np.log(theta_f) + log_prior_image_const(model, data.shape)
    val -= 0.5 * theta_f * model.diff.quadratic(image)
    val += float(model.prior_e.log_pdf(theta_e) + model.prior_f.log_pdf(theta_f))
    return float(val)


def log_marginal(model, data, theta_e, theta_f):
    """``ln p(g | theta_e, theta_f)`` in closed form (image integrated out)."""
    data = as_image(data, "data")
    m = n = data.size
    spec = posterior_spectrum(model, data.shape, theta_e, theta_f)
    post = vb_update_image(model, data, theta_e, theta_f)
    r = data - convolve(post.mean, model.kernel)
    val = 0.5 * m * (np.log(theta_e) - LOG_2PI) + 0.5 * n * np.log(theta_f)
    val += 0.5 * log_pdet(model.diff.spectrum(data.shape)) - 0.5 * np.sum(np.log(spec))
    val -= 0.5 * (theta_e * float(np.vdot(r, r)) + theta_f * model.diff.quadratic(post.mean))
    return float(val)


def _conditional_mode(shape, rate, name):
    if shape <= 1:
        raise PriorError(
            f"conditional Gamma shape {shape:g} <= 1 for {name}: its mode is not positive; "
            "use a larger prior shape"
        )
    return (shape - 1) / rate


def jmap_update_precisions(model, data, image):
    m = n = data.size
    r = data - convolve(image, model.kernel)
    theta_e = _conditional_mode(model.alpha_e0 + m / 2,
                                model.beta_e0 + 0.5 * float(np.vdot(r, r)), "theta_e")
    theta_f = _conditional_mode(model.alpha_f0 + n / 2,
                                model.beta_f0 + 0.5 * model.diff.quadratic(image), "theta_f")
    return theta_e, theta_f


def em_update_precisions(model, data, image_factor, mstep="map"):
    """M-step: maximise the expected complete log-likelihood (plus log prior for MAP)."""
    m = n = data.size
    resid = expected_residual(model, data, image_factor, exact=True)
    rough = expected_roughness(model, image_factor)
    if mstep == "ml":
        if resid <= 0 or rough <= 0:
            raise PriorError("maximum-likelihood M-step is undefined for a zero residual")
        return m / resid, n / rough
    a_e = model.alpha_e0 - 1 + m / 2
    a_f = model.alpha_f0 - 1 + n / 2
    if a_e <= 0 or a_f <= 0:
        raise PriorError("MAP M-step needs prior shapes with alpha0 - 1 + N/2 > 0")
    return a_e / (model.beta_e0 + 0.5 * resid), a_f / (model.beta_f0 + 0.5 * rough)


class LinearEngine:
    """Update schedule for the linear-Gaussian model in all three regimes."""

    def __init__(self, spec, data):
        self.spec = spec
        self.data = data
        self.model = LinearGaussianModel.from_spec(spec)

    def initial_state(self):
        model, g = self.model, self.data
        q_e = initial_noise_precision(model.alpha_e0, model.beta_e0, g)
        mean = correlate(g, model.kernel)
        h_norm2 = float(np.sum(model.kernel.taps ** 2))
        image0 = CirculantGaussian(mean, np.full(g.shape, q_e.mean * h_norm2
                                                 + model.prior_f.mean))
        # start theta_f from the initial image, consistent with the noise estimate
        q_f = vb_update_precisions(model, g, image0)[1]
        te, tf = q_e.mean, q_f.mean
        regime = self.spec.regime
        if regime == "JMAP":
            return LinearState(PointMass(mean), PointMass(te), PointMass(tf))
        if regime == "EM":
            return LinearState(vb_update_image(model, g, te, tf), PointMass(te), PointMass(tf))
        return LinearState(image0, q_e, q_f)

    def validate(self, state):
        if not isinstance(state, LinearState):
            raise InvalidStateError(f"expected LinearState, got {type(state).__name__}")
        img = state.image
        shape = np.shape(img.value) if isinstance(img, PointMass) else img.shape
        check_shape(shape, self.data.shape, "image factor")
        regime = self.spec.regime
        if regime == "JMAP" and not all(isinstance(x, PointMass) for x in
                                        (state.image, state.theta_e, state.theta_f)):
            raise InvalidStateError("JMAP states hold point masses only")
        if regime == "EM" and not (isinstance(state.theta_e, PointMass)
                                   and isinstance(state.theta_f, PointMass)):
            raise InvalidStateError("EM states hold point-mass precisions")

    def step(self, state):
        model, g = self.model, self.data
        regime = self.spec.regime
        if regime == "JMAP":
            image = vb_update_image(model, g, state.theta_e.value, state.theta_f.value).mean
            te, tf = jmap_update_precisions(model, g, image)
            return LinearState(PointMass(image), PointMass(te), PointMass(tf))
        if regime == "EM":
            te, tf = em_update_precisions(model, g, state.image, self.spec.em_mstep)
            return LinearState(vb_update_image(model, g, te, tf), PointMass(te), PointMass(tf))
        image = vb_update_image(model, g, _mean(state.theta_e), _mean(state.theta_f))
        q_e, q_f = vb_update_precisions(model, g, image)
        theta_e = state.theta_e if isinstance(state.theta_e, PointMass) else q_e
        theta_f = state.theta_f if isinstance(state.theta_f, PointMass) else q_f
        return LinearState(image, theta_e, theta_f)

    def free_energy(self, state):
        return free_energy(self.model, self.data, state)

    def objective(self, state):
        model, g = self.model, self.data
        regime = self.spec.regime
        if regime == "JMAP":
            return log_joint(model, g, state.image.value, state.theta_e.value,
                             state.theta_f.value)
        if regime == "EM":
            te, tf = state.theta_e.value, state.theta_f.value
            val = log_marginal(model, g, te, tf)
            if self.spec.em_mstep == "map":
                val += float(model.prior_e.log_pdf(te) + model.prior_f.log_pdf(tf))
            return val
        return self.free_energy(state)

    def summaries(self, state):
        mean = state.image.value if isinstance(state.image, PointMass) else state.image.mean
        return {
            "theta_e": _mean(state.theta_e),
            "theta_f": _mean(state.theta_f),
            "image_mean": float(np.mean(mean)),
        }


def jmap_icm(model, data, init=None, max_iterations=200, tolerance=1e-6):
    """Joint MAP by alternating conditional maximisation.

    Returns ``(image, (theta_e, theta_f), trace)`` where the trace holds the
    joint log-posterior.
    """
    return _run_regime("JMAP", model, data, init, max_iterations, tolerance,
                       lambda s: (s.image.value, (s.theta_e.value, s.theta_f.value)))


def em_restore(model, data, init=None, max_iterations=200, tolerance=1e-6, mstep="map"):
    """EM over the precisions with the image integrated out.

    Returns ``((theta_e, theta_f), image_posterior, trace)``.
    """
    return _run_regime("EM", model, data, init, max_iterations, tolerance,
                       lambda s: ((s.theta_e.value, s.theta_f.value), s.image), mstep=mstep)


def vb_restore(model, data, init=None, max_iterations=200, tolerance=1e-6):
    """Full VB; returns ``(state, trace)``."""
    return _run_regime("VB", model, data, init, max_iterations, tolerance, lambda s: (s,))


def _run_regime(regime, model, data, init, max_iterations, tolerance, unpack, mstep="map"):
    from .core import ModelSpec, Priors, run

    spec = ModelSpec(
        model="GAUSS", regime=regime, kernel=model.kernel, diff_order=model.diff.order,
        priors=Priors(alpha_e0=model.alpha_e0, beta_e0=model.beta_e0,
                      alpha_f0=model.alpha_f0, beta_f0=model.beta_f0),
        residual_moment=model.residual_moment, em_mstep=mstep,
        max_iterations=max_iterations, tolerance=tolerance,
    )
    result = run(spec, data, init)
    return (*unpack(result.state), result.trace)


__all__ = [
    "LinearGaussianModel", "LinearState", "LinearEngine",
    "vb_update_image", "vb_update_precisions", "free_energy", "log_joint", "log_marginal",
    "jmap_icm", "em_restore", "vb_restore",
]

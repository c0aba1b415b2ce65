"""Myopic deconvolution: the kernel is estimated as ``h = sum_j w_j phi_j``.

Unknowns: image ``f`` (smoothness prior as in :mod:`vbrestore.linear`),
kernel coefficients ``w`` with ``w_j ~ N(0, 1/alpha_j)``, noise precision
(one shared Gamma, or one per data sample), image precision ``theta_f`` and
coefficient precisions ``alpha_j``.

With a shared noise precision the image factor keeps a circulant
covariance; with per-sample precisions it is factorised over sites and its
mean is found by preconditioned conjugate gradients.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import digamma, gammaln

from .core import check_shape, initial_noise_precision
from .errors import ConvergenceError, DimensionError, InvalidStateError
from .expfam import (CirculantGaussian, DiagonalGaussian, GammaFactor, GaussianFactor,
                     PointMass)
from .linear import log_pdet
from .operators import ConvKernel, DiffOperator, as_image, check_spectrum, fft2, ifft2_real

LOG_2PI = np.log(2 * np.pi)


class KernelBasis:
    """Kernel atoms (the columns of the basis matrix)."""

    def __init__(self, atoms):
        self.atoms = tuple(a if isinstance(a, ConvKernel) else ConvKernel(a) for a in atoms)
        if not self.atoms:
            raise ValueError("a kernel basis needs at least one atom")

    def __len__(self):
        return len(self.atoms)

    def __iter__(self):
        return iter(self.atoms)

    @classmethod
    def default(cls, size=5, widths=(0.5, 1.0, 1.5)):
        """Identity atom plus unit-mass Gaussian blurs of the given widths."""
        ident = np.zeros((size, size))
        ident[size // 2, size // 2] = 1.0
        return cls([ConvKernel(ident)] + [ConvKernel.gaussian(s, size) for s in widths])

    def embedded(self, shape):
        return np.stack([a.embed(shape) for a in self.atoms])

    def spectra(self, shape):
        return np.fft.fft2(self.embedded(shape))

    def masses(self):
        return np.array([a.mass for a in self.atoms])

    def gram(self, shape):
        e = self.embedded(shape).reshape(len(self), -1)
        return e @ e.T

    def check_independent(self, shape):
        g = self.gram(shape)
        if np.linalg.matrix_rank(g) < len(self):
            raise DimensionError(f"kernel atoms are linearly dependent on a {shape} lattice")

    def kernel(self, w):
        """Kernel taps for coefficients ``w`` on the largest atom support."""
        kh = max(a.shape[0] for a in self.atoms)
        kw = max(a.shape[1] for a in self.atoms)
        out = np.zeros((kh, kw))
        for wj, a in zip(w, self.atoms):
            ah, aw = a.shape
            oy, ox = (kh - ah) // 2, (kw - aw) // 2
            out[oy:oy + ah, ox:ox + aw] += wj * a.taps
        return ConvKernel(out)

    def project(self, kernel, shape):
        """Least-squares coefficients of ``kernel`` in this basis."""
        e = self.embedded(shape).reshape(len(self), -1)
        target = kernel.embed(shape).ravel()
        return np.linalg.lstsq(e.T, target, rcond=None)[0]


@dataclass(frozen=True, eq=False)
class GammaField:
    """Independent Gamma factors held as parameter arrays."""

    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        a = np.array(self.shape, dtype=np.float64)
        b = np.array(self.rate, dtype=np.float64)
        if a.shape != b.shape or np.any(a <= 0) or np.any(b <= 0):
            raise InvalidStateError("Gamma field parameters must be positive and aligned")
        object.__setattr__(self, "shape", a)
        object.__setattr__(self, "rate", b)

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def mean_log(self):
        return digamma(self.shape) - np.log(self.rate)

    def factors(self):
        return [GammaFactor(a, b) for a, b in zip(self.shape.ravel(), self.rate.ravel())]

    def kl_sum(self, prior_shape, prior_rate):
        a, b, a0, b0 = self.shape, self.rate, prior_shape, prior_rate
        kl = ((a - a0) * digamma(a) - gammaln(a) + gammaln(a0)
              + a0 * (np.log(b) - np.log(b0)) + a * (b0 - b) / b)
        return float(np.sum(kl))


@dataclass(frozen=True)
class MyopicState:
    image: object
    kernel: object
    noise: object
    theta_f: GammaFactor
    coeff_prec: object


class MyopicModel:
    def __init__(self, spec, shape):
        self.spec = spec
        self.priors = spec.priors
        self.shape = tuple(shape)
        self.basis = spec.basis if isinstance(spec.basis, KernelBasis) else KernelBasis(spec.basis)
        self.n_atoms = len(self.basis)
        self.emb = self.basis.embedded(self.shape)
        self.phi = np.fft.fft2(self.emb)
        self.cross = np.real(np.conj(self.phi)[:, None] * self.phi[None, :])
        self.diff = DiffOperator(spec.diff_order)
        self.lam = self.diff.spectrum(self.shape)
        self.diff_diag = float(np.mean(self.lam))
        self.per_sample = spec.noise == "per_sample"
        self.estimate = spec.estimate_kernel

    def noise_shape_increment(self, n_samples):
        if self.per_sample and self.spec.per_sample_shape == "single":
            return 0.5
        return n_samples / 2


def _coeff_moments(kernel):
    """``(E[w], E[w w^T])``."""
    if isinstance(kernel, PointMass):
        w = np.asarray(kernel.value, dtype=float)
        return w, np.outer(w, w)
    return kernel.mean, kernel.second_moment()


def _noise_mean(model, noise):
    """Expected noise precision per site (or scalar when tied)."""
    if isinstance(noise, PointMass):
        return noise.value
    return noise.mean


def _conv(x_hat_or_spec, y):
    return ifft2_real(x_hat_or_spec * fft2(y))


def _image_second(model, image):
    """Per-atom-pair ``<(phi_j * f)(phi_l * f)>`` summed against weights needs
    both the mean images ``X_j = phi_j * mu`` and the covariance part."""
    x = np.stack([_conv(p, image.mean) for p in model.phi])
    return x


def update_image(model, state, data):
    """Image factor given the kernel, noise and image-precision factors."""
    data = as_image(data, "data")
    w_mean, w2 = _coeff_moments(state.kernel)
    tf = state.theta_f.mean
    h_hat = np.tensordot(w_mean, model.phi, axes=1)
    if not model.per_sample:
        te = float(_noise_mean(model, state.noise))
        s = np.tensordot(w2, model.cross, axes=2)
        spec = te * s + tf * model.lam
        check_spectrum(spec, "image posterior precision")
        mean = ifft2_real(te * np.conj(h_hat) * fft2(data) / spec)
        return CirculantGaussian(mean, spec)

    b = np.asarray(_noise_mean(model, state.noise))
    evals, evecs = np.linalg.eigh(0.5 * (w2 + w2.T))
    evals = np.clip(evals, 0, None)
    k_spec = np.tensordot(evecs.T, model.phi, axes=1)
    k_emb = np.tensordot(evecs.T, model.emb, axes=1)
    sq_spec = fft2(k_emb**2)
    diag = sum(ev * ifft2_real(np.conj(sp) * fft2(b)) for ev, sp in zip(evals, sq_spec))
    diag = diag + tf * model.diff_diag
    rhs = ifft2_real(np.conj(h_hat) * fft2(b * data))
    shape = data.shape

    def matvec(x):
        x_hat = fft2(x.reshape(shape))
        out = tf * ifft2_real(model.lam * x_hat)
        for ev, sp in zip(evals, k_spec):
            if ev > 0:
                out += ev * ifft2_real(np.conj(sp) * fft2(b * ifft2_real(sp * x_hat)))
        return out.ravel()

    te_bar = float(np.mean(b))
    pre = te_bar * np.tensordot(w2, model.cross, axes=2) + tf * model.lam
    pre = np.maximum(pre, 1e-3 * float(np.mean(diag)))

    def precond(r):
        return ifft2_real(fft2(r.reshape(shape)) / pre).ravel()

    n = data.size
    x0 = state.image.mean.ravel() if state.image.mean.shape == shape else None
    mean, info = cg(LinearOperator((n, n), matvec=matvec, dtype=float), rhs.ravel(), x0=x0,
                    rtol=model.spec.pcg_rtol, atol=0.0, maxiter=model.spec.pcg_maxiter,
                    M=LinearOperator((n, n), matvec=precond, dtype=float))
    if info != 0:
        resid = float(np.linalg.norm(rhs.ravel() - matvec(mean)))
        raise ConvergenceError(f"conjugate gradients did not converge (residual {resid:.3g})",
                               residual=resid)
    return DiagonalGaussian(mean.reshape(shape), 1.0 / diag)


def _kernel_stats(model, image, data, b):
    """Quadratic ``Q`` and linear ``r`` of the expected data term in ``w``.

    With ``b`` the (scalar or per-site) expected noise precision:
    ``<sum_i b_i (g_i - (h*f)_i)^2> = w^T Q w - 2 r^T w + sum_i b_i g_i^2``.
    """
    x = _image_second(model, image)
    n_atoms = model.n_atoms
    if isinstance(image, CirculantGaussian):
        b = float(b)
        xm = x.reshape(n_atoms, -1)
        q = b * (xm @ xm.T + np.sum(model.cross / image.precision_spectrum, axis=(2, 3)))
        r = b * (xm @ data.ravel())
        return q, r
    bx = (b * x).reshape(n_atoms, -1)
    q = bx @ x.reshape(n_atoms, -1).T
    var_hat = fft2(image.var)
    for j in range(n_atoms):
        for l in range(j, n_atoms):
            prod = fft2(model.emb[j] * model.emb[l])
            val = float(np.sum(b * ifft2_real(prod * var_hat)))
            q[j, l] += val
            if l != j:
                q[l, j] += val
    r = bx @ data.ravel()
    return q, r


def update_kernel(model, state, data):
    """Gaussian factor of the kernel coefficients (dense ``N_w x N_w`` solve)."""
    if not model.estimate:
        return state.kernel
    data = as_image(data, "data")
    b = _noise_mean(model, state.noise)
    q, r = _kernel_stats(model, state.image, data, b)
    prec = q + np.diag(state.coeff_prec.mean)
    prec = 0.5 * (prec + prec.T)
    try:
        np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise InvalidStateError("kernel coefficient precision is not positive definite") from exc
    return GaussianFactor.from_natural(prec, r)


def rescale(model, state):
    """Move the kernel mass into the image so the kernel has unit mass.

    The mean prediction ``h * f`` is unchanged.
    """
    if isinstance(state.kernel, PointMass):
        return state
    s = float(state.kernel.mean @ model.basis.masses())
    if abs(s) < 1e-12:
        return state
    kern = GaussianFactor(state.kernel.mean / s, state.kernel.cov / s**2)
    img = state.image
    if isinstance(img, CirculantGaussian):
        img = CirculantGaussian(img.mean * s, img.precision_spectrum / s**2)
    else:
        img = DiagonalGaussian(img.mean * s, img.var * s**2)
    return MyopicState(img, kern, state.noise, state.theta_f, state.coeff_prec)


def residual_moments(model, state, data):
    """Diagonal of ``<e e^T>``, the expected squared residual per sample."""
    data = as_image(data, "data")
    w_mean, w2 = _coeff_moments(state.kernel)
    img = state.image
    x = _image_second(model, img)
    pred = np.tensordot(w_mean, x, axes=1)
    second = np.einsum("jl,jhw,lhw->hw", w2, x, x)
    if isinstance(img, CirculantGaussian):
        tr = np.tensordot(w2, np.sum(model.cross / img.precision_spectrum, axis=(2, 3)), axes=2)
        second = second + tr / data.size
    else:
        var_hat = fft2(img.var)
        for j in range(model.n_atoms):
            for l in range(model.n_atoms):
                if w2[j, l] != 0:
                    second = second + w2[j, l] * ifft2_real(
                        fft2(model.emb[j] * model.emb[l]) * var_hat)
    return data**2 - 2 * data * pred + second


def update_noise(model, state, data):
    """Gamma factor(s) of the noise precision."""
    pri = model.priors
    eps2 = residual_moments(model, state, data)
    inc = model.noise_shape_increment(data.size)
    if model.per_sample:
        return GammaField(np.full(data.shape, pri.alpha_e0 + inc), pri.beta_e0 + 0.5 * eps2)
    return GammaFactor(pri.alpha_e0 + inc, pri.beta_e0 + 0.5 * float(np.sum(eps2)))


def _roughness(model, image):
    val = model.diff.quadratic(image.mean)
    if isinstance(image, CirculantGaussian):
        return val + image.trace_with(model.lam)
    return val + model.diff_diag * float(np.sum(image.var))


def update_image_precision(model, state, data):
    pri = model.priors
    return GammaFactor(pri.alpha_f0 + data.size / 2,
                       pri.beta_f0 + 0.5 * _roughness(model, state.image))


def update_coeff_precisions(model, state):
    """Gamma factors of the coefficient precisions, shape ``w_shape0 + 1/2``."""
    if isinstance(state.kernel, PointMass):
        return state.coeff_prec
    pri = model.priors
    w_mean, w2 = _coeff_moments(state.kernel)
    n = w_mean.size
    return GammaField(np.full(n, pri.w_shape0 + 0.5), pri.w_rate0 + 0.5 * np.diag(w2))


def objective_check(model, state, data, image_mean=None, coeff_mean=None):
    """Expected quadratic objectives ``(J_f, J_w)`` whose minimisers are the
    image and kernel-coefficient means.

    ``J_f(x) = <(g - Hx)^T B (g - Hx)>_w + <theta_f> |Dx|^2`` and
    ``J_w(y) = <(g - F Phi y)^T B (g - F Phi y)>_f + y^T A y`` with
    ``A = diag(<alpha_j>)``.
    """
    data = as_image(data, "data")
    x = state.image.mean if image_mean is None else np.asarray(image_mean)
    w_mean, w2 = _coeff_moments(state.kernel)
    y = w_mean if coeff_mean is None else np.asarray(coeff_mean, dtype=float)
    b = np.asarray(_noise_mean(model, state.noise))
    tf = state.theta_f.mean

    xs = np.stack([_conv(p, x) for p in model.phi])
    pred = np.tensordot(w_mean, xs, axes=1)
    w_cov = w2 - np.outer(w_mean, w_mean)
    spread = np.einsum("jl,jhw,lhw->hw", w_cov, xs, xs)
    j_f = float(np.sum(b * ((data - pred) ** 2 + spread))) + tf * model.diff.quadratic(x)

    q, r = _kernel_stats(model, state.image, data, b)
    j_w = float(y @ q @ y - 2 * r @ y + np.sum(b * data**2))
    if isinstance(state.coeff_prec, GammaField):
        j_w += float(np.sum(state.coeff_prec.mean * y**2))
    return j_f, j_w


def free_energy(model, state, data):
    data = as_image(data, "data")
    pri = model.priors
    n = data.size
    eps2 = residual_moments(model, state, data)
    noise = state.noise
    if isinstance(noise, GammaField):
        val = float(np.sum(0.5 * (noise.mean_log - LOG_2PI) - 0.5 * noise.mean * eps2))
        val -= noise.kl_sum(pri.alpha_e0, pri.beta_e0)
    else:
        val = 0.5 * n * (noise.mean_log - LOG_2PI) - 0.5 * noise.mean * float(np.sum(eps2))
        val -= noise.kl(GammaFactor(pri.alpha_e0, pri.beta_e0))
    tf = state.theta_f
    val += 0.5 * n * (tf.mean_log - LOG_2PI) + 0.5 * log_pdet(model.lam)
    val -= 0.5 * tf.mean * _roughness(model, state.image)
    val -= tf.kl(GammaFactor(pri.alpha_f0, pri.beta_f0))
    val += state.image.entropy()
    if not isinstance(state.kernel, PointMass):
        alpha = state.coeff_prec
        _, w2 = _coeff_moments(state.kernel)
        val += float(np.sum(0.5 * (alpha.mean_log - LOG_2PI) - 0.5 * alpha.mean * np.diag(w2)))
        val += state.kernel.entropy()
        val -= alpha.kl_sum(pri.w_shape0, pri.w_rate0)
    return float(val)


class MyopicEngine:
    """Update cycle: image, kernel (then rescale), noise, image precision,
    coefficient precisions."""

    def __init__(self, spec, data):
        self.spec = spec
        self.data = data
        self.model = MyopicModel(spec, data.shape)

    def initial_state(self):
        model, g, pri = self.model, self.data, self.spec.priors
        w0 = model.basis.project(self.spec.kernel, g.shape)
        kernel = (GaussianFactor(w0, 1e-6 * np.eye(w0.size)) if model.estimate
                  else PointMass(w0))
        q_e = initial_noise_precision(pri.alpha_e0, pri.beta_e0, g,
                                      n_obs=1 if model.per_sample else None)
        te = q_e.mean
        tf = pri.alpha_f0 / pri.beta_f0
        h_hat = np.tensordot(w0, model.phi, axes=1)
        mean = ifft2_real(np.conj(h_hat) * fft2(g))
        h_norm2 = float(np.sum(np.abs(h_hat) ** 2)) / g.size
        if model.per_sample:
            image = DiagonalGaussian(mean, np.full(g.shape, 1 / (te * h_norm2 + tf)))
            noise = GammaField(np.full(g.shape, q_e.shape), np.full(g.shape, q_e.rate))
        else:
            image = CirculantGaussian(mean, np.full(g.shape, te * h_norm2 + tf))
            noise = q_e
        coeff = GammaField(np.full(w0.size, pri.w_shape0), np.full(w0.size, pri.w_rate0))
        state = MyopicState(image, kernel, noise, GammaFactor(pri.alpha_f0, pri.beta_f0), coeff)
        # start theta_f from the initial image, consistent with the noise estimate
        q_f = update_image_precision(model, state, g)
        return MyopicState(image, kernel, noise, q_f, coeff)

    def validate(self, state):
        if not isinstance(state, MyopicState):
            raise InvalidStateError(f"expected MyopicState, got {type(state).__name__}")
        check_shape(state.image.shape, self.data.shape, "image factor")
        w_mean, _ = _coeff_moments(state.kernel)
        if w_mean.size != self.model.n_atoms:
            raise InvalidStateError("kernel factor does not match the basis size")

    def step(self, state):
        model, g = self.model, self.data
        state = MyopicState(update_image(model, state, g), state.kernel, state.noise,
                            state.theta_f, state.coeff_prec)
        state = MyopicState(state.image, update_kernel(model, state, g), state.noise,
                            state.theta_f, state.coeff_prec)
        if self.spec.fix_scale and model.estimate:
            state = rescale(model, state)
        state = MyopicState(state.image, state.kernel, update_noise(model, state, g),
                            state.theta_f, state.coeff_prec)
        state = MyopicState(state.image, state.kernel, state.noise,
                            update_image_precision(model, state, g), state.coeff_prec)
        return MyopicState(state.image, state.kernel, state.noise, state.theta_f,
                           update_coeff_precisions(model, state))

    def free_energy(self, state):
        return free_energy(self.model, state, self.data)

    objective = free_energy

    def summaries(self, state):
        w_mean, _ = _coeff_moments(state.kernel)
        out = {
            "theta_e": float(np.mean(_noise_mean(self.model, state.noise))),
            "theta_f": state.theta_f.mean,
            "kernel_mass": float(w_mean @ self.model.basis.masses()),
        }
        for j, wj in enumerate(w_mean):
            out[f"w_{j}"] = float(wj)
        return out

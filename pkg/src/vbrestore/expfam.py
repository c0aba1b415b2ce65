"""Parametric factors of the separable approximation.

Each factor is an immutable value with closed-form moments, entropy and KL
divergence to another factor of the same family.

Conventions: :class:`GammaFactor` uses shape/rate (mean ``shape / rate``),
:class:`InverseGammaFactor` uses shape/scale (``E[1/v] = shape / scale``).
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .errors import FamilyMismatchError, InvalidStateError

LOG_2PI = np.log(2 * np.pi)


def _positive(value, name):
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise InvalidStateError(f"{name} must be finite and positive, got {value!r}")
    return arr


def _same_family(q, p):
    if type(q) is not type(p):
        raise FamilyMismatchError(
            f"cannot compare {type(q).__name__} with {type(p).__name__}"
        )


@dataclass(frozen=True)
class GammaFactor:
    """Gamma density ``p(x) ∝ x^(shape-1) exp(-rate x)``."""

    shape: float
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "shape", float(_positive(self.shape, "shape")))
        object.__setattr__(self, "rate", float(_positive(self.rate, "rate")))

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def variance(self):
        return self.shape / self.rate**2

    @property
    def mean_log(self):
        """``E[ln x] = psi(shape) - ln(rate)``."""
        return float(digamma(self.shape) - np.log(self.rate))

    @property
    def mode(self):
        if self.shape < 1:
            return 0.0
        return (self.shape - 1) / self.rate

    def updated(self, shape_increment, rate_increment):
        """Conjugate update: add sufficient statistics to the parameters."""
        return GammaFactor(self.shape + shape_increment, self.rate + rate_increment)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (
            self.shape * np.log(self.rate)
            - gammaln(self.shape)
            + (self.shape - 1) * np.log(x)
            - self.rate * x
        )

    def expected_log_pdf(self, q):
        """``E_q[ln p(x)]`` for a Gamma ``q`` and this density ``p``."""
        return float(
            self.shape * np.log(self.rate)
            - gammaln(self.shape)
            + (self.shape - 1) * q.mean_log
            - self.rate * q.mean
        )

    def entropy(self):
        a, b = self.shape, self.rate
        return float(a - np.log(b) + gammaln(a) + (1 - a) * digamma(a))

    def kl(self, other):
        _same_family(self, other)
        return max(0.0, -self.entropy() - other.expected_log_pdf(self))


@dataclass(frozen=True)
class InverseGammaFactor:
    """Inverse-Gamma density ``p(v) ∝ v^(-shape-1) exp(-scale / v)``."""

    shape: float
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "shape", float(_positive(self.shape, "shape")))
        object.__setattr__(self, "scale", float(_positive(self.scale, "scale")))

    @property
    def mean_inverse(self):
        return self.shape / self.scale

    @property
    def mean_log(self):
        """``E[ln v] = ln(scale) - psi(shape)``."""
        return float(np.log(self.scale) - digamma(self.shape))

    @property
    def mean(self):
        if self.shape <= 1:
            return np.inf
        return self.scale / (self.shape - 1)

    def updated(self, shape_increment, scale_increment):
        return InverseGammaFactor(self.shape + shape_increment, self.scale + scale_increment)

    def log_pdf(self, v):
        v = np.asarray(v, dtype=np.float64)
        return (
            self.shape * np.log(self.scale)
            - gammaln(self.shape)
            - (self.shape + 1) * np.log(v)
            - self.scale / v
        )

    def expected_log_pdf(self, q):
        return float(
            self.shape * np.log(self.scale)
            - gammaln(self.shape)
            - (self.shape + 1) * q.mean_log
            - self.scale * q.mean_inverse
        )

    def entropy(self):
        a, b = self.shape, self.scale
        return float(a + np.log(b) + gammaln(a) - (1 + a) * digamma(a))

    def kl(self, other):
        _same_family(self, other)
        return max(0.0, -self.entropy() - other.expected_log_pdf(self))


@dataclass(frozen=True, eq=False)
class GaussianFactor:
    """Multivariate Gaussian with a dense covariance (small blocks)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.array(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.array(self.cov, dtype=np.float64))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise InvalidStateError(
                f"mean of length {mean.size} does not match covariance {cov.shape}"
            )
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14 * np.abs(cov).max()):
            raise InvalidStateError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise InvalidStateError("covariance is not positive definite") from exc
        for arr in (mean, cov, chol):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def from_natural(cls, precision, linear):
        """Build from precision ``P`` and linear term ``b`` (mean ``P^-1 b``)."""
        precision = np.atleast_2d(np.asarray(precision, dtype=np.float64))
        cov = np.linalg.inv(precision)
        cov = 0.5 * (cov + cov.T)
        return cls(cov @ np.atleast_1d(linear), cov)

    @property
    def dim(self):
        return self.mean.size

    @property
    def variance(self):
        return np.diag(self.cov).copy()

    def precision(self):
        return np.linalg.inv(self.cov)

    def second_moment(self):
        """``E[x x^T] = mu mu^T + Sigma``."""
        return np.outer(self.mean, self.mean) + self.cov

    def log_det_cov(self):
        return float(2 * np.sum(np.log(np.diag(self._chol))))

    def absorb(self, precision, linear):
        """Multiply in a Gaussian term ``exp(-x^T P x / 2 + b^T x)``."""
        prec = self.precision() + np.atleast_2d(precision)
        lin = self.precision() @ self.mean + np.atleast_1d(linear)
        return GaussianFactor.from_natural(prec, lin)

    def log_pdf(self, x):
        diff = np.atleast_1d(x) - self.mean
        z = np.linalg.solve(self._chol, diff)
        return float(-0.5 * (self.dim * LOG_2PI + self.log_det_cov() + z @ z))

    def entropy(self):
        return 0.5 * (self.dim * (1 + LOG_2PI) + self.log_det_cov())

    def kl(self, other):
        _same_family(self, other)
        if other.dim != self.dim:
            raise InvalidStateError(f"dimension {self.dim} vs {other.dim}")
        p_inv = other.precision()
        diff = other.mean - self.mean
        val = 0.5 * (
            np.trace(p_inv @ self.cov)
            + diff @ p_inv @ diff
            - self.dim
            + other.log_det_cov()
            - self.log_det_cov()
        )
        return max(0.0, float(val))


@dataclass(frozen=True, eq=False)
class CirculantGaussian:
    """Image-sized Gaussian whose covariance is circulant.

    The covariance is held through its eigenvalues in the DFT basis:
    ``precision_spectrum`` has the image shape and ``Sigma = F^-1 diag(1/s) F``.
    """

    mean: np.ndarray
    precision_spectrum: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        spec = np.array(self.precision_spectrum, dtype=np.float64)
        if mean.shape != spec.shape or mean.ndim != 2:
            raise InvalidStateError(
                f"mean {mean.shape} and spectrum {spec.shape} must be equal 2-D shapes"
            )
        _positive(spec, "precision spectrum")
        mean.setflags(write=False)
        spec.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision_spectrum", spec)

    @property
    def shape(self):
        return self.mean.shape

    @property
    def covariance_spectrum(self):
        return 1.0 / self.precision_spectrum

    def variance(self):
        """Marginal variances (constant over the lattice)."""
        return np.full(self.shape, np.mean(self.covariance_spectrum))

    def trace_with(self, spectrum):
        """``tr(A Sigma)`` for a circulant ``A`` with the given spectrum."""
        return float(np.sum(spectrum / self.precision_spectrum))

    def dense_cov(self):
        """Dense covariance, for small lattices and tests only."""
        n = self.mean.size
        eye = np.eye(n).reshape((n,) + self.shape)
        cols = np.fft.ifft2(np.fft.fft2(eye) * self.covariance_spectrum).real
        return cols.reshape(n, n).T

    def entropy(self):
        n = self.mean.size
        return float(0.5 * (n * (1 + LOG_2PI) - np.sum(np.log(self.precision_spectrum))))

    def kl(self, other):
        _same_family(self, other)
        if other.shape != self.shape:
            raise InvalidStateError(f"shape {self.shape} vs {other.shape}")
        ratio = other.precision_spectrum / self.precision_spectrum
        diff_hat = np.fft.fft2(other.mean - self.mean)
        maha = np.sum(other.precision_spectrum * np.abs(diff_hat) ** 2) / self.mean.size
        val = 0.5 * (np.sum(ratio - 1 - np.log(ratio)) + maha)
        return max(0.0, float(val))


@dataclass(frozen=True, eq=False)
class DiagonalGaussian:
    """Image-sized Gaussian with independent sites."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        var = np.array(self.var, dtype=np.float64)
        if mean.shape != var.shape:
            raise InvalidStateError(f"mean {mean.shape} vs variance {var.shape}")
        _positive(var, "variance")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def shape(self):
        return self.mean.shape

    def variance(self):
        return self.var.copy()

    def entropy(self):
        return float(0.5 * np.sum(1 + LOG_2PI + np.log(self.var)))

    def kl(self, other):
        _same_family(self, other)
        if other.shape != self.shape:
            raise InvalidStateError(f"shape {self.shape} vs {other.shape}")
        r = self.var / other.var
        d2 = (self.mean - other.mean) ** 2 / other.var
        return max(0.0, float(0.5 * np.sum(r + d2 - 1 - np.log(r))))


@dataclass(frozen=True)
class DirichletFactor:
    concentration: tuple

    def __post_init__(self):
        conc = _positive(np.atleast_1d(self.concentration), "concentration")
        if conc.ndim != 1:
            raise InvalidStateError("concentration must be a vector")
        object.__setattr__(self, "concentration", tuple(float(c) for c in conc))

    @property
    def alpha(self):
        return np.asarray(self.concentration)

    @property
    def mean(self):
        a = self.alpha
        return a / a.sum()

    @property
    def mean_log(self):
        """``E[ln pi_k] = psi(alpha_k) - psi(sum alpha)``."""
        a = self.alpha
        return digamma(a) - digamma(a.sum())

    def log_norm(self):
        a = self.alpha
        return float(gammaln(a.sum()) - np.sum(gammaln(a)))

    def expected_log_pdf(self, q):
        return float(self.log_norm() + np.sum((self.alpha - 1) * q.mean_log))

    def entropy(self):
        a = self.alpha
        k, a0 = a.size, a.sum()
        return float(
            -self.log_norm() + (a0 - k) * digamma(a0) - np.sum((a - 1) * digamma(a))
        )

    def kl(self, other):
        _same_family(self, other)
        if len(other.concentration) != len(self.concentration):
            raise InvalidStateError("class counts differ")
        return max(0.0, -self.entropy() - other.expected_log_pdf(self))


@dataclass(frozen=True, eq=False)
class CategoricalField:
    """Per-site class probabilities, stored as an array of shape ``(K, H, W)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 3:
            raise InvalidStateError(f"probabilities must be (K, H, W), got {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise InvalidStateError("probabilities must be finite and non-negative")
        if np.max(np.abs(probs.sum(axis=0) - 1)) > 1e-12:
            raise InvalidStateError("class probabilities do not sum to one")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_classes, shape):
        return cls(np.full((n_classes,) + tuple(shape), 1.0 / n_classes))

    @property
    def n_classes(self):
        return self.probs.shape[0]

    @property
    def shape(self):
        return self.probs.shape[1:]

    def counts(self):
        return self.probs.sum(axis=(1, 2))

    def hard_labels(self):
        return np.argmax(self.probs, axis=0)

    def entropy(self):
        p = self.probs
        safe = np.where(p > 0, p, 1.0)
        return float(-np.sum(p * np.log(safe)))

    def kl(self, other):
        _same_family(self, other)
        if other.probs.shape != self.probs.shape:
            raise InvalidStateError(f"shape {self.probs.shape} vs {other.probs.shape}")
        p, q = self.probs, other.probs
        mask = p > 0
        if np.any(mask & (q <= 0)):
            return np.inf
        return max(0.0, float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


@dataclass(frozen=True)
class PointMass:
    """Degenerate factor ``delta(x - value)`` used by point-estimate regimes.

    It has no density, so entropy and KL are undefined; regimes that use it
    track a joint log-density instead of the free energy.
    """

    value: object
    degenerate: bool = True

    @property
    def mean(self):
        return self.value

    def entropy(self):
        raise InvalidStateError("a point mass has no finite entropy")

    def kl(self, other):
        raise InvalidStateError("a point mass has no finite KL divergence")


def gamma_mean(g):
    return g.mean


def factor_entropy(factor):
    return factor.entropy()


def kl_divergence(q, p):
    """KL(q || p) between two factors of the same family."""
    _same_family(q, p)
    return q.kl(p)


def categorical_normalize(logits, axis=0):
    """Softmax along ``axis`` with log-sum-exp overflow protection."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    probs = np.exp(logits - logsumexp(logits, axis=axis, keepdims=True))
    # renormalise so rows sum to one to machine precision
    return probs / probs.sum(axis=axis, keepdims=True)

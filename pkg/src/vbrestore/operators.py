"""Lattice linear algebra on periodic 2-D grids.

Every operator here is circulant: convolutions use a periodic (wrap-around)
boundary, so they are diagonalised by the 2-D DFT.  Spectra follow numpy's
unnormalised ``fft2`` convention, so for a circulant operator ``A`` with
spectrum ``a`` and a real image ``x``::

    A @ x        == ifft2(a * fft2(x)).real
    x @ A @ x    == sum(a * |fft2(x)|**2) / x.size
    trace(A)     == sum(a)

Images are plain 2-D ``float64`` arrays; kernels are :class:`ConvKernel`.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, SingularSystemError

# relative eigenvalue floor below which a circulant system counts as singular
SINGULAR_RTOL = 1e-12


def as_image(values, name="image"):
    """Return ``values`` as a finite, non-empty 2-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError(f"{name} is empty (shape {arr.shape})")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def fft2(x):
    return np.fft.fft2(x)


def ifft2_real(x_hat):
    return np.fft.ifft2(x_hat).real


def shift(x, offset):
    """Periodic shift over the last two axes: ``shift(x, o)[..., r] == x[..., r + o]``."""
    dy, dx = offset
    return np.roll(x, (-dy, -dx), axis=(-2, -1))


def lattice_offsets(shape):
    """Distinct 4-connected neighbour offsets on a periodic lattice.

    An axis of length >= 3 contributes both directions, an axis of length 2
    contributes one (both directions reach the same site) and an axis of
    length 1 contributes none, so a site is never its own neighbour.
    """
    offsets = []
    for axis, length in enumerate(shape):
        unit = [0, 0]
        unit[axis] = 1
        if length >= 2:
            offsets.append(tuple(unit))
        if length >= 3:
            offsets.append(tuple(-u for u in unit))
    return offsets


def neighbor_sum(x, offsets):
    """Sum of ``x`` over the neighbours of every site (last two axes)."""
    total = np.zeros_like(x)
    for o in offsets:
        total += shift(x, o)
    return total


@dataclass(frozen=True, eq=False)
class ConvKernel:
    """Point-spread function with odd support anchored at its centre tap.

    Parameters
    ----------
    taps : array_like, shape (kh, kw)
        Kernel values; ``kh`` and ``kw`` must be odd.
    """

    taps: np.ndarray

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64)
        if taps.ndim == 0:
            taps = taps.reshape(1, 1)
        if taps.ndim != 2:
            raise DimensionError(f"kernel must be 2-D, got shape {taps.shape}")
        if taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            raise DimensionError(f"kernel support must be odd, got {taps.shape}")
        if not np.all(np.isfinite(taps)):
            raise ValueError("kernel taps must be finite")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @classmethod
    def identity(cls):
        return cls(np.ones((1, 1)))

    @classmethod
    def box(cls, size):
        return cls(np.full((size, size), 1.0 / size**2))

    @classmethod
    def gaussian(cls, sigma, size=None):
        """Unit-mass sampled Gaussian; ``size`` defaults to ``2*ceil(3 sigma)+1``."""
        if size is None:
            size = 2 * int(np.ceil(3 * sigma)) + 1
        r = np.arange(size) - size // 2
        g = np.exp(-0.5 * (r / sigma) ** 2)
        taps = np.outer(g, g)
        return cls(taps / taps.sum())

    @property
    def shape(self):
        return self.taps.shape

    @property
    def mass(self):
        return float(self.taps.sum())

    def flipped(self):
        return ConvKernel(self.taps[::-1, ::-1])

    def embed(self, shape):
        """Image-sized array holding the taps with the anchor at site (0, 0)."""
        kh, kw = self.taps.shape
        if kh > shape[0] or kw > shape[1]:
            raise DimensionError(
                f"kernel support {kh}x{kw} exceeds image extent {shape[0]}x{shape[1]}"
            )
        out = np.zeros(shape)
        rows = (np.arange(kh) - kh // 2) % shape[0]
        cols = (np.arange(kw) - kw // 2) % shape[1]
        out[np.ix_(rows, cols)] = self.taps
        return out

    def spectrum(self, shape):
        return fft2(self.embed(shape))


def as_kernel(kernel):
    return kernel if isinstance(kernel, ConvKernel) else ConvKernel(kernel)


@dataclass(frozen=True)
class DiffOperator:
    """Periodic finite-difference regulariser ``D``.

    ``order=1`` stacks forward differences along both axes, so
    ``|Dx|^2 = sum (x[i+1,j]-x[i,j])^2 + (x[i,j+1]-x[i,j])^2``.
    ``order=2`` is the normalised Laplacian ``I - A`` where ``A`` averages the
    distinct neighbours of :func:`lattice_offsets`.  ``order=0`` is the
    identity, which turns the smoothness prior into an i.i.d. one.
    """

    order: int = 1
    boundary: str = field(default="periodic")

    def __post_init__(self):
        if self.order not in (0, 1, 2):
            raise ValueError(f"difference order must be 0, 1 or 2, got {self.order}")
        if self.boundary != "periodic":
            raise ValueError("only periodic boundaries are supported")

    def spectrum(self, shape):
        """Eigenvalues of ``D^T D`` in the DFT basis (computed analytically)."""
        wy = 2 * np.pi * np.fft.fftfreq(shape[0])[:, None]
        wx = 2 * np.pi * np.fft.fftfreq(shape[1])[None, :]
        if self.order == 0:
            return np.ones(shape)
        if self.order == 1:
            return (2 - 2 * np.cos(wy)) + (2 - 2 * np.cos(wx))
        offsets = lattice_offsets(shape)
        if not offsets:
            return np.ones(shape)
        avg = sum(np.cos(wy * dy + wx * dx) for dy, dx in offsets) / len(offsets)
        return (1 - avg) ** 2

    def gram(self, x):
        """``D^T D x`` by direct stencil application."""
        if self.order == 0:
            return x.copy()
        if self.order == 1:
            out = np.zeros_like(x)
            for axis in (0, 1):
                out += 2 * x - np.roll(x, 1, axis=axis) - np.roll(x, -1, axis=axis)
            return out
        offsets = lattice_offsets(x.shape)
        if not offsets:
            return x.copy()
        n = len(offsets)
        y = x - neighbor_sum(x, offsets) / n
        # the offset set is symmetric, so A^T = A
        return y - neighbor_sum(y, offsets) / n

    def quadratic(self, x):
        """``|D x|^2``."""
        return float(np.vdot(x, self.gram(x)))


def convolve(image, kernel):
    """Periodic convolution ``(h * f)(r) = sum_s h(s) f(r - s)``."""
    image = as_image(image)
    kernel = as_kernel(kernel)
    return ifft2_real(kernel.spectrum(image.shape) * fft2(image))


def correlate(image, kernel):
    """Adjoint of :func:`convolve` (convolution with the flipped kernel)."""
    image = as_image(image)
    kernel = as_kernel(kernel)
    return ifft2_real(np.conj(kernel.spectrum(image.shape)) * fft2(image))


_NOISE_MASK = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])


def noise_variance_estimate(image):
    """Immerkær's estimate of white-noise variance from the mean absolute
    response of a mask that annihilates locally planar images.

    Returns ``None`` on lattices smaller than 3x3 or when the response
    vanishes.
    """
    image = as_image(image)
    if min(image.shape) < 3:
        return None
    resp = convolve(image, ConvKernel(_NOISE_MASK))
    s2 = (np.sqrt(np.pi / 2) * float(np.mean(np.abs(resp))) / 6) ** 2
    return s2 if np.isfinite(s2) and s2 > 0 else None


def apply_diff_gram(image, d):
    return d.gram(as_image(image))


def check_spectrum(denominator, what="system"):
    """Raise :class:`SingularSystemError` if any eigenvalue (numerically) vanishes."""
    scale = float(np.max(np.abs(denominator))) if denominator.size else 0.0
    bad = np.abs(denominator) <= SINGULAR_RTOL * max(scale, np.finfo(float).tiny)
    if np.any(bad):
        freq = tuple(int(i) for i in np.argwhere(bad)[0])
        raise SingularSystemError(
            f"singular {what}: eigenvalue {denominator[freq]:.3g} at frequency {freq}",
            frequency=freq,
        )


def normal_spectrum(kernel, lam, d, ridge, shape):
    """Spectrum of ``H^T H + lam D^T D + ridge I``."""
    h_hat = as_kernel(kernel).spectrum(shape)
    return np.abs(h_hat) ** 2 + lam * d.spectrum(shape) + ridge


def circulant_solve(rhs, kernel, lam, d, ridge=0.0):
    """Solve ``(H^T H + lam D^T D + ridge I) x = rhs`` in the Fourier domain."""
    rhs = as_image(rhs, "rhs")
    if lam < 0 or ridge < 0:
        raise ValueError("lam and ridge must be non-negative")
    denom = normal_spectrum(kernel, lam, d, ridge, rhs.shape)
    check_spectrum(denom)
    return ifft2_real(fft2(rhs) / denom)


def posterior_variance_diag(kernel, theta_e, theta_f, d, shape, ridge=0.0):
    """Diagonal of ``[theta_e H^T H + theta_f D^T D + ridge I]^{-1}``.

    The inverse is circulant, so its diagonal is the constant
    ``mean(1 / eigenvalues)``; it is returned replicated over the lattice.
    """
    if theta_e < 0 or theta_f < 0:
        raise ValueError("precisions must be non-negative")
    h_hat = as_kernel(kernel).spectrum(shape)
    denom = theta_e * np.abs(h_hat) ** 2 + theta_f * d.spectrum(shape) + ridge
    check_spectrum(denom)
    return np.full(shape, np.mean(1.0 / denom))

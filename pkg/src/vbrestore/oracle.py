"""Brute-force references for testing the solvers.

Everything here is built from dense matrices assembled site by site, exact
enumeration, numerical quadrature or Gibbs sampling.  Nothing is imported
from the solver modules; model settings are read from plain attributes.
"""

import itertools

import numpy as np
from scipy import integrate, linalg, optimize
from scipy.special import gammaln, logsumexp

from .errors import ConvergenceError

LOG_2PI = np.log(2 * np.pi)


def _index(shape, i, j):
    h, w = shape
    return (i % h) * w + (j % w)


def dense_convolution(taps, shape):
    """Matrix of periodic convolution ``(h*f)(r) = sum_s h(s) f(r-s)``."""
    taps = np.atleast_2d(np.asarray(taps, dtype=float))
    kh, kw = taps.shape
    h, w = shape
    n = h * w
    mat = np.zeros((n, n))
    for i in range(h):
        for j in range(w):
            row = _index(shape, i, j)
            for a in range(kh):
                for b in range(kw):
                    si, sj = a - kh // 2, b - kw // 2
                    mat[row, _index(shape, i - si, j - sj)] += taps[a, b]
    return mat


def neighbor_sets(shape):
    """Distinct periodic 4-neighbours of every site, excluding the site itself."""
    h, w = shape
    out = []
    for i in range(h):
        for j in range(w):
            me = _index(shape, i, j)
            nb = {_index(shape, i + di, j + dj) for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))}
            nb.discard(me)
            out.append(sorted(nb))
    return out


def dense_difference(order, shape):
    """Dense ``D``: identity (0), stacked forward differences (1), or
    ``I - A`` with ``A`` averaging the distinct neighbours (2)."""
    h, w = shape
    n = h * w
    if order == 0:
        return np.eye(n)
    if order == 1:
        rows = []
        for di, dj in ((1, 0), (0, 1)):
            d = np.zeros((n, n))
            for i in range(h):
                for j in range(w):
                    r = _index(shape, i, j)
                    d[r, _index(shape, i + di, j + dj)] += 1
                    d[r, r] -= 1
            rows.append(d)
        return np.vstack(rows)
    if order == 2:
        d = np.eye(n)
        for r, nb in enumerate(neighbor_sets(shape)):
            for s in nb:
                d[r, s] -= 1.0 / len(nb)
        return d
    raise ValueError(f"unsupported order {order}")


def dense_posterior(H, D, g, theta_e, theta_f):
    """Mean and covariance of ``f`` given ``theta``: precision
    ``theta_e H^T H + theta_f D^T D`` factorised by Cholesky."""
    H, D = np.atleast_2d(H), np.atleast_2d(D)
    g = np.ravel(g)
    prec = theta_e * H.T @ H + theta_f * D.T @ D
    try:
        factor = linalg.cho_factor(prec)
    except linalg.LinAlgError as exc:
        raise linalg.LinAlgError("posterior precision is singular") from exc
    cov = linalg.cho_solve(factor, np.eye(prec.shape[0]))
    mean = linalg.cho_solve(factor, theta_e * H.T @ g)
    return mean, 0.5 * (cov + cov.T)


def log_pdet(mat, rtol=1e-10):
    ev = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    keep = ev > rtol * max(ev.max(), 1e-300)
    return float(np.sum(np.log(ev[keep])))


def log_gaussian_integral(prec, lin):
    """``ln int exp(-x^T P x / 2 + b^T x) dx``."""
    chol = linalg.cholesky(prec, lower=True)
    z = linalg.solve_triangular(chol, lin, lower=True)
    n = prec.shape[0]
    return 0.5 * n * LOG_2PI - np.sum(np.log(np.diag(chol))) + 0.5 * float(z @ z)


def gaussian_log_evidence(H, D, g, theta_e, theta_f):
    """``ln p(g | theta)`` with the image integrated out.

    The image prior is ``(theta_f/2pi)^(N/2) pdet(D^T D)^(1/2) exp(-theta_f |Df|^2/2)``.
    """
    H, D = np.atleast_2d(H), np.atleast_2d(D)
    g = np.ravel(g)
    m, n = H.shape
    dtd = D.T @ D
    prec = theta_e * H.T @ H + theta_f * dtd
    val = 0.5 * m * (np.log(theta_e) - LOG_2PI) - 0.5 * theta_e * float(g @ g)
    val += 0.5 * n * (np.log(theta_f) - LOG_2PI) + 0.5 * log_pdet(dtd)
    return float(val + log_gaussian_integral(prec, theta_e * H.T @ g))


def gaussian_marginal_direct(H, D, g, theta_e, theta_f):
    """``ln N(g; 0, I/theta_e + H (theta_f D^T D)^-1 H^T)`` (full-rank ``D`` only)."""
    H, D = np.atleast_2d(H), np.atleast_2d(D)
    cov = np.eye(H.shape[0]) / theta_e + H @ np.linalg.inv(theta_f * D.T @ D) @ H.T
    sign, logdet = np.linalg.slogdet(cov)
    g = np.ravel(g)
    return float(-0.5 * (g.size * LOG_2PI + logdet + g @ np.linalg.solve(cov, g)))


def _log_gamma_pdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x


def _log_invgamma_pdf(v, shape, scale):
    return shape * np.log(scale) - gammaln(shape) - (shape + 1) * np.log(v) - scale / v


def _log_quad(logf, dim, tol=1e-11):
    """``ln int exp(logf(u)) du`` over R^dim (dim 1 or 2), in log-variables."""
    start = np.zeros(dim)
    res = optimize.minimize(lambda u: -logf(*u), start, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    u0 = res.x
    top = logf(*u0)

    def bounds(axis):
        lo = []
        for sgn in (-1, 1):
            step, u = 0.5, u0.copy()
            while True:
                u[axis] = u0[axis] + sgn * step
                if logf(*u) - top < -45 or step > 200:
                    break
                step *= 1.5
            lo.append(u0[axis] + sgn * step)
        return lo

    if dim == 1:
        a, b = bounds(0)
        val, err = integrate.quad(lambda u: np.exp(logf(u) - top), a, b,
                                  points=[u0[0]], epsabs=0.0, epsrel=tol, limit=200)
    else:
        # tensor Gauss-Legendre on the box; the integrand is smooth and
        # unimodal there, so two orders agreeing bounds the error
        (a, b), (c, d) = bounds(0), bounds(1)
        vals = []
        for n in (60, 90):
            x, w = np.polynomial.legendre.leggauss(n)
            us = 0.5 * (b - a) * x + 0.5 * (a + b)
            vs = 0.5 * (d - c) * x + 0.5 * (c + d)
            grid = np.array([[logf(u, v) for v in vs] for u in us]) - top
            vals.append(0.25 * (b - a) * (d - c) * float(w @ np.exp(grid) @ w))
        val, err = vals[1], abs(vals[1] - vals[0])
    if not np.isfinite(val) or val <= 0 or err > 1e3 * tol * val:
        raise ConvergenceError(f"quadrature reached relative error {err / max(val, 1e-300):.2e}",
                               residual=err)
    return top + np.log(val)


def evidence_quadrature(H, D, g, priors=None, theta_e=None, theta_f=None):
    """Log evidence of the linear-Gaussian model.

    Known precisions are passed as numbers; unknown ones (``None``) are
    integrated against their Gamma priors (``priors`` gives ``alpha_e0``,
    ``beta_e0``, ``alpha_f0``, ``beta_f0`` as attributes or keys) by adaptive
    quadrature over their logarithms.
    """
    get = (lambda k: priors[k]) if isinstance(priors, dict) else (lambda k: getattr(priors, k))

    def logf(*u):
        it = iter(u)
        te = theta_e if theta_e is not None else np.exp(next(it))
        tf = theta_f if theta_f is not None else np.exp(next(it))
        val = gaussian_log_evidence(H, D, g, te, tf)
        if theta_e is None:
            val += _log_gamma_pdf(te, get("alpha_e0"), get("beta_e0")) + np.log(te)
        if theta_f is None:
            val += _log_gamma_pdf(tf, get("alpha_f0"), get("beta_f0")) + np.log(tf)
        return val

    dim = (theta_e is None) + (theta_f is None)
    if dim == 0:
        return logf()
    return _log_quad(logf, dim)


def label_configurations(n_sites, n_classes):
    return itertools.product(range(n_classes), repeat=n_sites)


def _agreements(z, shape):
    nb = neighbor_sets(shape)
    return 0.5 * sum(z[r] == z[s] for r in range(len(nb)) for s in nb[r])


def potts_enumeration(unary, gamma):
    """Exact label marginals for ``p(z) ∝ exp(sum_r u[z_r, r] + gamma * agreements)``.

    ``unary`` has shape ``(K, H, W)``; agreements count unordered pairs of
    distinct periodic 4-neighbours.
    """
    unary = np.asarray(unary, dtype=float)
    k, h, w = unary.shape
    flat = unary.reshape(k, -1)
    n = h * w
    configs = np.array(list(label_configurations(n, k)))
    logw = np.array([flat[z, np.arange(n)].sum() + gamma * _agreements(z, (h, w))
                     for z in configs])
    p = np.exp(logw - logsumexp(logw))
    marg = np.zeros((k, n))
    for z, pz in zip(configs, p):
        marg[z, np.arange(n)] += pz
    return marg.reshape(k, h, w)


def _local_mean_matrix(z, shape, coupled):
    """Rows give ``e = R f - S m`` for labels ``z`` (``m`` has one entry per class)."""
    n = shape[0] * shape[1]
    k_max = int(max(z)) + 1
    r_mat = np.eye(n)
    s_mat = np.zeros((n, k_max))
    nb = neighbor_sets(shape)
    for r in range(n):
        k = z[r]
        if not coupled or not nb[r]:
            s_mat[r, k] = 1.0
            continue
        for s in nb[r]:
            if z[s] == k:
                r_mat[r, s] -= 1.0 / len(nb[r])
            else:
                s_mat[r, k] += 1.0 / len(nb[r])
    return r_mat, s_mat


def mixture_log_evidence(H, g, shape, model, n_classes, gamma, priors, theta_e):
    """Log of the (Potts-partition-free) evidence of a mixture model, by
    enumerating labels, integrating image and class means in closed form,
    the proportions as a Dirichlet-multinomial and class variances by
    quadrature.  Intended for at most three sites and ``theta_e`` known.
    """
    H = np.atleast_2d(H)
    g = np.ravel(g)
    n = H.shape[1]
    coupled = model in ("MSGM", "MGMP")
    potts = model in ("MGP", "MGMP")
    get = (lambda k: priors[k]) if isinstance(priors, dict) else (lambda k: getattr(priors, k))
    m0, v0, a0, b0 = get("m0"), get("v0"), get("a0"), get("b0")
    alpha0 = get("alpha0")
    if alpha0 is None:
        alpha0 = 1.0 / n_classes
    const = 0.0
    if coupled:
        d = dense_difference(2, shape)
        const = 0.5 * log_pdet(d.T @ d)
    terms = []
    for z in label_configurations(n, n_classes):
        z = np.array(z)
        counts = np.bincount(z, minlength=n_classes)
        used = [k for k in range(n_classes) if counts[k] > 0]
        log_dm = (gammaln(n_classes * alpha0) - gammaln(n_classes * alpha0 + n)
                  + np.sum(gammaln(alpha0 + counts) - gammaln(alpha0)))
        log_potts = gamma * (_agreements(z, shape) - 0.5 * sum(map(len, neighbor_sets(shape))))
        r_mat, s_mat = _local_mean_matrix(z, shape, coupled)
        s_mat = np.pad(s_mat, ((0, 0), (0, n_classes - s_mat.shape[1])))[:, used]

        def logf(*u, z=z, r_mat=r_mat, s_mat=s_mat, used=used):
            v = np.exp(np.array(u))
            iv_site = 1.0 / v[[used.index(k) for k in z]]
            # joint Gaussian in x = (f, m_used)
            a_mat = np.hstack([r_mat, -s_mat])
            prec = a_mat.T @ (iv_site[:, None] * a_mat)
            prec[:n, :n] += theta_e * H.T @ H
            nu = len(used)
            prec[n:, n:] += np.eye(nu) / v0
            lin = np.concatenate([theta_e * H.T @ g, np.full(nu, m0 / v0)])
            val = 0.5 * g.size * (np.log(theta_e) - LOG_2PI) - 0.5 * theta_e * float(g @ g)
            val += -0.5 * n * LOG_2PI - 0.5 * np.sum(np.log(v[[used.index(k) for k in z]]))
            val += -0.5 * nu * np.log(2 * np.pi * v0) - 0.5 * nu * m0**2 / v0
            val += log_gaussian_integral(prec, lin)
            val += float(np.sum(_log_invgamma_pdf(v, a0, b0) + np.log(v)))
            return val

        terms.append(log_dm + log_potts + const + _log_quad(logf, len(used)))
    return float(logsumexp(terms))


def _batch_se(samples, n_batches=50):
    """Batch-means standard error of the mean along axis 0."""
    n = samples.shape[0] - samples.shape[0] % n_batches
    batches = samples[:n].reshape((n_batches, n // n_batches) + samples.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(n_batches)


def gibbs_reference(spec, data, seed, n_samples=10000, burn_in=2000, theta=None,
                    n_batches=50):
    """Gibbs sampler for the GAUSS, MSG and MGP models.

    ``spec`` supplies ``model``, ``kernel`` (with ``taps``), ``diff_order``,
    ``n_classes``, ``gamma`` and ``priors``.  ``theta = (theta_e, theta_f)``
    fixes the precisions of the GAUSS model.  Returns ``(image_mean,
    theta_mean, image_se)`` where ``theta_mean`` holds posterior means of the
    precisions (noise first) and ``image_se`` batch-means standard errors.
    """
    data = np.asarray(data, dtype=float)
    shape = data.shape
    g = data.ravel()
    n = g.size
    rng = np.random.Generator(np.random.Philox(seed))
    H = dense_convolution(spec.kernel.taps, shape)
    hth = H.T @ H
    htg = H.T @ g
    pri = spec.priors
    model = spec.model.upper()

    def draw_gaussian(prec, lin):
        chol = linalg.cholesky(prec, lower=True)
        mean = linalg.cho_solve((chol, True), lin)
        return mean + linalg.solve_triangular(chol.T, rng.standard_normal(n), lower=False)

    keep_f = np.empty((n_samples, n))
    keep_t = []
    if model == "GAUSS":
        D = dense_difference(spec.diff_order, shape)
        dtd = D.T @ D
        te, tf = (pri.alpha_e0 / pri.beta_e0, pri.alpha_f0 / pri.beta_f0) if theta is None else theta
        for it in range(burn_in + n_samples):
            f = draw_gaussian(te * hth + tf * dtd, te * htg)
            if theta is None:
                r = g - H @ f
                te = rng.gamma(pri.alpha_e0 + n / 2, 1 / (pri.beta_e0 + 0.5 * r @ r))
                tf = rng.gamma(pri.alpha_f0 + n / 2, 1 / (pri.beta_f0 + 0.5 * f @ dtd @ f))
            if it >= burn_in:
                keep_f[it - burn_in] = f
                keep_t.append((te, tf))
    elif model in ("MSG", "MGP"):
        k = int(spec.n_classes)
        gamma = float(spec.gamma) if model == "MGP" else 0.0
        alpha0 = pri.alpha0 if pri.alpha0 is not None else 1.0 / k
        nb = neighbor_sets(shape)
        m = np.quantile(g, (np.arange(k) + 0.5) / k)
        v = np.full(k, pri.b0 / pri.a0)
        pi = np.full(k, 1.0 / k)
        te = pri.alpha_e0 / pri.beta_e0
        z = np.argmin((g[:, None] - m[None, :]) ** 2, axis=1)
        for it in range(burn_in + n_samples):
            f = draw_gaussian(te * hth + np.diag(1 / v[z]), te * htg + m[z] / v[z])
            for r in range(n):
                logp = np.log(pi) - 0.5 * np.log(v) - 0.5 * (f[r] - m) ** 2 / v
                if gamma:
                    logp = logp + gamma * np.bincount(z[nb[r]], minlength=k)
                p = np.exp(logp - logsumexp(logp))
                z[r] = rng.choice(k, p=p)
            counts = np.bincount(z, minlength=k)
            for c in range(k):
                fc = f[z == c]
                prec = 1 / pri.v0 + counts[c] / v[c]
                m[c] = rng.normal((pri.m0 / pri.v0 + fc.sum() / v[c]) / prec, 1 / np.sqrt(prec))
                v[c] = 1 / rng.gamma(pri.a0 + counts[c] / 2,
                                     1 / (pri.b0 + 0.5 * np.sum((fc - m[c]) ** 2)))
            pi = rng.dirichlet(alpha0 + counts)
            r_vec = g - H @ f
            te = rng.gamma(pri.alpha_e0 + n / 2, 1 / (pri.beta_e0 + 0.5 * r_vec @ r_vec))
            if it >= burn_in:
                keep_f[it - burn_in] = f
                keep_t.append((te,))
    else:
        raise ValueError(f"no Gibbs reference for model {model}")
    theta_mean = np.mean(np.array(keep_t), axis=0)
    return (keep_f.mean(axis=0).reshape(shape), theta_mean,
            _batch_se(keep_f, n_batches).reshape(shape))

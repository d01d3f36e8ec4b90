"""Bivariate copula families used as building blocks of vine models.

Conventions
-----------
``cdf(u, v)`` is the copula ``C(u, v)``. ``h(u, v)`` is the conditional
distribution of the first argument given the second, ``dC(u, v)/dv``, and
``hinv(p, v)`` inverts it in ``u``. Negative dependence for the Archimedean
families is obtained by a 90 degree rotation.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

FAMILIES = ("independence", "gaussian", "clayton", "gumbel", "joe", "comonotone", "countermonotone")
SEARCH_FAMILIES = ("gaussian", "clayton", "gumbel", "joe")
ARCHIMEDEAN = ("clayton", "gumbel", "joe")
ROTATIONS = (0, 90, 180, 270)

_TINY = 1e-300


class CopulaError(ValueError):
    """Invalid copula parameters or unreachable Kendall tau."""


class NumericalError(RuntimeError):
    """An iterative solver failed to converge."""


def _arr(x):
    return np.asarray(x, dtype=float)


# --------------------------------------------------------------------------
# unrotated family kernels (all exchangeable)


def _gauss_cdf(u, v, rho):
    # bivariate normal CDF through Owen's T function
    x, y = special.ndtri(u), special.ndtri(v)
    with np.errstate(all="ignore"):
        s = math.sqrt(1.0 - rho * rho)
        xs = np.where(x == 0, 1e-300, x)
        ys = np.where(y == 0, 1e-300, y)
        ax = (ys / xs - rho) / s
        ay = (xs / ys - rho) / s
        tx = special.owens_t(xs, ax)
        ty = special.owens_t(ys, ay)
        beta = np.where((xs * ys < 0) | ((xs * ys == 0) & (xs + ys < 0)), 0.5, 0.0)
        out = 0.5 * (u + v) - tx - ty - beta
    out = np.where((u <= 0) | (v <= 0), 0.0, out)
    out = np.where(u >= 1, v, out)
    out = np.where(v >= 1, u, out)
    return np.clip(out, np.maximum(u + v - 1, 0.0), np.minimum(u, v))


def _gauss_pdf(u, v, rho):
    x, y = special.ndtri(u), special.ndtri(v)
    r2 = 1.0 - rho * rho
    q = (rho * rho * (x * x + y * y) - 2.0 * rho * x * y) / (2.0 * r2)
    return np.exp(-q) / math.sqrt(r2)


def _gauss_h(u, v, rho):
    with np.errstate(all="ignore"):
        return special.ndtr((special.ndtri(u) - rho * special.ndtri(v)) / math.sqrt(1.0 - rho * rho))


def _gauss_hinv(p, v, rho):
    return special.ndtr(special.ndtri(p) * math.sqrt(1.0 - rho * rho) + rho * special.ndtri(v))


def _clayton_logA(u, v, t):
    # log(u^-t + v^-t - 1), stable for tiny u, v
    with np.errstate(divide="ignore"):
        a, b = -t * np.log(u), -t * np.log(v)
    m = np.maximum(a, b)
    with np.errstate(all="ignore"):
        return m + np.log(np.exp(a - m) + np.exp(b - m) - np.exp(-m))


def _clayton_cdf(u, v, t):
    with np.errstate(all="ignore"):
        out = np.exp(-_clayton_logA(u, v, t) / t)
    return np.where((u <= 0) | (v <= 0), 0.0, out)


def _clayton_pdf(u, v, t):
    la = _clayton_logA(u, v, t)
    lg = math.log1p(t) - (t + 1) * (np.log(u) + np.log(v)) - (2.0 + 1.0 / t) * la
    return np.exp(lg)


def _clayton_h(u, v, t):
    with np.errstate(all="ignore"):
        lg = -(t + 1) * np.log(v) - (1.0 / t + 1) * _clayton_logA(u, v, t)
        out = np.exp(lg)
    out = np.where(u <= 0, 0.0, np.where(u >= 1, 1.0, out))
    return np.clip(out, 0.0, 1.0)


def _clayton_hinv(p, v, t):
    with np.errstate(all="ignore"):
        # u^-t = 1 + v^-t (p^(-t/(1+t)) - 1)
        lw = np.log(np.expm1(-t / (1.0 + t) * np.log(p))) - t * np.log(v)
        return np.exp(-np.logaddexp(0.0, lw) / t)


def _gumbel_parts(u, v, t):
    with np.errstate(divide="ignore"):
        x, y = -np.log(u), -np.log(v)
        lx, ly = np.log(x), np.log(y)
    la = np.logaddexp(t * lx, t * ly)
    return x, y, lx, ly, la


def _gumbel_cdf(u, v, t):
    with np.errstate(all="ignore"):
        *_, la = _gumbel_parts(u, v, t)
        out = np.exp(-np.exp(la / t))
    out = np.where((u <= 0) | (v <= 0), 0.0, out)
    out = np.where(u >= 1, v, out)
    return np.where(v >= 1, u, out)


def _gumbel_pdf(u, v, t):
    x, y, lx, ly, la = _gumbel_parts(u, v, t)
    w = np.exp(la / t)
    lg = -w + x + y + (t - 1) * (lx + ly) + (-2.0 + 1.0 / t) * la + np.log(w + t - 1)
    return np.exp(lg)


def _gumbel_h(u, v, t):
    with np.errstate(all="ignore"):
        x, y, lx, ly, la = _gumbel_parts(u, v, t)
        w = np.exp(la / t)
        out = np.exp(-w + y + (1.0 - t) * (np.log(w) - ly))
    out = np.where(u <= 0, 0.0, np.where(u >= 1, 1.0, out))
    return np.clip(np.nan_to_num(out, nan=0.0), 0.0, 1.0)


def _joe_parts(u, v, t):
    ub, vb = 1.0 - u, 1.0 - v
    a, b = ub ** t, vb ** t
    return ub, vb, a, b, a + b - a * b


def _joe_cdf(u, v, t):
    *_, s = _joe_parts(u, v, t)
    with np.errstate(all="ignore"):
        out = 1.0 - s ** (1.0 / t)
    out = np.where((u <= 0) | (v <= 0), 0.0, out)
    return np.clip(out, np.maximum(u + v - 1, 0.0), np.minimum(u, v))


def _joe_pdf(u, v, t):
    ub, vb, a, b, s = _joe_parts(u, v, t)
    return s ** (1.0 / t - 2.0) * ub ** (t - 1) * vb ** (t - 1) * (t - 1.0 + s)


def _joe_h(u, v, t):
    ub, vb, a, b, s = _joe_parts(u, v, t)
    with np.errstate(all="ignore"):
        out = s ** (1.0 / t - 1.0) * vb ** (t - 1.0) * (1.0 - a)
    out = np.where(u <= 0, 0.0, np.where(u >= 1, 1.0, out))
    return np.clip(np.nan_to_num(out, nan=1.0), 0.0, 1.0)


_KERNELS = {
    "gaussian": (_gauss_cdf, _gauss_pdf, _gauss_h, _gauss_hinv),
    "clayton": (_clayton_cdf, _clayton_pdf, _clayton_h, _clayton_hinv),
    "gumbel": (_gumbel_cdf, _gumbel_pdf, _gumbel_h, None),
    "joe": (_joe_cdf, _joe_pdf, _joe_h, None),
}


def _solve_hinv(h, pdf, p, v, tol=1e-10, max_iter=200):
    """Safeguarded Newton solve of ``h(u, v) = p`` for u in (0, 1)."""
    p, v = np.broadcast_arrays(_arr(p), _arr(v))
    p, v = p.ravel().copy(), v.ravel().copy()
    lo = np.zeros_like(p)
    hi = np.ones_like(p)
    x = p.copy()
    active = np.ones(p.shape, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa, va, pa = x[idx], v[idx], p[idx]
        with np.errstate(all="ignore"):
            f = h(xa, va) - pa
            dens = pdf(xa, va)
        below = f < 0
        lo[idx] = np.where(below, xa, lo[idx])
        hi[idx] = np.where(below, hi[idx], xa)
        with np.errstate(all="ignore"):
            newton = xa - f / dens
        ok = np.isfinite(newton) & (newton > lo[idx]) & (newton < hi[idx])
        nxt = np.where(ok, newton, 0.5 * (lo[idx] + hi[idx]))
        done = (np.abs(f) <= tol * 1e-2) | (hi[idx] - lo[idx] <= 1e-15) | (np.abs(nxt - xa) <= 1e-16)
        x[idx] = np.where(done, xa, nxt)
        active[idx[done]] = False
    if active.any():
        with np.errstate(all="ignore"):
            resid = np.abs(h(x, v) - p)
        bad = active & ~(resid <= tol)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise NumericalError(
                f"inverse h-function did not converge for {int(bad.sum())} points "
                f"after {max_iter} iterations; worst residual {float(np.nanmax(resid[bad])):.3e}, "
                f"e.g. p={p[k]!r}, v={v[k]!r}, bracket=[{lo[k]!r}, {hi[k]!r}]"
            )
    return x


# --------------------------------------------------------------------------
# Kendall tau transforms


def _joe_tau_integral(t):
    # tau = 1 + 4 * int_0^1 phi(s)/phi'(s) ds with phi(s) = -log(1 - (1-s)^t)
    def g(s):
        if s <= 0.0:
            return 0.0
        st = s ** t
        if st >= 1.0:
            return 0.0
        # log1p(-x)/x -> -1 as x -> 0; avoids 0/0 when s**t underflows
        ratio = math.log1p(-st) / st if st > 1e-12 else -1.0 - 0.5 * st
        return ratio * (1.0 - st) * s / t

    pts = [1.0 - 1.0 / t, 1.0 - 0.1 / t] if t > 10 else None
    val, _ = integrate.quad(g, 0.0, 1.0, epsabs=1e-12, epsrel=1e-12, limit=400, points=pts)
    return 1.0 + 4.0 * val


@functools.lru_cache(maxsize=4096)
def _joe_tau(t):
    if t == 1.0:
        return 0.0
    return _joe_tau_integral(t)


def _base_tau(family, theta):
    if family == "gaussian":
        return 2.0 / math.pi * math.asin(theta)
    if family == "clayton":
        return theta / (theta + 2.0)
    if family == "gumbel":
        return 1.0 - 1.0 / theta
    if family == "joe":
        return _joe_tau(float(theta))
    raise CopulaError(f"no parameter for family {family!r}")


@functools.lru_cache(maxsize=4096)
def _joe_theta(tau):
    hi = 2.0
    while _joe_tau(hi) < tau:
        hi *= 2.0
        if hi > 1e8:
            raise CopulaError(f"joe: tau {tau} too close to 1")
    return optimize.brentq(lambda t: _joe_tau(t) - tau, 1.0, hi, xtol=1e-13, rtol=1e-15, maxiter=500)


def _base_theta(family, tau):
    if family == "gaussian":
        return math.sin(math.pi * tau / 2.0)
    if family == "clayton":
        return 2.0 * tau / (1.0 - tau)
    if family == "gumbel":
        return 1.0 / (1.0 - tau)
    if family == "joe":
        return _joe_theta(float(tau))
    raise CopulaError(f"no parameter for family {family!r}")


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PairCopula:
    """A bivariate copula: family, rotation in degrees and parameter.

    Parameters
    ----------
    family : str
        One of ``FAMILIES``.
    theta : float, optional
        Family parameter; ignored for independence and the bound copulas.
    rotation : int
        0, 90, 180 or 270. Only meaningful for the Archimedean families.
    """

    family: str
    theta: float | None = None
    rotation: int = 0

    def __post_init__(self):
        f, t = self.family, self.theta
        if f not in FAMILIES:
            raise CopulaError(f"unknown copula family {f!r}; expected one of {FAMILIES}")
        if self.rotation not in ROTATIONS:
            raise CopulaError(f"rotation must be one of {ROTATIONS}")
        if f not in ARCHIMEDEAN and self.rotation != 0:
            raise CopulaError(f"{f} copula does not take a rotation")
        if f in ("independence", "comonotone", "countermonotone"):
            object.__setattr__(self, "theta", None)
            return
        if t is None:
            raise CopulaError(f"{f} copula needs a parameter")
        t = float(t)
        object.__setattr__(self, "theta", t)
        ok = {
            "gaussian": -1.0 < t < 1.0,
            "clayton": 0.0 < t < math.inf,
            "gumbel": 1.0 <= t < math.inf,
            "joe": 1.0 < t < math.inf,
        }[f]
        if not ok:
            raise CopulaError(f"parameter {t} outside the admissible set of the {f} copula")

    # ------------------------------------------------------------------
    @property
    def is_degenerate(self):
        return self.family in ("comonotone", "countermonotone")

    @property
    def is_independence(self):
        return self.family == "independence"

    @property
    def tau(self):
        """Kendall's tau of the copula."""
        f = self.family
        if f == "independence":
            return 0.0
        if f == "comonotone":
            return 1.0
        if f == "countermonotone":
            return -1.0
        base = _base_tau(f, self.theta)
        return -base if self.rotation in (90, 270) else base

    def transposed(self):
        """Copula of the swapped pair ``(V, U)``."""
        if self.rotation in (90, 270):
            return PairCopula(self.family, self.theta, 360 - self.rotation)
        return self

    def _k(self):
        cdf, pdf, h, hinv = _KERNELS[self.family]
        t = self.theta
        fh = functools.partial(h, t=t) if self.family != "gaussian" else functools.partial(h, rho=t)
        fp = functools.partial(pdf, t=t) if self.family != "gaussian" else functools.partial(pdf, rho=t)
        fc = functools.partial(cdf, t=t) if self.family != "gaussian" else functools.partial(cdf, rho=t)
        if hinv is not None:
            fi = functools.partial(hinv, t=t) if self.family != "gaussian" else functools.partial(hinv, rho=t)
        else:
            fi = functools.partial(_solve_hinv, fh, fp)
        return fc, fp, fh, fi

    # ------------------------------------------------------------------
    def cdf(self, u, v):
        """Copula distribution function ``C(u, v)``."""
        u, v = np.broadcast_arrays(_arr(u), _arr(v))
        f = self.family
        if f == "independence":
            out = u * v
        elif f == "comonotone":
            out = np.minimum(u, v)
        elif f == "countermonotone":
            out = np.maximum(u + v - 1.0, 0.0)
        else:
            c = self._k()[0]
            r = self.rotation
            if r == 0:
                out = c(u, v)
            elif r == 90:
                out = v - c(1.0 - u, v)
            elif r == 180:
                out = u + v - 1.0 + c(1.0 - u, 1.0 - v)
            else:
                out = u - c(u, 1.0 - v)
            out = np.clip(out, np.maximum(u + v - 1.0, 0.0), np.minimum(u, v))
        return out[()] if out.ndim == 0 else out

    def pdf(self, u, v):
        """Copula density on the open unit square."""
        u, v = np.broadcast_arrays(_arr(u), _arr(v))
        f = self.family
        if self.is_degenerate:
            raise CopulaError(f"the {f} copula has no density")
        if f == "independence":
            out = np.ones_like(u)
        else:
            p = self._k()[1]
            r = self.rotation
            a = 1.0 - u if r in (90, 180) else u
            b = 1.0 - v if r in (180, 270) else v
            out = p(a, b)
        return out[()] if out.ndim == 0 else out

    def h(self, u, v):
        """Conditional distribution of U given V = v, ``dC(u, v)/dv``."""
        u, v = np.broadcast_arrays(_arr(u), _arr(v))
        f = self.family
        if f == "independence":
            out = u.copy()
        elif f == "comonotone":
            out = (u >= v).astype(float)
        elif f == "countermonotone":
            out = (u >= 1.0 - v).astype(float)
        else:
            h = self._k()[2]
            r = self.rotation
            if r == 0:
                out = h(u, v)
            elif r == 90:
                out = 1.0 - h(1.0 - u, v)
            elif r == 180:
                out = 1.0 - h(1.0 - u, 1.0 - v)
            else:
                out = h(u, 1.0 - v)
        return out[()] if out.ndim == 0 else out

    def hinv(self, p, v):
        """Inverse of ``h`` in its first argument."""
        p, v = np.broadcast_arrays(_arr(p), _arr(v))
        f = self.family
        if f == "independence":
            out = p.copy()
        elif f == "comonotone":
            out = v.copy()
        elif f == "countermonotone":
            out = 1.0 - v
        else:
            hi = self._k()[3]
            r = self.rotation
            shape = p.shape
            if r == 0:
                out = hi(p, v)
            elif r == 90:
                out = 1.0 - hi(1.0 - p, v)
            elif r == 180:
                out = 1.0 - hi(1.0 - p, 1.0 - v)
            else:
                out = hi(p, 1.0 - v)
            out = np.reshape(out, shape)
        return out[()] if out.ndim == 0 else out

    def h_first(self, v, u):
        """Conditional distribution of V given U = u, ``dC(u, v)/du``."""
        return self.transposed().h(v, u)

    def hinv_first(self, p, u):
        """Inverse of ``h_first`` in ``v``."""
        return self.transposed().hinv(p, u)

    def sample(self, n, rng):
        """Draw ``n`` points by conditional inversion; returns an ``(n, 2)`` array."""
        w = rng.random((n, 2))
        u1 = w[:, 0]
        u2 = self.hinv_first(w[:, 1], u1)
        return np.column_stack([u1, u2])

    def to_dict(self):
        return {"family": self.family, "rotation": self.rotation, "theta": self.theta, "tau": self.tau}


def tau_to_theta(family, tau, rotation=None):
    """Copula of ``family`` with Kendall's tau equal to ``tau``.

    ``tau = 0`` gives independence and ``tau = +-1`` the bound copulas. For the
    Archimedean families a negative tau is realized by a 90 degree rotation
    unless ``rotation`` says otherwise.

    Examples
    --------
    >>> tau_to_theta("clayton", 0.5).theta
    2.0
    """
    tau = float(tau)
    if family not in FAMILIES:
        raise CopulaError(f"unknown copula family {family!r}")
    if not -1.0 <= tau <= 1.0:
        raise CopulaError(f"Kendall tau must lie in [-1, 1], got {tau}")
    if family == "independence":
        if tau != 0.0:
            raise CopulaError("independence copula only reaches tau = 0")
        return PairCopula("independence")
    if tau == 0.0:
        return PairCopula("independence")
    if tau == 1.0:
        return PairCopula("comonotone")
    if tau == -1.0:
        return PairCopula("countermonotone")
    if family in ("comonotone", "countermonotone"):
        raise CopulaError(f"{family} copula only reaches tau = {1 if family == 'comonotone' else -1}")
    if family == "gaussian":
        if rotation not in (None, 0):
            raise CopulaError("gaussian copula does not take a rotation")
        return PairCopula("gaussian", _base_theta("gaussian", tau))
    if rotation is None:
        rotation = 0 if tau > 0 else 90
    positive = rotation in (0, 180)
    if positive != (tau > 0):
        rng = "(0, 1)" if positive else "(-1, 0)"
        raise CopulaError(f"tau {tau} unreachable by {family} at rotation {rotation}; reachable range {rng}")
    return PairCopula(family, _base_theta(family, abs(tau)), rotation)


def theta_to_tau(copula):
    """Kendall's tau of a copula."""
    return copula.tau


def kendall_tau_numeric(copula, n=400):
    """Kendall's tau by quadrature of ``1 - 4 * E[dC/du * dC/dv]``.

    A check independent of the closed forms, based on Gauss-Legendre nodes on
    a transformed scale that clusters near the boundary.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    # map [-1,1] -> (0,1) with a sinh-like stretch toward the edges
    k = 3.0
    s = 0.5 * (1.0 + np.tanh(k * x) / math.tanh(k))
    ds = 0.5 * k / (math.tanh(k) * np.cosh(k * x) ** 2)
    u, v = np.meshgrid(s, s, indexing="ij")
    wu, wv = np.meshgrid(w * ds, w * ds, indexing="ij")
    hv = copula.h(u, v)          # dC/dv
    hu = copula.h_first(v, u)    # dC/du
    return float(1.0 - 4.0 * np.sum(hu * hv * wu * wv))

"""Univariate marginal distributions with vectorized cdf, quantile and density."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

FAMILIES = ("uniform", "normal", "generalized-pareto", "gumbel-max", "triangular")

_PARAM_NAMES = {
    "uniform": ("lower", "upper"),
    "normal": ("mean", "std"),
    "generalized-pareto": ("scale", "shape"),
    "gumbel-max": ("location", "scale"),
    "triangular": ("lower", "mode", "upper"),
}
_OPTIONAL = {"generalized-pareto": {"location": 0.0}}


class MarginError(ValueError):
    """Raised for invalid margin parameters or out-of-domain probabilities."""


@dataclass(frozen=True)
class Margin:
    """A univariate distribution, optionally truncated to ``[lo, hi]``.

    Parameters
    ----------
    family : str
        One of ``uniform``, ``normal``, ``generalized-pareto``, ``gumbel-max``
        or ``triangular``.
    params : dict
        Family parameters. See ``param_names``.
    truncate : tuple of float, optional
        Truncation bounds. ``None`` or infinite entries leave a side open.

    Examples
    --------
    >>> Margin("generalized-pareto", {"scale": 1.0, "shape": 1.0}).cdf(1.0)
    0.5
    """

    family: str
    params: dict = field(default_factory=dict)
    truncate: tuple | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise MarginError(f"unknown margin family {self.family!r}; expected one of {FAMILIES}")
        names = _PARAM_NAMES[self.family]
        extra = set(self.params) - set(names) - set(_OPTIONAL.get(self.family, {}))
        if extra:
            raise MarginError(f"{self.family}: unknown parameters {sorted(extra)}")
        missing = [k for k in names if k not in self.params]
        if missing:
            raise MarginError(f"{self.family}: missing parameters {missing}")
        p = {**_OPTIONAL.get(self.family, {}), **{k: float(v) for k, v in self.params.items()}}
        object.__setattr__(self, "params", p)
        self._check(p)
        if self.truncate is not None:
            lo, hi = self.truncate
            lo = -math.inf if lo is None else float(lo)
            hi = math.inf if hi is None else float(hi)
            if not lo < hi:
                raise MarginError(f"truncation bounds must satisfy lo < hi, got [{lo}, {hi}]")
            flo, fhi = float(self._cdf(np.array(lo))), float(self._cdf(np.array(hi)))
            if not fhi > flo:
                raise MarginError(f"truncation [{lo}, {hi}] carries no probability mass")
            object.__setattr__(self, "truncate", (lo, hi))
            object.__setattr__(self, "_mass", (flo, fhi))

    def _check(self, p):
        f = self.family
        if f in ("uniform",) and not p["lower"] < p["upper"]:
            raise MarginError("uniform requires lower < upper")
        if f == "normal" and not p["std"] > 0:
            raise MarginError("normal requires std > 0")
        if f in ("generalized-pareto", "gumbel-max") and not p["scale"] > 0:
            raise MarginError(f"{f} requires scale > 0")
        if f == "triangular" and not (p["lower"] <= p["mode"] <= p["upper"] and p["lower"] < p["upper"]):
            raise MarginError("triangular requires lower <= mode <= upper and lower < upper")

    # untruncated primitives -------------------------------------------------
    def _cdf(self, x):
        p, f = self.params, self.family
        with np.errstate(all="ignore"):
            if f == "uniform":
                return np.clip((x - p["lower"]) / (p["upper"] - p["lower"]), 0.0, 1.0)
            if f == "normal":
                return special.ndtr((x - p["mean"]) / p["std"])
            if f == "generalized-pareto":
                z = np.maximum((x - p["location"]) / p["scale"], 0.0)
                xi = p["shape"]
                if abs(xi) < 1e-12:
                    out = -np.expm1(-z)
                else:
                    t = 1.0 + xi * z
                    out = np.where(t > 0, -np.expm1(-np.log1p(xi * z) / xi), 1.0)
                return np.where(np.isnan(x), np.nan, out)
            if f == "gumbel-max":
                return np.exp(-np.exp(-(x - p["location"]) / p["scale"]))
            a, c, b = p["lower"], p["mode"], p["upper"]
            left = np.where(c > a, (x - a) ** 2 / ((b - a) * (c - a) if c > a else 1.0), 0.0)
            right = np.where(b > c, 1.0 - (b - x) ** 2 / ((b - a) * (b - c) if b > c else 1.0), 1.0)
            out = np.where(x <= c, left, right)
            return np.where(x <= a, 0.0, np.where(x >= b, 1.0, out))

    def _ppf(self, u):
        p, f = self.params, self.family
        with np.errstate(all="ignore"):
            if f == "uniform":
                return p["lower"] + u * (p["upper"] - p["lower"])
            if f == "normal":
                return p["mean"] + p["std"] * special.ndtri(u)
            if f == "generalized-pareto":
                xi, s = p["shape"], p["scale"]
                if abs(xi) < 1e-12:
                    z = -np.log1p(-u)
                else:
                    z = np.expm1(-xi * np.log1p(-u)) / xi
                return p["location"] + s * z
            if f == "gumbel-max":
                return p["location"] - p["scale"] * np.log(-np.log(u))
            a, c, b = p["lower"], p["mode"], p["upper"]
            fc = (c - a) / (b - a)
            left = a + np.sqrt(u * (b - a) * (c - a))
            right = b - np.sqrt((1.0 - u) * (b - a) * (b - c))
            return np.where(u <= fc, left, right)

    def _pdf(self, x):
        p, f = self.params, self.family
        with np.errstate(all="ignore"):
            if f == "uniform":
                inside = (x >= p["lower"]) & (x <= p["upper"])
                return np.where(inside, 1.0 / (p["upper"] - p["lower"]), 0.0)
            if f == "normal":
                z = (x - p["mean"]) / p["std"]
                return np.exp(-0.5 * z * z) / (p["std"] * math.sqrt(2 * math.pi))
            if f == "generalized-pareto":
                xi, s = p["shape"], p["scale"]
                z = (x - p["location"]) / s
                t = 1.0 + xi * z
                if abs(xi) < 1e-12:
                    dens = np.exp(-z) / s
                else:
                    dens = np.exp(-(1.0 / xi + 1.0) * np.log1p(xi * z)) / s
                return np.where((z >= 0) & (t > 0), dens, 0.0)
            if f == "gumbel-max":
                z = (x - p["location"]) / p["scale"]
                return np.exp(-z - np.exp(-z)) / p["scale"]
            a, c, b = p["lower"], p["mode"], p["upper"]
            up = 2 * (x - a) / ((b - a) * (c - a)) if c > a else np.zeros_like(x)
            down = 2 * (b - x) / ((b - a) * (b - c)) if b > c else np.zeros_like(x)
            out = np.where(x < c, up, np.where(x > c, down, 2.0 / (b - a)))
            return np.where((x < a) | (x > b), 0.0, out)

    # public API -------------------------------------------------------------
    def cdf(self, x):
        """Distribution function; 0 below the support and 1 above it."""
        x = np.asarray(x, dtype=float)
        out = self._cdf(x)
        if self.truncate is not None:
            lo, hi = self.truncate
            flo, fhi = self._mass
            out = np.clip((out - flo) / (fhi - flo), 0.0, 1.0)
            out = np.where(x < lo, 0.0, np.where(x >= hi, 1.0, out))
        return out[()] if out.ndim == 0 else out

    def quantile(self, u):
        """Generalized inverse ``inf{x : F(x) >= u}`` for ``u`` in (0, 1)."""
        u = np.asarray(u, dtype=float)
        if np.any(~((u > 0) & (u < 1))):
            raise MarginError("quantile requires probabilities strictly inside (0, 1)")
        if self.truncate is not None:
            lo, hi = self.truncate
            flo, fhi = self._mass
            out = np.clip(self._ppf(flo + u * (fhi - flo)), lo, hi)
        else:
            out = self._ppf(u)
        return out[()] if out.ndim == 0 else out

    def density(self, x):
        """Probability density; 0 off the support."""
        x = np.asarray(x, dtype=float)
        out = self._pdf(x)
        if self.truncate is not None:
            lo, hi = self.truncate
            flo, fhi = self._mass
            out = np.where((x < lo) | (x > hi), 0.0, out / (fhi - flo))
        return out[()] if out.ndim == 0 else out

    @property
    def support(self):
        """Closed support interval, possibly infinite."""
        p, f = self.params, self.family
        if f in ("uniform", "triangular"):
            lo, hi = p["lower"], p["upper"]
        elif f == "generalized-pareto":
            lo = p["location"]
            hi = lo - p["scale"] / p["shape"] if p["shape"] < 0 else math.inf
        else:
            lo, hi = -math.inf, math.inf
        if self.truncate is not None:
            lo, hi = max(lo, self.truncate[0]), min(hi, self.truncate[1])
        return lo, hi

    def to_dict(self):
        d = {"family": self.family, "params": dict(self.params)}
        if self.family == "generalized-pareto" and d["params"].get("location") == 0.0:
            d["params"].pop("location")
        if self.truncate is not None:
            d["truncate"] = [None if math.isinf(v) else v for v in self.truncate]
        return d

    @classmethod
    def from_dict(cls, spec):
        return cls(spec["family"], dict(spec.get("params", {})), spec.get("truncate"))


def param_names(family):
    """Required parameter names for a family."""
    return _PARAM_NAMES[family]


def flood_default_margins():
    """Default input distributions for the flood model.

    These are a commonly used benchmark parameterization, supplied so the
    flood example runs out of the box. Keys follow the flood model inputs.
    """
    return {
        "Q": Margin("gumbel-max", {"location": 1013.0, "scale": 558.0}, (500.0, 3000.0)),
        "Ks": Margin("normal", {"mean": 30.0, "std": 7.5}, (15.0, None)),
        "Zv": Margin("triangular", {"lower": 49.0, "mode": 50.0, "upper": 51.0}),
        "Zm": Margin("triangular", {"lower": 54.0, "mode": 55.0, "upper": 56.0}),
        "Hd": Margin("uniform", {"lower": 7.0, "upper": 9.0}),
        "Cb": Margin("triangular", {"lower": 55.0, "mode": 55.5, "upper": 56.0}),
        "B": Margin("triangular", {"lower": 295.0, "mode": 300.0, "upper": 305.0}),
        "L": Margin("triangular", {"lower": 4990.0, "mode": 5000.0, "upper": 5010.0}),
    }

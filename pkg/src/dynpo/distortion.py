"""Piecewise-linear distortion functions and Choquet integration against
discrete laws."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParameterError
from .scenario import EmpiricalDist, SamplePathSet, quantile

_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class DistortionFn:
    """Piecewise-linear k on [0, 1] with k(0) = 0 and k(1) = 1.

    Stored as sorted breakpoints ``u`` and values ``k``; evaluation is linear
    interpolation between them.
    """

    u: np.ndarray
    k: np.ndarray
    name: str | None = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        k = np.asarray(self.k, dtype=float)
        if u.ndim != 1 or u.shape != k.shape or u.size < 2:
            raise ParameterError("breakpoints must be matching 1-d sequences")
        order = np.argsort(u, kind="stable")
        u, k = u[order], k[order]
        keep = np.concatenate([[True], np.diff(u) > 0])
        if not np.allclose(k[1:][~keep[1:]], k[:-1][~keep[1:]], atol=_EPS):
            raise ParameterError("duplicate breakpoint with conflicting values")
        u, k = u[keep], k[keep]
        if u[0] != 0.0 or u[-1] != 1.0:
            raise ParameterError("breakpoints must span [0, 1]")
        if abs(k[0]) > _EPS or abs(k[-1] - 1.0) > _EPS:
            raise ParameterError("distortion must satisfy k(0)=0 and k(1)=1")
        if (np.diff(k) < -_EPS).any():
            raise ParameterError("distortion must be nondecreasing")
        k[0], k[-1] = 0.0, 1.0
        # drop interior points lying on the chord of their neighbours
        if u.size > 2:
            s_left = (k[1:-1] - k[:-2]) / (u[1:-1] - u[:-2])
            s_right = (k[2:] - k[1:-1]) / (u[2:] - u[1:-1])
            keep = np.concatenate([[True], np.abs(s_left - s_right) > 1e-14, [True]])
            u, k = u[keep], k[keep]
        u.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "k", k)

    def __call__(self, p):
        out = np.interp(p, self.u, self.k)
        return float(out) if np.ndim(out) == 0 else out

    def __eq__(self, other):
        if not isinstance(other, DistortionFn):
            return NotImplemented
        return np.array_equal(self.u, other.u) and np.array_equal(self.k, other.k)

    def __hash__(self):
        return hash((self.u.tobytes(), self.k.tobytes()))

    def __repr__(self):
        label = f"{self.name}, " if self.name else ""
        pts = ", ".join(f"({a:.6g}, {b:.6g})" for a, b in zip(self.u, self.k))
        return f"DistortionFn({label}[{pts}])"

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.k) / np.diff(self.u)

    @property
    def is_concave(self) -> bool:
        return bool((np.diff(self.slopes) <= _EPS * max(1.0, self.slopes.max())).all())

    @property
    def is_identity(self) -> bool:
        return self.u.size == 2

    def weight_function(self, p):
        """Left derivative of u -> 1 - k(1 - u), i.e. the quantile weight."""
        q = 1.0 - np.asarray(p, dtype=float)
        idx = np.clip(np.searchsorted(self.u, q, side="right") - 1, 0, self.u.size - 2)
        return self.slopes[idx]

    def to_json(self):
        if self.is_identity:
            return "expectation"
        return {"breakpoints": [[float(a), float(b)] for a, b in zip(self.u, self.k)]}

    @classmethod
    def from_json(cls, obj) -> "DistortionFn":
        if obj == "expectation" or obj == "identity":
            return identity()
        if isinstance(obj, dict):
            if "es" in obj:
                return es_distortion(float(obj["es"]))
            if "breakpoints" in obj:
                pts = np.asarray(obj["breakpoints"], dtype=float)
                if pts.ndim != 2 or pts.shape[1] != 2:
                    raise ConfigError("breakpoints must be a list of [u, k] pairs")
                return cls(pts[:, 0], pts[:, 1])
            if "mix" in obj:
                return mix([(float(w), cls.from_json(d)) for w, d in obj["mix"]])
        raise ConfigError(f"unrecognised distortion {obj!r}")


def identity() -> DistortionFn:
    return DistortionFn([0.0, 1.0], [0.0, 1.0], name="expectation")


def es_distortion(alpha: float) -> DistortionFn:
    """k(u) = min(u / (1 - alpha), 1), the Expected Shortfall distortion."""
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"ES level must lie in [0, 1), got {alpha}")
    if alpha == 0.0:
        return identity()
    return DistortionFn([0.0, 1.0 - alpha, 1.0], [0.0, 1.0, 1.0], name=f"ES_{alpha:g}")


def mix(parts: Sequence[tuple[float, DistortionFn]]) -> DistortionFn:
    """Pointwise convex combination sum_j w_j k_j."""
    if not parts:
        raise ParameterError("empty mixture")
    weights = np.array([w for w, _ in parts], dtype=float)
    if (weights < 0).any() or abs(weights.sum() - 1.0) > _EPS:
        raise ParameterError("mixture weights must be nonnegative and sum to 1")
    if len(parts) == 1:
        return parts[0][1]
    grid = np.unique(np.concatenate([k.u for _, k in parts]))
    vals = np.zeros_like(grid)
    for w, k in parts:
        if w:
            vals = vals + w * k(grid)
    return DistortionFn(grid, vals)


def intersect(k1: DistortionFn, k2: DistortionFn, tol: float = 1e-14) -> list[float]:
    """Points in (0, 1) where k1 - k2 changes sign.

    Between merged breakpoints both functions are linear, so roots are exact
    segment intersections. A run of zeros between opposite signs reports its
    left end.
    """
    grid = np.unique(np.concatenate([k1.u, k2.u]))
    d = k1(grid) - k2(grid)
    d[np.abs(d) <= tol] = 0.0
    out = []
    last_sign, zero_start = 0.0, None
    for j in range(grid.size):
        sign = np.sign(d[j])
        if sign == 0:
            if zero_start is None:
                zero_start = grid[j]
            continue
        if last_sign and sign != last_sign:
            if zero_start is not None:
                out.append(float(zero_start))
            else:
                a, b = grid[j - 1], grid[j]
                out.append(float(a + (b - a) * d[j - 1] / (d[j - 1] - d[j])))
        last_sign, zero_start = sign, None
    return [x for x in out if 0.0 < x < 1.0]


def choquet(k: DistortionFn, dist: EmpiricalDist) -> float:
    """Choquet integral of a discrete law: x_0 + sum_j (x_j - x_{j-1}) k(P(X >= x_j))."""
    xs, ps = dist.atoms()
    if xs.size == 0:
        raise ParameterError("Choquet integral of an empty distribution")
    tail = np.cumsum(ps[::-1])[::-1]
    tail[0] = 1.0
    return float(xs[0] + np.dot(np.diff(xs), k(np.clip(tail[1:], 0.0, 1.0))))


def choquet_rows(k: DistortionFn, values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Row-wise Choquet integral of a K x N matrix, each row a law on N
    weighted atoms. Tied atoms need no grouping: their layer width is 0."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    order = np.argsort(values, axis=1, kind="stable")
    xs = np.take_along_axis(values, order, axis=1)
    ws = weights[order]
    tail = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1]
    layers = np.diff(xs, axis=1)
    return xs[:, 0] + np.einsum("ij,ij->i", layers, k(np.clip(tail[:, 1:], 0.0, 1.0)))


@dataclass(frozen=True)
class Regime:
    """One branch of a threshold rule: applies when the observable is
    <= ``leq`` (absolute) or <= its ``leq_quantile`` empirical quantile.
    A regime with neither bound is the catch-all ``else`` branch."""

    distortion: DistortionFn
    obs: str | None = None
    leq: float | None = None
    leq_quantile: float | None = None

    @property
    def is_else(self) -> bool:
        return self.leq is None and self.leq_quantile is None

    def to_json(self):
        d = {}
        if self.is_else:
            d["else"] = True
        else:
            d["obs"] = self.obs
            if self.leq is not None:
                d["leq"] = self.leq
            else:
                d["leq_quantile"] = self.leq_quantile
        d["distortion"] = self.distortion.to_json()
        return d

    @classmethod
    def from_json(cls, d) -> "Regime":
        dist = DistortionFn.from_json(d.get("distortion", "expectation"))
        if d.get("else"):
            return cls(dist)
        if "leq" in d:
            return cls(dist, obs=d.get("obs"), leq=float(d["leq"]))
        if "leq_quantile" in d:
            q = float(d["leq_quantile"])
            if not 0.0 <= q <= 1.0:
                raise ConfigError(f"leq_quantile {q} outside [0, 1]")
            return cls(dist, obs=d.get("obs"), leq_quantile=q)
        raise ConfigError(f"regime needs 'else', 'leq' or 'leq_quantile': {d!r}")


def observable_period(name: str | None) -> int:
    """'S2' -> 2. The observable is the path set's column for that period."""
    if not name or not name[1:].isdigit() or name[0] not in "SO":
        raise ConfigError(f"bad observable name {name!r}; expected e.g. 'S1'")
    return int(name[1:])


@dataclass(frozen=True)
class RegimeDistortion:
    """Ordered threshold rules; the first matching regime selects the distortion."""

    regimes: tuple[Regime, ...]

    def __post_init__(self):
        regs = tuple(self.regimes)
        if not regs:
            raise ConfigError("at least one regime required")
        for r in regs[:-1]:
            if r.is_else:
                raise ConfigError("'else' regime must come last")
        object.__setattr__(self, "regimes", regs)

    @classmethod
    def constant(cls, k: DistortionFn) -> "RegimeDistortion":
        return cls((Regime(k),))

    @property
    def distortions(self) -> list[DistortionFn]:
        return [r.distortion for r in self.regimes]

    def thresholds(self, pathset: SamplePathSet) -> list[float | None]:
        out = []
        for r in self.regimes:
            if r.is_else:
                out.append(None)
            elif r.leq is not None:
                out.append(r.leq)
            else:
                col = pathset.observables[:, observable_period(r.obs) - 1]
                out.append(quantile(pathset.law(col), r.leq_quantile))
        return out

    def select(self, pathset: SamplePathSet) -> np.ndarray:
        """Regime index per path; raises if some path matches no regime."""
        chosen = np.full(pathset.n_paths, -1)
        for j, (r, thr) in enumerate(zip(self.regimes, self.thresholds(pathset))):
            free = chosen < 0
            if thr is None:
                chosen[free] = j
                break
            col = pathset.observables[:, observable_period(r.obs) - 1]
            chosen[free & (col <= thr)] = j
        if (chosen < 0).any():
            p = int(np.flatnonzero(chosen < 0)[0])
            raise ConfigError(f"no regime covers the observable on path {p}")
        return chosen

    def regime_probabilities(self, pathset: SamplePathSet) -> np.ndarray:
        chosen = self.select(pathset)
        return np.array([pathset.mass(chosen == j) for j in range(len(self.regimes))])

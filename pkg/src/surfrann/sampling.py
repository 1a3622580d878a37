"""Collocation point generators and the role-tagged ``CollocationSet`` container."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .features import make_rng

ROLES = ("interior", "initial", "boundary", "interface")
# sub-stream ids; test points never share a stream with training draws
TRAIN_STREAM = 0x7A1
TEST_STREAM = 0x7E57
LATTICE_STREAM = 0x1A7000
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def _role_code(role: str) -> int:
    try:
        return ROLES.index(role)
    except ValueError:
        raise ValueError(f"unknown role {role!r}; expected one of {ROLES}") from None


@dataclass
class CollocationSet:
    role: np.ndarray     # (N,) int8 index into ROLES
    t: np.ndarray        # (N,) time, NaN when the problem is stationary
    chart: np.ndarray    # (N,) chart id, -1 for embedded points
    xi: np.ndarray       # (N, 2) chart parameters, NaN for embedded points
    X: np.ndarray        # (N, 3) embedded coordinates, NaN when only xi is known
    weight: np.ndarray   # (N,)

    def __post_init__(self):
        n = self.role.shape[0]
        for name in ("t", "chart", "xi", "X", "weight"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"column {name} has wrong length")
        if np.any(self.weight <= 0):
            raise ValueError("weights must be positive")
        init = self.role == ROLES.index("initial")
        if np.any(init) and not np.all(self.t[init] == 0.0):
            raise ValueError("initial records must carry t = 0")

    def __len__(self):
        return int(self.role.shape[0])

    @classmethod
    def build(cls, role="interior", t=None, chart=None, xi=None, X=None, weight=None):
        n = next(np.atleast_1d(a).shape[0] for a in (xi, X, t) if a is not None)
        code = np.full(n, _role_code(role), dtype=np.int8) if isinstance(role, str) else np.asarray(role, np.int8)
        return cls(
            role=code,
            t=np.full(n, np.nan) if t is None else np.broadcast_to(np.asarray(t, float), (n,)).copy(),
            chart=np.full(n, -1, dtype=np.int64) if chart is None
            else np.broadcast_to(np.asarray(chart, np.int64), (n,)).copy(),
            xi=np.full((n, 2), np.nan) if xi is None else np.asarray(xi, float).reshape(n, 2),
            X=np.full((n, 3), np.nan) if X is None else np.asarray(X, float).reshape(n, 3),
            weight=np.ones(n) if weight is None else np.broadcast_to(np.asarray(weight, float), (n,)).copy(),
        )

    def select(self, idx) -> "CollocationSet":
        return CollocationSet(self.role[idx], self.t[idx], self.chart[idx], self.xi[idx],
                              self.X[idx], self.weight[idx])

    def of_role(self, role: str) -> "CollocationSet":
        return self.select(self.role == _role_code(role))

    @staticmethod
    def concat(sets) -> "CollocationSet":
        sets = list(sets)
        return CollocationSet(*(np.concatenate([getattr(s, f) for s in sets])
                                for f in ("role", "t", "chart", "xi", "X", "weight")))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["role", "t", "chart", "xi1", "xi2", "x", "y", "z", "weight"])
            for k in range(len(self)):
                w.writerow([ROLES[self.role[k]], repr(float(self.t[k])), int(self.chart[k]),
                            *(repr(float(v)) for v in self.xi[k]),
                            *(repr(float(v)) for v in self.X[k]), repr(float(self.weight[k]))])

    @classmethod
    def from_csv(cls, path) -> "CollocationSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        role = np.array([_role_code(r[0]) for r in rows], dtype=np.int8)
        num = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float).reshape(len(rows), 8)
        return cls(role, num[:, 0], num[:, 1].astype(np.int64), num[:, 2:4], num[:, 4:7], num[:, 7])


def grid_on_chart(chart, n) -> np.ndarray:
    """Tensor grid in the chart rectangle; periodic axes drop the duplicate seam end."""
    n = np.broadcast_to(np.asarray(n, dtype=int), (2,))
    if np.any(n < 2):
        raise ValueError("need at least 2 points per axis")
    axes = [np.linspace(*chart.domain[k], n[k], endpoint=not chart.periodic[k]) for k in range(2)]
    A, B = np.meshgrid(*axes, indexing="ij")
    return np.stack([A.ravel(), B.ravel()], axis=1)


def random_on_chart(chart, n: int, seed: int, stream: int = TEST_STREAM) -> np.ndarray:
    rng = make_rng(seed, stream)
    return chart.domain[:, 0] + chart.extent * rng.random((n, 2))


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def fibonacci_sphere(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("N must be >= 1")
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(1.0 - z * z)
    ph = i * GOLDEN_ANGLE
    return np.stack([r * np.cos(ph), r * np.sin(ph), z], axis=1)


def fibonacci_surface(n: int, axes=(1.0, 1.0, 1.0), seed: Optional[int] = None,
                      surface=None, index: int = 0) -> np.ndarray:
    """Fibonacci lattice on a sphere, optionally rotated (``seed``, ``index``) and axis-scaled.

    Scaling leaves points exactly on the ellipsoid; ``surface`` (a level set)
    triggers a projection pass as a safeguard.
    """
    P = fibonacci_sphere(n)
    if seed is not None:
        P = P @ random_rotation(make_rng(seed, LATTICE_STREAM + index)).T
    P = P * np.asarray(axes, dtype=float)
    if surface is not None:
        from .geometry_levelset import project_to_surface
        P = project_to_surface(surface, P).points
    return P


def random_sphere_points(n: int, seed: int, axes=(1.0, 1.0, 1.0), stream: int = TEST_STREAM) -> np.ndarray:
    g = make_rng(seed, stream).standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1, keepdims=True) * np.asarray(axes, dtype=float)


def time_grid(T: float, intervals: int, t0: float = 0.0) -> np.ndarray:
    """Uniform grid including both endpoints."""
    return np.linspace(t0, T, intervals + 1)


def spacetime_product(times, spatial: CollocationSet, role: str = "interior") -> CollocationSet:
    times = np.asarray(times, dtype=float)
    nt, nx = times.shape[0], len(spatial)
    idx = np.tile(np.arange(nx), nt)
    s = spatial.select(idx)
    s.t = np.repeat(times, nx)
    s.role = np.full(nt * nx, _role_code(role), dtype=np.int8)
    return s


def random_subset(cset: CollocationSet, count: int, seed: int, role: Optional[str] = None,
                  stream: int = TRAIN_STREAM) -> CollocationSet:
    """Draw ``count`` records without replacement (within ``role`` if given)."""
    pool = np.arange(len(cset)) if role is None else np.flatnonzero(cset.role == _role_code(role))
    if count > pool.size:
        raise ValueError(f"subset of {count} requested from {pool.size} records")
    pick = make_rng(seed, stream).choice(pool.size, size=count, replace=False)
    return cset.select(pool[np.sort(pick)])

"""Implicit surfaces ``{phi = 0}``: frames, embedded surface operators, projection, sampling."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)


class CriticalPointError(ValueError):
    """The level-set gradient (nearly) vanishes at a query point."""


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LevelSetSurface:
    name: str
    phi: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Optional[Callable[[np.ndarray], np.ndarray]]
    bbox: np.ndarray                 # (3, 2)
    eps_grad: float = 1e-8
    params: dict = field(default_factory=dict)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bbox[:, 1] - self.bbox[:, 0]))


@dataclass
class SurfaceFrame:
    normal: np.ndarray      # (N, 3)
    P: np.ndarray           # (N, 3, 3)
    H: np.ndarray           # (N,)  mean curvature, H = div(n) / 2
    grad_norm: np.ndarray   # (N,)
    fd_curvature: bool = False


def _fd_hess(grad, X, h):
    X = np.atleast_2d(X)
    out = np.empty((X.shape[0], 3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        out[:, :, k] = (grad(X + e) - grad(X - e)) / (2 * h)
    return 0.5 * (out + out.transpose(0, 2, 1))


def surface_hessian(surface: LevelSetSurface, X):
    if surface.hess is not None:
        return surface.hess(X), False
    return _fd_hess(surface.grad, X, 1e-5 * surface.diameter), True


def frame_at(surface: LevelSetSurface, X) -> SurfaceFrame:
    """Unit normal, tangential projector and mean curvature at ``X``.

    ``H = (lap(phi) - n^T hess(phi) n) / (2 |grad phi|)``, i.e. half the
    divergence of the normalised gradient; outward normals on a sphere give
    ``H > 0``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    g = surface.grad(X)
    gn = np.linalg.norm(g, axis=1)
    bad = np.flatnonzero(gn < surface.eps_grad)
    if bad.size:
        raise CriticalPointError(
            f"{surface.name}: |grad phi| < {surface.eps_grad:g} at point {X[bad[0]].tolist()}")
    phi = surface.phi(X)
    off = np.abs(phi) > 1e-6 * max(1.0, surface.diameter)
    if np.any(off):
        log.warning("%s: %d query points have |phi| > 1e-6 scale", surface.name, int(off.sum()))
    n = g / gn[:, None]
    Hphi, fd = surface_hessian(surface, X)
    lap = np.trace(Hphi, axis1=1, axis2=2)
    nHn = np.einsum("ni,nij,nj->n", n, Hphi, n)
    H = 0.5 * (lap - nHn) / gn
    P = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
    return SurfaceFrame(normal=n, P=P, H=H, grad_norm=gn, fd_curvature=fd)


def surface_gradient(frame: SurfaceFrame, grad) -> np.ndarray:
    return np.einsum("nij,nj->ni", frame.P, grad)


def surface_laplacian(frame, grad, hess) -> np.ndarray:
    """``lap u - 2 H dn(u) - n^T hess(u) n`` for an ambient extension ``u``.

    Works for any frame-like object carrying ``normal`` and ``H``.
    """
    n = frame.normal
    lap = np.trace(hess, axis1=1, axis2=2)
    return lap - 2.0 * frame.H * np.einsum("ni,ni->n", grad, n) - np.einsum("ni,nij,nj->n", n, hess, n)


# ---------------------------------------------------------------- built-ins

def sphere(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> LevelSetSurface:
    c = np.asarray(center, dtype=float)

    def phi(X):
        Y = np.atleast_2d(X) - c
        return np.einsum("ni,ni->n", Y, Y) - radius ** 2

    def grad(X):
        return 2.0 * (np.atleast_2d(X) - c)

    def hess(X):
        return np.broadcast_to(2.0 * np.eye(3), (np.atleast_2d(X).shape[0], 3, 3)).copy()

    box = np.stack([c - 1.2 * radius, c + 1.2 * radius], axis=1)
    return LevelSetSurface("sphere", phi, grad, hess, box, params={"radius": radius})


def plane(normal=(0.0, 0.0, 1.0), offset: float = 0.0, half_width: float = 1.0) -> LevelSetSurface:
    a = np.asarray(normal, dtype=float)
    a = a / np.linalg.norm(a)

    def phi(X):
        return np.atleast_2d(X) @ a - offset

    def grad(X):
        return np.broadcast_to(a, (np.atleast_2d(X).shape[0], 3)).copy()

    def hess(X):
        return np.zeros((np.atleast_2d(X).shape[0], 3, 3))

    box = np.array([[-half_width, half_width]] * 3)
    return LevelSetSurface("plane", phi, grad, hess, box)


def ellipsoid(a: float, b: float, c: float, center=(0.0, 0.0, 0.0)) -> LevelSetSurface:
    s = 1.0 / np.array([a, b, c]) ** 2
    c0 = np.asarray(center, dtype=float)

    def phi(X):
        Y = np.atleast_2d(X) - c0
        return (Y * Y) @ s - 1.0

    def grad(X):
        return 2.0 * (np.atleast_2d(X) - c0) * s

    def hess(X):
        return np.broadcast_to(np.diag(2.0 * s), (np.atleast_2d(X).shape[0], 3, 3)).copy()

    ext = 1.2 * np.array([a, b, c])
    return LevelSetSurface("ellipsoid", phi, grad, hess, np.stack([c0 - ext, c0 + ext], axis=1),
                           params={"axes": (a, b, c)})


def torus(R: float = 1.0, r: float = 0.25) -> LevelSetSurface:
    """``(sqrt(x^2+y^2) - R)^2 + z^2 - r^2``; outward gradient."""

    def phi(X):
        X = np.atleast_2d(X)
        rho = np.hypot(X[:, 0], X[:, 1])
        return (rho - R) ** 2 + X[:, 2] ** 2 - r * r

    def grad(X):
        X = np.atleast_2d(X)
        rho = np.hypot(X[:, 0], X[:, 1])
        k = 2.0 * (rho - R) / rho
        return np.stack([k * X[:, 0], k * X[:, 1], 2.0 * X[:, 2]], axis=1)

    def hess(X):
        X = np.atleast_2d(X)
        x, y = X[:, 0], X[:, 1]
        rho = np.hypot(x, y)
        k = 2.0 * (rho - R) / rho
        # d/dx [k x] = k + x * dk/dx,  dk/dx = 2 R x / rho^3
        kr = 2.0 * R / rho ** 3
        Hm = np.zeros((X.shape[0], 3, 3))
        Hm[:, 0, 0] = k + kr * x * x
        Hm[:, 1, 1] = k + kr * y * y
        Hm[:, 0, 1] = Hm[:, 1, 0] = kr * x * y
        Hm[:, 2, 2] = 2.0
        return Hm

    e = R + r
    box = np.array([[-1.2 * e, 1.2 * e], [-1.2 * e, 1.2 * e], [-1.5 * r, 1.5 * r]])
    return LevelSetSurface("torus", phi, grad, hess, box, params={"R": R, "r": r})


def cheese() -> LevelSetSurface:
    """The quartic cheese-like surface on ``[-1.5, 1.5]^3``."""

    def phi(X):
        X = np.atleast_2d(X)
        x2, y2, z2 = X[:, 0] ** 2, X[:, 1] ** 2, X[:, 2] ** 2
        return ((4 * x2 - 1) ** 2 + (4 * y2 - 1) ** 2 + (4 * z2 - 1) ** 2
                + 16 * (x2 + y2 - 1) ** 2 + 16 * (x2 + z2 - 1) ** 2 + 16 * (y2 + z2 - 1) ** 2 - 16)

    def grad(X):
        X = np.atleast_2d(X)
        sq = X ** 2
        tot = sq.sum(axis=1, keepdims=True)
        # 16 x (4x^2 - 1) + 64 x (x^2 + y^2 - 1) + 64 x (x^2 + z^2 - 1)
        return 16 * X * (4 * sq - 1) + 64 * X * (sq + tot - 2)

    def hess(X):
        X = np.atleast_2d(X)
        sq = X ** 2
        tot = sq.sum(axis=1)
        Hm = 128.0 * X[:, :, None] * X[:, None, :]
        diag = 16 * (12 * sq - 1) + 64 * (5 * sq + tot[:, None] - 2)
        idx = np.arange(3)
        Hm[:, idx, idx] = diag
        return Hm

    return LevelSetSurface("cheese", phi, grad, hess, np.array([[-1.5, 1.5]] * 3))


def sheared_sphere(t: float) -> LevelSetSurface:
    """Unit sphere carried by ``v = (z, 0, 0)`` for time ``t``: ``(x - t z)^2 + y^2 + z^2 = 1``."""
    A = np.array([[1.0, 0.0, -t], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    Q = A.T @ A

    def phi(X):
        Y = np.atleast_2d(X) @ A.T
        return np.einsum("ni,ni->n", Y, Y) - 1.0

    def grad(X):
        return 2.0 * np.atleast_2d(X) @ Q

    def hess(X):
        return np.broadcast_to(2.0 * Q, (np.atleast_2d(X).shape[0], 3, 3)).copy()

    ext = np.sqrt(1.0 + t * t)
    box = np.array([[-1.1 * ext, 1.1 * ext], [-1.1, 1.1], [-1.1, 1.1]])
    return LevelSetSurface("sheared_sphere", phi, grad, hess, box, params={"t": t})


def oscillating_ellipsoid(t: float) -> LevelSetSurface:
    """``(x / (1.5 a(t)))^2 + y^2 + (z / 0.5)^2 = 1`` with ``a = sqrt(1 + 0.95 sin(pi t))``."""
    a = np.sqrt(1.0 + 0.95 * np.sin(np.pi * t))
    s = ellipsoid(1.5 * a, 1.0, 0.5)
    return LevelSetSurface("oscillating_ellipsoid", s.phi, s.grad, s.hess, s.bbox,
                           params={"t": t, "axes": (1.5 * a, 1.0, 0.5)})


REGISTRY = {
    "sphere": sphere,
    "plane": plane,
    "ellipsoid": ellipsoid,
    "torus": torus,
    "cheese": cheese,
    "sheared_sphere": sheared_sphere,
    "oscillating_ellipsoid": oscillating_ellipsoid,
}


# ---------------------------------------------------------------- projection and sampling

def rms_residual(surface: LevelSetSurface, X) -> float:
    """E_p: root-mean-square of ``|phi|`` over a point set."""
    v = surface.phi(np.atleast_2d(X))
    return float(np.sqrt(np.mean(v * v)))


@dataclass
class ProjectionReport:
    points: np.ndarray
    residual_before: np.ndarray
    residual_after: np.ndarray
    nonconverged: np.ndarray
    iterations: int

    @property
    def ep_before(self) -> float:
        return float(np.sqrt(np.mean(self.residual_before ** 2)))

    @property
    def ep_after(self) -> float:
        return float(np.sqrt(np.mean(self.residual_after ** 2)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "abs_phi_before", "abs_phi_after"])
            for i, (a, b) in enumerate(zip(self.residual_before, self.residual_after)):
                w.writerow([i, repr(float(a)), repr(float(b))])


def project_to_surface(surface: LevelSetSurface, points, tol: float = 1e-13,
                       max_iter: int = 50, drop_nonconverged: bool = False) -> ProjectionReport:
    """Newton steps ``X <- X - phi grad(phi) / |grad(phi)|^2`` until ``|phi| <= tol``.

    Each point keeps its best iterate, so the residual never increases.
    """
    X = np.array(np.atleast_2d(points), dtype=float)
    r0 = np.abs(surface.phi(X))
    best = X.copy()
    best_r = r0.copy()
    active = best_r > tol
    it = 0
    while np.any(active) and it < max_iter:
        it += 1
        idx = np.flatnonzero(active)
        Y = X[idx]
        f = surface.phi(Y)
        g = surface.grad(Y)
        gg = np.einsum("ni,ni->n", g, g)
        gg = np.where(gg > 0, gg, np.inf)
        Y = Y - (f / gg)[:, None] * g
        X[idx] = Y
        r = np.abs(surface.phi(Y))
        better = r < best_r[idx]
        best[idx[better]] = Y[better]
        best_r[idx[better]] = r[better]
        active[idx] = (r > tol) & (r < 1e3 * (r0[idx] + 1.0))
    nonconv = np.flatnonzero(best_r > tol)
    if drop_nonconverged and nonconv.size:
        keep = np.setdiff1d(np.arange(best.shape[0]), nonconv)
        return ProjectionReport(best[keep], r0[keep], best_r[keep], nonconv, it)
    return ProjectionReport(best, r0, best_r, nonconv, it)


def sample_levelset(surface: LevelSetSurface, count: int, seed: int, band: Optional[float] = None,
                    tol: float = 1e-13, project: bool = True, chunk: int = 200_000) -> np.ndarray:
    """Approximately area-uniform points on ``{phi = 0}``.

    Uniform box draws are kept when the first-order distance estimate
    ``|phi| / |grad phi|`` is below ``band`` (default 1e-2 of the box
    diagonal), then Newton-projected onto the zero level set.
    """
    from .features import make_rng

    if count < 1:
        raise ValueError("count must be >= 1")
    band = 1e-2 * surface.diameter if band is None else band
    rng = make_rng(seed, 0x5A3)
    lo, hi = surface.bbox[:, 0], surface.bbox[:, 1]
    kept = []
    n_kept = 0
    drawn = 0
    while n_kept < count:
        Y = lo + (hi - lo) * rng.random((chunk, 3))
        drawn += chunk
        g = np.linalg.norm(surface.grad(Y), axis=1)
        d = np.abs(surface.phi(Y)) / np.maximum(g, 1e-300)
        ok = (d <= band) & (g >= surface.eps_grad)
        kept.append(Y[ok])
        n_kept += int(ok.sum())
        if drawn >= 50 * chunk and n_kept / drawn < 1e-5:
            raise SamplingError(f"acceptance rate {n_kept / drawn:.2e} < 1e-5; check bbox/band")
    X = np.concatenate(kept)[:count]
    if not project:
        return X
    return project_to_surface(surface, X, tol=tol).points


def perturb_off_surface(surface: LevelSetSurface, X, ep: float, seed: int) -> np.ndarray:
    """Push surface points off the zero level set so that ``E_p`` is about ``ep``.

    Each point moves along ``grad(phi)`` by a Gaussian amount chosen so its
    level-set value is ``~ N(0, ep^2)`` to first order. Mimics a mesher's
    point set whose vertices sit slightly off the implicit surface.
    """
    from .features import make_rng

    X = np.atleast_2d(X)
    g = surface.grad(X)
    gg = np.einsum("ni,ni->n", g, g)
    e = ep * make_rng(seed, 0xC0A5).standard_normal(X.shape[0])
    return X + (e / gg)[:, None] * g


# ---------------------------------------------------------------- point-set IO

def write_xyz(path, X) -> None:
    np.savetxt(path, np.atleast_2d(X), fmt="%.17g")


def write_ply(path, X, extra: Optional[dict] = None) -> None:
    X = np.atleast_2d(X)
    extra = extra or {}
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {X.shape[0]}\n")
        for name in ("x", "y", "z", *extra):
            fh.write(f"property double {name}\n")
        fh.write("end_header\n")
        cols = [X] + [np.asarray(v, dtype=float).reshape(X.shape[0], -1) for v in extra.values()]
        np.savetxt(fh, np.hstack(cols), fmt="%.17g")

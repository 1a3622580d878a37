"""Parametric atlases: charts, metric data, the pulled-back Laplace-Beltrami
operator and interface mismatch measures for broken (patchwise) functions.

Jets passed around here are triples ``(value (N,), grad (N, 2), hess (N, 2, 2))``
in chart parameters.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import RandomFeatureLayer, eval_linear_combination


class DegenerateChartError(ValueError):
    pass


class InterfaceConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class Chart:
    """``X: D -> R^3`` on the rectangle ``domain = [[a1, b1], [a2, b2]]``.

    ``fn(xi)`` returns ``(X (N,3), dX (N,3,2), d2X (N,3,2,2) or None)``.
    """

    name: str
    fn: Callable
    domain: np.ndarray
    periodic: tuple = (False, False)
    params: dict = field(default_factory=dict)

    @property
    def extent(self) -> np.ndarray:
        return self.domain[:, 1] - self.domain[:, 0]

    @property
    def area(self) -> float:
        return float(np.prod(self.extent))

    def evaluate(self, xi, need_second: bool = True):
        """Position and derivatives; second derivatives fall back to central
        differences of ``dX`` (step ``1e-6 * extent``) when not supplied."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        X, dX, d2X = self.fn(xi)
        fd = False
        if need_second and d2X is None:
            fd = True
            d2X = np.empty(dX.shape + (2,))
            for g in range(2):
                h = 1e-6 * self.extent[g]
                e = np.zeros(2)
                e[g] = h
                d2X[..., g] = (self.fn(xi + e)[1] - self.fn(xi - e)[1]) / (2 * h)
            d2X = 0.5 * (d2X + np.swapaxes(d2X, 2, 3))
        return X, dX, d2X, fd

    def contains(self, xi, tol: float = 1e-9) -> np.ndarray:
        xi = np.atleast_2d(xi)
        t = tol * np.maximum(self.extent, 1.0)
        return np.all((xi >= self.domain[:, 0] - t) & (xi <= self.domain[:, 1] + t), axis=1)


@dataclass
class MetricData:
    g: np.ndarray        # (N, 2, 2)
    det: np.ndarray      # (N,)
    ginv: np.ndarray     # (N, 2, 2)
    sqrt_g: np.ndarray   # (N,)
    dg: np.ndarray       # (N, 2, 2, 2), dg[:, c, a, b] = d_c g_ab
    drift: np.ndarray    # (N, 2), b^beta = (1/sqrt g) d_alpha (sqrt g g^{alpha beta})
    fd_second: bool = False


def metric_from_derivatives(dX, d2X, xi=None, fd=False) -> MetricData:
    g = np.einsum("nka,nkb->nab", dX, dX)
    det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
    bad = np.flatnonzero(det <= 1e-14)
    if bad.size:
        where = None if xi is None else np.atleast_2d(xi)[bad[0]].tolist()
        raise DegenerateChartError(f"det g = {det[bad[0]]:.3e} <= 1e-14 at xi = {where}")
    ginv = np.empty_like(g)
    ginv[:, 0, 0] = g[:, 1, 1] / det
    ginv[:, 1, 1] = g[:, 0, 0] / det
    ginv[:, 0, 1] = ginv[:, 1, 0] = -g[:, 0, 1] / det
    # d_c g_ab = X_ac . X_b + X_a . X_bc
    t = np.einsum("nkac,nkb->ncab", d2X, dX)
    dg = t + np.swapaxes(t, 2, 3)
    # d_c g^{ab} = -g^{am} d_c g_mn g^{nb}
    dginv = -np.einsum("nam,ncmk,nkb->ncab", ginv, dg, ginv)
    div_ginv = np.einsum("naab->nb", dginv)
    dlog_sqrtg = 0.5 * np.einsum("nmk,namk->na", ginv, dg)
    drift = div_ginv + np.einsum("nab,na->nb", ginv, dlog_sqrtg)
    return MetricData(g=g, det=det, ginv=ginv, sqrt_g=np.sqrt(det), dg=dg, drift=drift, fd_second=fd)


def metric_at(chart: Chart, xi) -> MetricData:
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    _, dX, d2X, fd = chart.evaluate(xi)
    if fd:
        warnings.warn(f"chart {chart.name}: second derivatives by finite differences", RuntimeWarning)
    return metric_from_derivatives(dX, d2X, xi, fd)


def chart_operator_apply(metric: MetricData, grad, hess) -> np.ndarray:
    """Pullback of ``-Laplace-Beltrami``: ``-g^{ab} u_ab - b^b u_b``."""
    return -np.einsum("nab,nab->n", metric.ginv, hess) - np.einsum("nb,nb->n", metric.drift, grad)


def pullback_jet(dX, d2X, grad3, hess3):
    """Chart-parameter gradient and Hessian of ``u o X`` from ambient ones."""
    grad = np.einsum("nka,nk->na", dX, grad3)
    hess = np.einsum("nka,nkl,nlb->nab", dX, hess3, dX) + np.einsum("nk,nkab->nab", grad3, d2X)
    return grad, hess


# ---------------------------------------------------------------- built-in charts

def _torus_fn(R, r):
    def fn(xi):
        a, b = xi[:, 0], xi[:, 1]
        ca, sa, cb, sb = np.cos(a), np.sin(a), np.cos(b), np.sin(b)
        rho = r * ca + R
        X = np.stack([rho * cb, rho * sb, r * sa], axis=1)
        dX = np.zeros((xi.shape[0], 3, 2))
        dX[:, :, 0] = np.stack([-r * sa * cb, -r * sa * sb, r * ca], axis=1)
        dX[:, :, 1] = np.stack([-rho * sb, rho * cb, 0 * a], axis=1)
        d2X = np.zeros((xi.shape[0], 3, 2, 2))
        d2X[:, :, 0, 0] = np.stack([-r * ca * cb, -r * ca * sb, -r * sa], axis=1)
        d2X[:, :, 0, 1] = d2X[:, :, 1, 0] = np.stack([r * sa * sb, -r * sa * cb, 0 * a], axis=1)
        d2X[:, :, 1, 1] = np.stack([-rho * cb, -rho * sb, 0 * a], axis=1)
        return X, dX, d2X
    return fn


def torus_chart(R: float = 1.0, r: float = 0.25) -> Chart:
    dom = np.array([[0.0, 2 * np.pi], [0.0, 2 * np.pi]])
    return Chart("torus", _torus_fn(R, r), dom, (True, True), {"R": R, "r": r})


def revolution_chart(name, rho, z, zrange, params=None) -> Chart:
    """``X = (rho(s) cos a, rho(s) sin a, z(s))`` on ``[0, 2 pi] x zrange``.

    ``rho`` and ``z`` return ``(f, f', f'')`` arrays.
    """

    def fn(xi):
        a, s = xi[:, 0], xi[:, 1]
        ca, sa = np.cos(a), np.sin(a)
        p, dp, ddp = rho(s)
        q, dq, ddq = z(s)
        zero = 0 * a
        X = np.stack([p * ca, p * sa, q], axis=1)
        dX = np.zeros((xi.shape[0], 3, 2))
        dX[:, :, 0] = np.stack([-p * sa, p * ca, zero], axis=1)
        dX[:, :, 1] = np.stack([dp * ca, dp * sa, dq], axis=1)
        d2X = np.zeros((xi.shape[0], 3, 2, 2))
        d2X[:, :, 0, 0] = np.stack([-p * ca, -p * sa, zero], axis=1)
        d2X[:, :, 0, 1] = d2X[:, :, 1, 0] = np.stack([-dp * sa, dp * ca, zero], axis=1)
        d2X[:, :, 1, 1] = np.stack([ddp * ca, ddp * sa, ddq], axis=1)
        return X, dX, d2X

    dom = np.array([[0.0, 2 * np.pi], list(zrange)], dtype=float)
    return Chart(name, fn, dom, (True, False), params or {})


def cylinder_chart(radius: float = 1.0, zrange=(-1.0, 1.0)) -> Chart:
    def rho(s):
        return radius + 0 * s, 0 * s, 0 * s

    def z(s):
        return s, 1 + 0 * s, 0 * s

    return revolution_chart("cylinder", rho, z, zrange, {"radius": radius})


def spherical_cap_chart(center_z: float = -1.0, depth: float = 0.1,
                        zrange=(-1.0999, -1.0)) -> Chart:
    """Half-ellipsoid cap ``rho = sqrt(1 - ((s - center_z)/depth)^2)``, ``z = s``.

    The cap pole (``rho = 0``) is excluded by clamping ``zrange``.
    """

    def rho(s):
        u = (s - center_z) / depth
        p = np.sqrt(1.0 - u * u)
        dp = -u / (depth * p)
        ddp = -1.0 / (depth * depth * p ** 3)
        return p, dp, ddp

    def z(s):
        return s, 1 + 0 * s, 0 * s

    return revolution_chart("spherical_cap", rho, z, zrange, {"center_z": center_z, "depth": depth})


def ellipsoid_chart(a: float = 1.0, b: float = 1.0, c: float = 1.0) -> Chart:
    """``(a sin th cos ph, b sin th sin ph, c cos th)`` on ``[0, pi] x [0, 2 pi]``; poles degenerate."""

    def fn(xi):
        th, ph = xi[:, 0], xi[:, 1]
        st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
        zero = 0 * th
        X = np.stack([a * st * cp, b * st * sp, c * ct], axis=1)
        dX = np.zeros((xi.shape[0], 3, 2))
        dX[:, :, 0] = np.stack([a * ct * cp, b * ct * sp, -c * st], axis=1)
        dX[:, :, 1] = np.stack([-a * st * sp, b * st * cp, zero], axis=1)
        d2X = np.zeros((xi.shape[0], 3, 2, 2))
        d2X[:, :, 0, 0] = np.stack([-a * st * cp, -b * st * sp, -c * ct], axis=1)
        d2X[:, :, 0, 1] = d2X[:, :, 1, 0] = np.stack([-a * ct * sp, b * ct * cp, zero], axis=1)
        d2X[:, :, 1, 1] = np.stack([-a * st * cp, -b * st * sp, zero], axis=1)
        return X, dX, d2X

    dom = np.array([[0.0, np.pi], [0.0, 2 * np.pi]])
    return Chart("ellipsoid", fn, dom, (False, True), {"axes": (a, b, c)})


CHARTS = {
    "torus": torus_chart,
    "cylinder": cylinder_chart,
    "spherical_cap": spherical_cap_chart,
    "ellipsoid": ellipsoid_chart,
}


# ---------------------------------------------------------------- atlases

@dataclass(frozen=True)
class Interface:
    """Edge ``start -> end`` of ``D_i`` glued to chart ``j`` by ``transition``."""

    chart_i: int
    chart_j: int
    start: np.ndarray
    end: np.ndarray
    normal: np.ndarray                 # outward unit normal of the edge in D_i
    transition: Callable               # xi (N,2) -> xi' (N,2)
    transition_jac: Callable           # xi (N,2) -> (N,2,2), J[a,b] = dPhi_a / dxi_b

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    def edge_points(self, n: int) -> np.ndarray:
        s = (np.arange(n) + 0.5) / n
        return self.start + s[:, None] * (self.end - self.start)

    def random_edge_points(self, n: int, rng) -> np.ndarray:
        s = rng.random(n)
        return self.start + s[:, None] * (self.end - self.start)

    def gauss_points(self, order: int):
        x, w = np.polynomial.legendre.leggauss(order)
        s = 0.5 * (x + 1)
        return self.start + s[:, None] * (self.end - self.start), 0.5 * w * self.length


@dataclass(frozen=True)
class BoundaryEdge:
    chart: int
    start: np.ndarray
    end: np.ndarray
    normal: np.ndarray

    def edge_points(self, n: int) -> np.ndarray:
        s = (np.arange(n) + 0.5) / n
        return self.start + s[:, None] * (self.end - self.start)


@dataclass(frozen=True)
class Atlas:
    charts: tuple
    interfaces: tuple = ()
    boundaries: tuple = ()
    name: str = "atlas"

    def validate(self, n: int = 64, tol: float = 1e-10) -> float:
        """Max ``|X_i(xi) - X_j(Phi(xi))|`` over sampled edge points."""
        worst = 0.0
        for e in self.interfaces:
            xi = e.edge_points(n)
            xj = e.transition(xi)
            Xi = self.charts[e.chart_i].evaluate(xi, need_second=False)[0]
            Xj = self.charts[e.chart_j].evaluate(xj, need_second=False)[0]
            err = float(np.max(np.linalg.norm(Xi - Xj, axis=1)))
            worst = max(worst, err)
            if err > tol:
                raise InterfaceConsistencyError(f"interface {e.chart_i}->{e.chart_j}: mismatch {err:.2e}")
        return worst


def _shift(d):
    d = np.asarray(d, dtype=float)
    return (lambda xi: xi + d), (lambda xi: np.broadcast_to(np.eye(2), (xi.shape[0], 2, 2)).copy())


def periodic_interfaces(index: int, chart: Chart) -> list:
    out = []
    (a1, b1), (a2, b2) = chart.domain
    if chart.periodic[0]:
        phi, jac = _shift([b1 - a1, 0.0])
        out.append(Interface(index, index, np.array([a1, a2]), np.array([a1, b2]),
                             np.array([-1.0, 0.0]), phi, jac))
    if chart.periodic[1]:
        phi, jac = _shift([0.0, b2 - a2])
        out.append(Interface(index, index, np.array([a1, a2]), np.array([b1, a2]),
                             np.array([0.0, -1.0]), phi, jac))
    return out


def torus_atlas(R: float = 1.0, r: float = 0.25) -> Atlas:
    ch = torus_chart(R, r)
    return Atlas((ch,), tuple(periodic_interfaces(0, ch)), name="torus")


def cup_atlas() -> Atlas:
    """Cup: elliptic bottom cap (chart 0) glued to a unit cylinder (chart 1); open rim at z = 1."""
    bottom = spherical_cap_chart()
    side = cylinder_chart(1.0, (-1.0, 1.0))
    ident = (lambda xi: np.array(xi, dtype=float),
             lambda xi: np.broadcast_to(np.eye(2), (xi.shape[0], 2, 2)).copy())
    junction = Interface(0, 1, np.array([0.0, -1.0]), np.array([2 * np.pi, -1.0]),
                         np.array([0.0, 1.0]), *ident)
    ifaces = periodic_interfaces(0, bottom) + periodic_interfaces(1, side) + [junction]
    rim = BoundaryEdge(1, np.array([0.0, 1.0]), np.array([2 * np.pi, 1.0]), np.array([0.0, 1.0]))
    return Atlas((bottom, side), tuple(ifaces), (rim,), name="cup")


ATLASES = {"torus": torus_atlas, "cup": cup_atlas}


# ---------------------------------------------------------------- broken functions

JetFn = Callable[[np.ndarray], tuple]


class BrokenFunction:
    """One jet callable per chart; ``self[i](xi) -> (value, grad, hess)``."""

    def __init__(self, parts: Sequence[JetFn]):
        self.parts = list(parts)

    def __getitem__(self, i) -> JetFn:
        return self.parts[i]

    def __len__(self):
        return len(self.parts)

    def shifted(self, const: float) -> "BrokenFunction":
        def wrap(fn):
            def jet(xi):
                v, g, h = fn(xi)
                return v - const, g, h
            return jet
        return BrokenFunction([wrap(p) for p in self.parts])


def patch_function(layers: Sequence[RandomFeatureLayer], coeffs: Sequence[np.ndarray]) -> BrokenFunction:
    """Independent parameter-space nets, one per chart."""
    return BrokenFunction([
        (lambda xi, L=L, c=c: eval_linear_combination(L, c, xi)) for L, c in zip(layers, coeffs)
    ])


def pullback_function(atlas: Atlas, ambient: Callable) -> BrokenFunction:
    """Pull an ambient function back through every chart.

    ``ambient(X) -> (u, grad (N,3), hess (N,3,3))``.
    """

    def make(ch):
        def jet(xi):
            X, dX, d2X, _ = ch.evaluate(xi)
            u, g3, h3 = ambient(X)
            g, h = pullback_jet(dX, d2X, g3, h3)
            return u, g, h
        return jet

    return BrokenFunction([make(ch) for ch in atlas.charts])


def global_ansatz_function(atlas: Atlas, layer: RandomFeatureLayer, coeffs) -> BrokenFunction:
    return pullback_function(atlas, lambda X: eval_linear_combination(layer, coeffs, X))


def interface_mismatch(atlas: Atlas, e: int, broken: BrokenFunction, xi=None, n: int = 64):
    """Value and parameter-normal-derivative mismatch along interface ``e``."""
    itf = atlas.interfaces[e]
    xi = itf.edge_points(n) if xi is None else np.atleast_2d(xi)
    xj = itf.transition(xi)
    if not np.all(atlas.charts[itf.chart_j].contains(xj)):
        raise InterfaceConsistencyError(f"transition of interface {e} leaves D_{itf.chart_j}")
    vi, gi, _ = broken[itf.chart_i](xi)
    vj, gj, _ = broken[itf.chart_j](xj)
    J = itf.transition_jac(xi)
    nu = itf.normal
    d0 = vi - vj
    dn = gi @ nu - np.einsum("nba,nb,a->n", J, gj, nu)
    return d0, dn


# ---------------------------------------------------------------- integrals

def gauss_rule(chart: Chart, order: int = 16):
    x, w = np.polynomial.legendre.leggauss(order)
    pts = []
    wts = []
    for k in range(2):
        a, b = chart.domain[k]
        pts.append(a + 0.5 * (b - a) * (x + 1))
        wts.append(0.5 * (b - a) * w)
    P1, P2 = np.meshgrid(pts[0], pts[1], indexing="ij")
    W = np.outer(wts[0], wts[1])
    return np.stack([P1.ravel(), P2.ravel()], axis=1), W.ravel()


def surface_integral(atlas: Atlas, integrand: Callable, order: int = 16) -> float:
    """``sum_i int_{D_i} f_i sqrt(g_i) dxi`` by tensor Gauss-Legendre; ``integrand(i, xi)``."""
    total = 0.0
    for i, ch in enumerate(atlas.charts):
        xi, w = gauss_rule(ch, order)
        _, dX, _, _ = ch.evaluate(xi, need_second=False)
        g = np.einsum("nka,nkb->nab", dX, dX)
        sg = np.sqrt(g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] ** 2)
        total += float(np.sum(w * sg * integrand(i, xi)))
    return total


def surface_area(atlas: Atlas, order: int = 16) -> float:
    return surface_integral(atlas, lambda i, xi: np.ones(xi.shape[0]), order)


def mean_zero_shift(atlas: Atlas, broken: BrokenFunction, order: int = 16) -> BrokenFunction:
    """Subtract the area-weighted mean over the whole atlas."""
    mean = surface_integral(atlas, lambda i, xi: broken[i](xi)[0], order) / surface_area(atlas, order)
    return broken.shifted(mean)

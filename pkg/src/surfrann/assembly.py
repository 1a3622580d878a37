"""Least-squares collocation systems for static surfaces (stationary and heat),
the truncated-SVD solver, residual-loss diagnostics and error metrics.

Row assembly never materialises per-feature Hessians. Every operator row is a
combination of ``rho``, ``rho'``, ``rho''`` (each N x M) with directional
products ``(a @ W.T)``.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .features import RandomFeatureLayer, activations, make_rng
from .geometry_param import (Atlas, BrokenFunction, chart_operator_apply, interface_mismatch,
                             metric_from_derivatives, metric_at, gauss_rule)

CHUNK_ROWS = 4096


class AssemblyError(RuntimeError):
    pass


@dataclass
class RowGroup:
    start: int
    stop: int
    weight: float


@dataclass
class LeastSquaresSystem:
    A: np.ndarray
    rhs: np.ndarray
    groups: dict
    columns: dict = field(default_factory=dict)   # block name -> (start, stop)
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.A.shape

    def group_rows(self, name: str) -> slice:
        g = self.groups[name]
        return slice(g.start, g.stop)

    def dump(self, path) -> None:
        names = list(self.groups)
        np.savez(path, A=self.A, rhs=self.rhs, group_names=np.array(names),
                 group_bounds=np.array([[self.groups[k].start, self.groups[k].stop] for k in names]),
                 group_weights=np.array([self.groups[k].weight for k in names]))


class _Builder:
    """Accumulates named row blocks, then stacks them into one system."""

    def __init__(self, ncols: int):
        self.ncols = ncols
        self.blocks = []

    def add(self, name, A, rhs, weight=1.0):
        A = np.asarray(A, dtype=float)
        if A.shape[1] != self.ncols:
            raise AssemblyError(f"block {name} has {A.shape[1]} columns, expected {self.ncols}")
        if weight != 1.0:
            A = A * weight
            rhs = np.asarray(rhs, dtype=float) * weight
        self.blocks.append((name, A, np.asarray(rhs, dtype=float), weight))

    def build(self, **kw) -> LeastSquaresSystem:
        if not self.blocks:
            raise AssemblyError("no rows assembled")
        groups = {}
        r = 0
        for name, A, _, w in self.blocks:
            if name in groups:
                raise AssemblyError(f"duplicate row group {name}")
            groups[name] = RowGroup(r, r + A.shape[0], w)
            r += A.shape[0]
        A = np.vstack([b[1] for b in self.blocks]) if len(self.blocks) > 1 else self.blocks[0][1]
        rhs = np.concatenate([b[2] for b in self.blocks])
        self.blocks = []
        return LeastSquaresSystem(A, rhs, groups, **kw)


def _chunked(n: int, ncols: int, fn: Callable[[slice], np.ndarray], chunk: int = CHUNK_ROWS) -> np.ndarray:
    out = np.empty((n, ncols))
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        out[sl] = fn(sl)
    return out


# ---------------------------------------------------------------- feature row kernels

def ambient_laplace_beltrami_rows(layer: RandomFeatureLayer, inputs, normal, H, spatial=slice(None)):
    """Rows ``Delta_Gamma psi_m`` via the embedding identity, plus the stack used.

    ``inputs`` are layer inputs (N, d); ``spatial`` picks the 3 space columns.
    """
    r0, r1, r2 = activations(layer, inputs, 2)
    Ws = layer.weights[:, spatial]
    wn = normal @ Ws.T
    w2 = np.einsum("mk,mk->m", Ws, Ws)
    lb = r2 * (w2[None, :] - wn * wn) - 2.0 * H[:, None] * r1 * wn
    return lb, (r0, r1, r2)


def chart_pullback_rows(layer: RandomFeatureLayer, inputs, dX, d2X, metric, spatial=slice(None)):
    """Rows ``G_i (psi_m o X)`` for an embedded-coordinate layer (global ansatz)."""
    r0, r1, r2 = activations(layer, inputs, 2)
    Ws = layer.weights[:, spatial]
    p = np.einsum("nka,mk->nma", dX, Ws)
    q = np.einsum("nkab,mk->nmab", d2X, Ws)
    gi = metric.ginv
    second = (np.einsum("nab,nma,nmb->nm", gi, p, p) * r2
              + np.einsum("nab,nmab->nm", gi, q) * r1)
    first = np.einsum("nb,nmb->nm", metric.drift, p) * r1
    return -(second + first), (r0, r1, r2), p


def patch_operator_rows(layer: RandomFeatureLayer, xi, metric):
    """Rows ``G_i psi_m`` for a parameter-space layer (penalized atlas)."""
    r0, r1, r2 = activations(layer, xi, 2)
    W = layer.weights
    quad = np.einsum("nab,ma,mb->nm", metric.ginv, W, W)
    lin = metric.drift @ W.T
    return -(r2 * quad + r1 * lin)


# ---------------------------------------------------------------- static atlas systems

def _points_by_chart(collocation, nchart):
    """Accept ``{chart: xi}``, a list of arrays, or a CollocationSet."""
    if isinstance(collocation, dict):
        return {i: np.atleast_2d(collocation[i]) for i in collocation}
    if isinstance(collocation, (list, tuple)):
        return {i: np.atleast_2d(x) for i, x in enumerate(collocation)}
    return {i: collocation.xi[collocation.chart == i] for i in range(nchart)}


def default_edge_count(n_interior: int) -> int:
    return max(4, int(round(2 * np.sqrt(n_interior))))


def assemble_static_atlas(atlas: Atlas, layers, f: Callable, mode: str, collocation,
                          eta: float = 1.0, edge_points: Optional[int] = None,
                          include_mismatch: Optional[bool] = None) -> LeastSquaresSystem:
    """Collocation system for ``-Delta_Gamma u = f`` on an atlas.

    ``mode='global_ansatz'``: one embedded-coordinate layer (3 inputs) shared
    by all charts, rows ``G_i (psi o X_i)``. Interface rows are identically
    zero in this mode and are only appended when ``include_mismatch``.
    ``mode='penalized'``: one parameter-space layer per chart, block columns,
    plus value and normal-derivative mismatch rows weighted by ``sqrt(eta)``.
    """
    pts = _points_by_chart(collocation, len(atlas.charts))
    n_int = sum(len(v) for v in pts.values())
    n_edge = edge_points or default_edge_count(n_int)

    if mode == "global_ansatz":
        layer = layers[0] if isinstance(layers, (list, tuple)) else layers
        if layer.input_dim != 3:
            raise AssemblyError("global_ansatz mode needs one 3-input layer")
        b = _Builder(layer.width)
        for i, xi in sorted(pts.items()):
            ch = atlas.charts[i]

            def rows(sl, ch=ch, xi=xi):
                X, dX, d2X, fd = ch.evaluate(xi[sl])
                met = metric_from_derivatives(dX, d2X, xi[sl], fd)
                return chart_pullback_rows(layer, X, dX, d2X, met)[0]

            A = _chunked(len(xi), layer.width, rows)
            X = ch.evaluate(xi, need_second=False)[0]
            b.add(f"interior/{i}", A, f(X))
        if include_mismatch:
            for e, itf in enumerate(atlas.interfaces):
                A0, An = _global_mismatch_rows(atlas, itf, layer, itf.edge_points(n_edge))
                w = np.sqrt(eta)
                b.add(f"interface/{e}/value", A0, np.zeros(len(A0)), w)
                b.add(f"interface/{e}/normal", An, np.zeros(len(An)), w)
        return b.build(columns={"global": (0, layer.width)}, meta={"mode": mode})

    if mode == "penalized":
        layers = list(layers)
        if len(layers) != len(atlas.charts) or any(L.input_dim != 2 for L in layers):
            raise AssemblyError("penalized mode needs one 2-input layer per chart")
        offs = np.concatenate([[0], np.cumsum([L.width for L in layers])])
        ncols = int(offs[-1])
        b = _Builder(ncols)
        for i, xi in sorted(pts.items()):
            ch = atlas.charts[i]
            A = np.zeros((len(xi), ncols))
            X, dX, d2X, fd = ch.evaluate(xi)
            met = metric_from_derivatives(dX, d2X, xi, fd)
            A[:, offs[i]:offs[i + 1]] = patch_operator_rows(layers[i], xi, met)
            b.add(f"interior/{i}", A, f(X))
        if include_mismatch is None or include_mismatch:
            w = np.sqrt(eta)
            for e, itf in enumerate(atlas.interfaces):
                A0, An = _patch_mismatch_rows(itf, layers, offs, itf.edge_points(n_edge))
                b.add(f"interface/{e}/value", A0, np.zeros(len(A0)), w)
                b.add(f"interface/{e}/normal", An, np.zeros(len(An)), w)
        cols = {f"chart/{i}": (int(offs[i]), int(offs[i + 1])) for i in range(len(layers))}
        return b.build(columns=cols, meta={"mode": mode, "eta": eta})

    raise AssemblyError(f"unknown mode {mode!r}")


def _patch_mismatch_rows(itf, layers, offs, xi):
    i, j = itf.chart_i, itf.chart_j
    xj = itf.transition(xi)
    J = itf.transition_jac(xi)
    nu = itf.normal
    A0 = np.zeros((len(xi), int(offs[-1])))
    An = np.zeros_like(A0)
    ri0, ri1 = activations(layers[i], xi, 1)
    rj0, rj1 = activations(layers[j], xj, 1)
    nu_j = np.einsum("nba,a->nb", J, nu)
    A0[:, offs[i]:offs[i + 1]] += ri0
    A0[:, offs[j]:offs[j + 1]] -= rj0
    An[:, offs[i]:offs[i + 1]] += ri1 * (layers[i].weights @ nu)[None, :]
    An[:, offs[j]:offs[j + 1]] -= rj1 * (nu_j @ layers[j].weights.T)
    return A0, An


def _global_mismatch_rows(atlas, itf, layer, xi):
    ci, cj = atlas.charts[itf.chart_i], atlas.charts[itf.chart_j]
    xj = itf.transition(xi)
    Xi, dXi, _, _ = ci.evaluate(xi, need_second=False)
    Xj, dXj, _, _ = cj.evaluate(xj, need_second=False)
    J = itf.transition_jac(xi)
    nu = itf.normal
    ri0, ri1 = activations(layer, Xi, 1)
    rj0, rj1 = activations(layer, Xj, 1)
    # d_nu (psi o X_i) = rho' w . (dX_i nu);  d_nu (psi o X_j o Phi) = rho' w . (dX_j J nu)
    di = np.einsum("nka,a->nk", dXi, nu)
    dj = np.einsum("nka,nab,b->nk", dXj, J, nu)
    A0 = ri0 - rj0
    An = ri1 * (di @ layer.weights.T) - rj1 * (dj @ layer.weights.T)
    return A0, An


# ---------------------------------------------------------------- embedded (level-set / point-cloud)

def assemble_static_levelset(frames, points, layer: RandomFeatureLayer, f_values,
                             skip_failed: bool = True) -> LeastSquaresSystem:
    """Rows ``-(Delta psi - 2 H dn psi - n^T hess(psi) n)`` at surface points.

    ``frames`` needs ``normal`` (N,3) and ``H`` (N,); an optional boolean
    ``ok`` marks points whose geometry could not be reconstructed.
    """
    X = np.atleast_2d(points)
    f_values = np.asarray(f_values, dtype=float)
    ok = getattr(frames, "ok", None)
    keep = np.ones(len(X), bool) if ok is None else np.asarray(ok, bool)
    if not skip_failed and not np.all(keep):
        raise AssemblyError(f"{int((~keep).sum())} points without a valid frame")
    idx = np.flatnonzero(keep)
    n, H = frames.normal[idx], frames.H[idx]

    def rows(sl):
        return -ambient_laplace_beltrami_rows(layer, X[idx[sl]], n[sl], H[sl])[0]

    b = _Builder(layer.width)
    b.add("interior", _chunked(len(idx), layer.width, rows), f_values[idx])
    return b.build(meta={"skipped": int(len(X) - len(idx))})


def assemble_heat_embedded(layer: RandomFeatureLayer, t, X, frames, f_values, X0, u0_values,
                           beta: float = 100.0, diffusivity: float = 1.0) -> LeastSquaresSystem:
    """Space-time rows ``d_t psi - alpha Delta_Gamma psi`` and ``beta psi(0, X0)``.

    The layer takes ``(t, x, y, z)``; ``frames`` are aligned with ``X``.
    """
    if layer.input_dim != 4:
        raise AssemblyError("heat layers take (t, x, y, z)")
    T = np.column_stack([np.asarray(t, float).reshape(-1), np.atleast_2d(X)])
    n, H = frames.normal, frames.H
    wt = layer.weights[:, 0]

    def rows(sl):
        lb, (_, r1, _) = ambient_laplace_beltrami_rows(layer, T[sl], n[sl], H[sl], slice(1, 4))
        return r1 * wt[None, :] - diffusivity * lb

    b = _Builder(layer.width)
    b.add("interior", _chunked(len(T), layer.width, rows), f_values)
    if X0 is None or len(X0) == 0:
        warnings.warn("heat system without initial rows is ill-posed", RuntimeWarning)
    else:
        T0 = np.column_stack([np.zeros(len(X0)), np.atleast_2d(X0)])
        b.add("initial", activations(layer, T0, 0)[0], u0_values, beta)
    return b.build(meta={"beta": beta})


def conormal(dX, normal_param):
    """Outward unit co-normal ``dX g^{-1} nu / |.|`` for a parameter-edge normal ``nu``."""
    g = np.einsum("nka,nkb->nab", dX, dX)
    v = np.einsum("nka,nab,b->nk", dX, np.linalg.inv(g), normal_param)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def assemble_heat_atlas(atlas: Atlas, layer: RandomFeatureLayer, f: Callable, u0: Callable,
                        interior, initial, beta: float = 100.0, diffusivity: float = 1.0,
                        robin=None) -> LeastSquaresSystem:
    """Space-time global-ansatz heat system on an atlas.

    ``interior``: dict chart -> (t (N,), xi (N,2)); ``initial``: dict chart -> xi.
    ``f(t, X)``, ``u0(X)``. ``robin``: optional ``(t, xi, g_value, weight)``
    on the atlas' first boundary edge, enforcing ``u + d_mu u = g``.
    """
    if layer.input_dim != 4:
        raise AssemblyError("heat layers take (t, x, y, z)")
    wt = layer.weights[:, 0]
    b = _Builder(layer.width)
    for i in sorted(interior):
        t, xi = interior[i]
        ch = atlas.charts[i]

        def rows(sl, ch=ch, t=np.asarray(t, float), xi=np.atleast_2d(xi)):
            X, dX, d2X, fd = ch.evaluate(xi[sl])
            met = metric_from_derivatives(dX, d2X, xi[sl], fd)
            G, (_, r1, _), _ = chart_pullback_rows(layer, np.column_stack([t[sl], X]), dX, d2X, met,
                                                   slice(1, 4))
            return r1 * wt[None, :] + diffusivity * G

        X = ch.evaluate(np.atleast_2d(xi), need_second=False)[0]
        b.add(f"interior/{i}", _chunked(len(X), layer.width, rows), f(np.asarray(t, float), X))
    for i in sorted(initial):
        xi = np.atleast_2d(initial[i])
        X = atlas.charts[i].evaluate(xi, need_second=False)[0]
        T0 = np.column_stack([np.zeros(len(X)), X])
        b.add(f"initial/{i}", activations(layer, T0, 0)[0], u0(X), beta)
    if robin is not None:
        if not atlas.boundaries:
            raise AssemblyError("atlas has no boundary edge for Robin rows")
        edge = atlas.boundaries[0]
        t, xi, gval, w = robin
        X, dX, _, _ = atlas.charts[edge.chart].evaluate(np.atleast_2d(xi), need_second=False)
        mu = conormal(dX, edge.normal)
        r0, r1 = activations(layer, np.column_stack([np.asarray(t, float), X]), 1)
        A = r0 + r1 * (mu @ layer.weights[:, 1:4].T)
        b.add("boundary", A, np.broadcast_to(np.asarray(gval, float), (len(X),)), w)
    return b.build(meta={"beta": beta, "diffusivity": diffusivity})


# ---------------------------------------------------------------- solve

@dataclass
class SolveReport:
    coefficients: np.ndarray
    residual_norm: float
    rank: int
    threshold: float
    singular_values: np.ndarray
    wall_time: float


def solve(system: LeastSquaresSystem, rcond: Optional[float] = None) -> SolveReport:
    """Minimum-norm least squares by truncated SVD.

    Tall systems (``R >= 2M``) are first reduced by a QR factorisation of
    ``[A | rhs]``; the singular values of the triangular factor equal those
    of ``A``. Singular values below ``rcond * sigma_max`` are discarded
    (default ``rcond = eps * max(R, M)``).
    """
    t0 = time.perf_counter()
    A, b = system.A, system.rhs
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise AssemblyError("non-finite entries in the assembled system")
    nr, nc = A.shape
    if nr >= 2 * nc:
        Ab = np.empty((nr, nc + 1))
        Ab[:, :nc] = A
        Ab[:, nc] = b
        Rf = scipy.linalg.qr(Ab, mode="r", overwrite_a=True, check_finite=False)[0]
        del Ab
        Rm, qb = Rf[:nc, :nc], Rf[:nc, nc]
        U, s, Vt = scipy.linalg.svd(Rm, full_matrices=False, check_finite=False)
    else:
        U, s, Vt = scipy.linalg.svd(A, full_matrices=False, check_finite=False)
        qb = b
    if rcond is None:
        rcond = np.finfo(float).eps * max(nr, nc)
    thr = rcond * s[0] if s.size else 0.0
    keep = s > thr
    c = Vt[keep].T @ ((U[:, keep].T @ qb) / s[keep])
    res = float(np.linalg.norm(A @ c - b))
    return SolveReport(c, res, int(keep.sum()), float(thr), s, time.perf_counter() - t0)


# ---------------------------------------------------------------- diagnostics

def _chart_residual(atlas, broken, f, i, xi):
    ch = atlas.charts[i]
    X = ch.evaluate(xi, need_second=False)[0]
    _, g, h = broken[i](xi)
    return chart_operator_apply(metric_at(ch, xi), g, h) - f(X)


def empirical_loss(atlas: Atlas, broken: BrokenFunction, f: Callable, n_interior: int,
                   n_edge: int, eta: float = 1.0, seed: int = 0) -> float:
    """Monte Carlo residual loss with uniform samples in each chart and edge."""
    rng = make_rng(seed, 0xD1A6)
    total = 0.0
    for i, ch in enumerate(atlas.charts):
        xi = ch.domain[:, 0] + ch.extent * rng.random((n_interior, 2))
        r = _chart_residual(atlas, broken, f, i, xi)
        total += ch.area / n_interior * float(np.sum(r * r))
    for e, itf in enumerate(atlas.interfaces):
        xi = itf.random_edge_points(n_edge, rng)
        d0, dn = interface_mismatch(atlas, e, broken, xi)
        total += eta * itf.length / n_edge * float(np.sum(d0 * d0 + dn * dn))
    return total


def mismatch_norm(atlas: Atlas, broken: BrokenFunction, order: int = 32) -> float:
    """``||B v||_Z``: summed edge L2 norms of both mismatches (Gauss-Legendre)."""
    total = 0.0
    for e, itf in enumerate(atlas.interfaces):
        xi, w = itf.gauss_points(order)
        d0, dn = interface_mismatch(atlas, e, broken, xi)
        total += float(np.sum(w * (d0 * d0 + dn * dn)))
    return float(np.sqrt(total))


def population_loss(atlas: Atlas, broken: BrokenFunction, f: Callable, eta: float = 1.0,
                    order: int = 48) -> dict:
    """Quadrature estimate of the population loss, split into its two parts."""
    interior = 0.0
    for i, ch in enumerate(atlas.charts):
        xi, w = gauss_rule(ch, order)
        r = _chart_residual(atlas, broken, f, i, xi)
        interior += float(np.sum(w * r * r))
    mis = mismatch_norm(atlas, broken, order) ** 2
    return {"interior": interior, "interface": eta * mis, "total": interior + eta * mis}


# ---------------------------------------------------------------- error metrics

def relative_l2_error(u_num, u_exact, constant_fix: str = "none", ref_index: int = 0,
                      reference: Optional[tuple] = None, weights=None) -> float:
    """Relative discrete l2 error, optionally modulo constants.

    ``reference_point``: shift ``u_num`` so it matches ``u_exact`` at the
    reference (given as ``(u_num(x*), u_exact(x*))`` or a point index).
    ``mean_zero``: subtract the (weighted) means of both before comparing.
    """
    u = np.asarray(u_num, dtype=float).ravel()
    v = np.asarray(u_exact, dtype=float).ravel()
    if constant_fix == "reference_point":
        un, ue = reference if reference is not None else (u[ref_index], v[ref_index])
        u = u - un + ue
    elif constant_fix == "mean_zero":
        w = np.ones_like(u) if weights is None else np.asarray(weights, float).ravel()
        u = u - np.sum(w * u) / np.sum(w)
        v_shift = v - np.sum(w * v) / np.sum(w)
        num = np.linalg.norm(u - v_shift)
        den = np.linalg.norm(v)
        return _ratio(num, den)
    elif constant_fix != "none":
        raise ValueError(f"unknown constant_fix {constant_fix!r}")
    return _ratio(np.linalg.norm(u - v), np.linalg.norm(v))


def _ratio(num, den):
    if den == 0.0:
        warnings.warn("exact solution has zero norm; returning the absolute error", RuntimeWarning)
        return float(num)
    return float(num / den)

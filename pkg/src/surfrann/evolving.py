"""Evolving surfaces: flow-map networks, reconstructed geometry, advection-diffusion
on the moving surface and conservation diagnostics."""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .assembly import (AssemblyError, LeastSquaresSystem, RowGroup, ambient_laplace_beltrami_rows,
                       solve)
from .features import RandomFeatureLayer, activations, make_layer
from .geometry_param import Chart, ellipsoid_chart

CHUNK = 4096


class FlowConvergenceError(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


class PoleError(ValueError):
    pass


# ---------------------------------------------------------------- velocity fields

@dataclass(frozen=True)
class Velocity:
    """Ambient velocity ``v(t, X)`` with Jacobian ``J[i, j] = dv_i / dx_j``.

    ``affine(t) -> (A (N,3,3), c (N,3))`` is set when ``v = A(t) x + c(t)``.
    """

    name: str
    fn: Callable
    jac: Callable
    affine: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __call__(self, t, X):
        return self.fn(_times(t, X), np.atleast_2d(X))

    def jacobian(self, t, X):
        return self.jac(_times(t, X), np.atleast_2d(X))

    def divergence(self, t, X):
        return np.trace(self.jacobian(t, X), axis1=1, axis2=2)


def _times(t, X):
    return np.broadcast_to(np.asarray(t, dtype=float), (np.atleast_2d(X).shape[0],))


def affine_velocity(name: str, A_of_t: Callable, c_of_t: Optional[Callable] = None, **params) -> Velocity:
    """``v = A(t) x + c(t)``; ``A_of_t(t (N,)) -> (N,3,3)``."""
    c_of_t = c_of_t or (lambda t: np.zeros((t.shape[0], 3)))
    return Velocity(
        name,
        fn=lambda t, X: np.einsum("nij,nj->ni", A_of_t(t), X) + c_of_t(t),
        jac=lambda t, X: A_of_t(t),
        affine=lambda t: (A_of_t(t), c_of_t(t)),
        params=params,
    )


def _const(M):
    M = np.asarray(M, dtype=float)
    return lambda t: np.broadcast_to(M, (t.shape[0], 3, 3)).copy()


def shear_flow(rate: float = 1.0) -> Velocity:
    """``v = (rate z, 0, 0)``."""
    A = np.zeros((3, 3))
    A[0, 2] = rate
    return affine_velocity("shear", _const(A), rate=rate)


def ellipsoid_oscillation(amplitude: float = 0.95, omega: float = np.pi) -> Velocity:
    """``v = (a'(t)/a(t) x, 0, 0)`` with ``a = sqrt(1 + amplitude sin(omega t))``."""

    def A(t):
        out = np.zeros((t.shape[0], 3, 3))
        out[:, 0, 0] = 0.5 * amplitude * omega * np.cos(omega * t) / (1.0 + amplitude * np.sin(omega * t))
        return out

    return affine_velocity("ellipsoid_oscillation", A, amplitude=amplitude, omega=omega)


def oscillation_scale(t, amplitude: float = 0.95, omega: float = np.pi):
    return np.sqrt(1.0 + amplitude * np.sin(omega * np.asarray(t, dtype=float)))


def uniform_expansion(rate: float = 1.0) -> Velocity:
    return affine_velocity("expansion", _const(rate * np.eye(3)), rate=rate)


def zero_velocity() -> Velocity:
    return affine_velocity("zero", _const(np.zeros((3, 3))))


def cubic_damping(rate: float = 1.0) -> Velocity:
    """Nonlinear ``v = -rate x^3`` (componentwise); exercises the Gauss-Newton path."""
    return Velocity(
        "cubic_damping",
        fn=lambda t, X: -rate * X ** 3,
        jac=lambda t, X: np.einsum("ni,ij->nij", -3.0 * rate * X ** 2, np.eye(3)),
        params={"rate": rate},
    )


VELOCITIES = {
    "shear": shear_flow,
    "ellipsoid_oscillation": ellipsoid_oscillation,
    "expansion": uniform_expansion,
    "zero": zero_velocity,
    "cubic_damping": cubic_damping,
}


# ---------------------------------------------------------------- initial surface

def _perm_chart(base: Chart, perm, name) -> Chart:
    """Chart with output coordinates reordered: ``out[k] = base[perm[k]]``."""

    def fn(xi):
        X, dX, d2X = base.fn(xi)
        return X[:, perm], dX[:, perm], None if d2X is None else d2X[:, perm]

    return Chart(name, fn, base.domain, base.periodic, dict(base.params))


@dataclass(frozen=True)
class InitialSurface:
    """Axis-aligned ellipsoid with two spherical charts whose poles sit on the
    z axis (chart 0) and on the x axis (chart 1)."""

    axes: tuple = (1.0, 1.0, 1.0)

    @property
    def charts(self):
        a, b, c = self.axes
        # (x, y, z) = (Z, X, Y) of a standard chart with axes (b, c, a): a cyclic
        # permutation, so the outward orientation is kept
        return (ellipsoid_chart(a, b, c), _perm_chart(ellipsoid_chart(b, c, a), [2, 0, 1], "ellipsoid_x"))

    def evaluate(self, chart: int, xi):
        return self.charts[chart].evaluate(xi)[:3]

    def locate(self, X0):
        """Chart id and parameters for points on the surface, avoiding poles."""
        X0 = np.atleast_2d(X0)
        a, b, c = self.axes
        u = X0 / np.asarray(self.axes)
        use_x = np.abs(u[:, 2]) > np.abs(u[:, 0])
        chart = use_x.astype(int)
        xi = np.empty((X0.shape[0], 2))
        cz = np.clip(u[:, 2], -1, 1)
        cx = np.clip(u[:, 0], -1, 1)
        xi[:, 0] = np.where(use_x, np.arccos(cx), np.arccos(cz))
        ph = np.where(use_x, np.arctan2(u[:, 2], u[:, 1]), np.arctan2(u[:, 1], u[:, 0]))
        xi[:, 1] = np.mod(ph, 2 * np.pi)
        return chart, xi

    def quadrature(self, order: int = 32):
        """Tensor Gauss-Legendre nodes and weights on chart 0's rectangle."""
        x, w = np.polynomial.legendre.leggauss(order)
        th = 0.5 * np.pi * (x + 1)
        ph = np.pi * (x + 1)
        T, P = np.meshgrid(th, ph, indexing="ij")
        W = np.outer(0.5 * np.pi * w, np.pi * w)
        return np.stack([T.ravel(), P.ravel()], axis=1), W.ravel()


# ---------------------------------------------------------------- flow-map model

def embed_layer(layer: RandomFeatureLayer, inputs: Sequence[int]) -> RandomFeatureLayer:
    """Lift a ``(t, X0[inputs])`` layer to ``(t, x, y, z)`` with zero weights elsewhere."""
    inputs = list(inputs)
    if layer.input_dim != 1 + len(inputs):
        raise AssemblyError("layer input dimension does not match its input indices")
    W = np.zeros((layer.width, 4))
    W[:, 0] = layer.weights[:, 0]
    W[:, [1 + k for k in inputs]] = layer.weights[:, 1:]
    A = np.zeros((layer.width, 4))
    A[:, 0] = layer.anchors[:, 0]
    A[:, [1 + k for k in inputs]] = layer.anchors[:, 1:]
    r = np.zeros(4)
    r[0] = layer.ranges[0]
    r[[1 + k for k in inputs]] = layer.ranges[1:]
    return RandomFeatureLayer(W, layer.biases, A, r, layer.seed, layer.index, layer.activation,
                              {"inputs": tuple(inputs), **layer.meta})


@dataclass(frozen=True)
class FlowComponent:
    layer: RandomFeatureLayer      # embedded 4-input layer
    inputs: tuple                  # initial-coordinate indices the net really uses


def make_flow_components(widths, inputs, r_t, r_x, boxes, T: float, seed: int = 0):
    """Reduced-input component layers drawn on ``[0, T] x box_i``.

    ``inputs[i]`` lists the initial coordinates net ``i`` depends on and
    ``boxes[i]`` gives one ``(lo, hi)`` per such coordinate.
    """
    comps = []
    for i in range(3):
        ins = tuple(inputs[i])
        box = np.vstack([[0.0, T], np.asarray(boxes[i], dtype=float).reshape(len(ins), 2)])
        r = np.concatenate([[np.atleast_1d(r_t)[i % np.size(r_t)]], np.full(len(ins), r_x)])
        L = make_layer(1 + len(ins), int(widths[i]), r, box, seed=seed, index=100 + i)
        comps.append(FlowComponent(embed_layer(L, ins), ins))
    return comps


@dataclass
class FlowFitReport:
    residual_norm: float
    initial_residual: float     # RMS of N(0, X0) - X0
    trajectory_residual: float  # RMS of dN/dt - v(t, N)
    history: list
    iterations: int
    converged: bool
    strategy: str
    order: list
    ranks: list
    wall_time: float


@dataclass
class FlowMapModel:
    components: list
    coeffs: list
    velocity: Velocity
    T: float
    report: Optional[FlowFitReport] = None

    def _inputs(self, t, X0):
        X0 = np.atleast_2d(X0)
        return np.column_stack([_times(t, X0), X0])

    def position(self, t, X0) -> np.ndarray:
        Z = self._inputs(t, X0)
        out = np.empty((Z.shape[0], 3))
        for s in range(0, Z.shape[0], CHUNK):
            sl = slice(s, s + CHUNK)
            for i, (comp, c) in enumerate(zip(self.components, self.coeffs)):
                out[sl, i] = activations(comp.layer, Z[sl], 0)[0] @ c
        return out

    def time_derivative(self, t, X0) -> np.ndarray:
        Z = self._inputs(t, X0)
        return np.column_stack([_combination(comp, c, Z, 1) for comp, c in zip(self.components, self.coeffs)])

    def spatial_jet(self, t, X0):
        """``x(t, .)`` with its gradient (N,3,3) and Hessian (N,3,3,3) in ``X0``."""
        Z = self._inputs(t, X0)
        n = Z.shape[0]
        x = np.empty((n, 3))
        g = np.empty((n, 3, 3))
        h = np.empty((n, 3, 3, 3))
        for s in range(0, n, CHUNK):
            sl = slice(s, s + CHUNK)
            for i, (comp, c) in enumerate(zip(self.components, self.coeffs)):
                W = comp.layer.weights[:, 1:]
                r0, r1, r2 = activations(comp.layer, Z[sl], 2)
                x[sl, i] = r0 @ c
                g[sl, i] = (r1 * c) @ W
                h[sl, i] = np.einsum("nm,ma,mb->nab", r2 * c, W, W)
        return x, g, h


def _affine_order(velocity: Velocity, times):
    A, _ = velocity.affine(np.asarray(times, dtype=float))
    dep = np.any(np.abs(A) > 0, axis=0)
    np.fill_diagonal(dep, False)
    ncomp, labels = connected_components(csr_matrix(dep.astype(float)), directed=True, connection="strong")
    groups = [list(np.flatnonzero(labels == k)) for k in range(ncomp)]
    # Kahn ordering of the condensed graph: a group runs after every group it reads from
    needs = {k: {labels[j] for i in groups[k] for j in np.flatnonzero(dep[i])} - {k} for k in range(ncomp)}
    order, done = [], set()
    while len(order) < ncomp:
        ready = [k for k in range(ncomp) if k not in done and needs[k] <= done]
        if not ready:
            raise AssemblyError("cyclic component dependency")
        for k in ready:
            order.append(groups[k])
            done.add(k)
    return order


def learn_flow(X0, times, velocity: Velocity, components, beta: float = 100.0,
               rcond: Optional[float] = None, strategy: Optional[str] = None,
               max_iter: int = 50, tol: float = 1e-12, raise_on_failure: bool = False) -> FlowMapModel:
    """Fit the three coordinate networks to ``dx/dt = v(t, x)``, ``x(0) = X0``.

    Affine velocities are solved in closed form, one strongly connected
    block of coupled components at a time in dependency order. Other
    velocities go through damped Gauss-Newton on the stacked residual.
    """
    t0 = time.perf_counter()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    times = np.asarray(times, dtype=float)
    T = float(times.max())
    Z = np.column_stack([np.repeat(times, X0.shape[0]), np.tile(X0, (times.size, 1))])
    Z0 = np.column_stack([np.zeros(X0.shape[0]), X0])
    strategy = strategy or ("affine" if velocity.affine is not None else "gauss_newton")
    if strategy == "affine":
        if velocity.affine is None:
            raise AssemblyError("affine strategy needs an affine velocity")
        model, ranks, order = _learn_affine(Z, Z0, X0, times, velocity, components, beta, rcond)
        history, converged, iters = [], True, 1
    elif strategy == "gauss_newton":
        model, ranks, history, converged, iters = _learn_gauss_newton(
            Z, Z0, X0, velocity, components, beta, rcond, max_iter, tol)
        order = [[0, 1, 2]]
        if not converged:
            msg = f"Gauss-Newton stopped after {iters} iterations, residual {history[-1]:.3e}"
            if raise_on_failure:
                raise FlowConvergenceError(msg, history)
            warnings.warn(msg, RuntimeWarning)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    model.T = T
    traj = model.time_derivative(Z[:, 0], Z[:, 1:]) - velocity(Z[:, 0], model.position(Z[:, 0], Z[:, 1:]))
    init = model.position(0.0, X0) - X0
    res = float(np.sqrt(np.sum(traj ** 2) + beta ** 2 * np.sum(init ** 2)))
    model.report = FlowFitReport(res, float(np.sqrt(np.mean(init ** 2))), float(np.sqrt(np.mean(traj ** 2))),
                                 history, iters, converged, strategy, [list(map(int, g)) for g in order],
                                 ranks, time.perf_counter() - t0)
    return model


def _combination(comp, c, Z, order=0):
    """Chunked ``sum_m c_m d^order psi_m / dt^order`` along rows of ``Z``."""
    out = np.empty(Z.shape[0])
    wt = comp.layer.weights[:, 0]
    for s in range(0, Z.shape[0], CHUNK):
        a = activations(comp.layer, Z[s:s + CHUNK], order)[order]
        out[s:s + CHUNK] = a @ (c if order == 0 else c * wt)
    return out


def _learn_affine(Z, Z0, X0, times, velocity, components, beta, rcond):
    order = _affine_order(velocity, times)
    A_t, c_t = velocity.affine(Z[:, 0])
    coeffs = [None] * 3
    ranks = [0] * 3
    known = {}
    nz, n0 = Z.shape[0], Z0.shape[0]
    for group in order:
        widths = [components[i].layer.width for i in group]
        offs = np.concatenate([[0], np.cumsum(widths)])
        A = np.zeros((len(group) * (nz + n0), int(offs[-1])))
        rhs = np.zeros(A.shape[0])
        for s in range(0, nz, CHUNK):
            sl = slice(s, min(nz, s + CHUNK))
            acts = [activations(components[j].layer, Z[sl], 1) for j in group]
            for a, i in enumerate(group):
                rows = slice(a * nz + sl.start, a * nz + sl.stop)
                for k, j in enumerate(group):
                    r0, r1 = acts[k]
                    blk = A[rows, offs[k]:offs[k + 1]]
                    blk -= A_t[sl, i, j][:, None] * r0
                    if i == j:
                        blk += r1 * components[j].layer.weights[:, 0][None, :]
                rhs[rows] = c_t[sl, i] + sum(A_t[sl, i, j] * known[j][sl] for j in known)
        for a, i in enumerate(group):
            irows = slice(len(group) * nz + a * n0, len(group) * nz + (a + 1) * n0)
            A[irows, offs[a]:offs[a + 1]] = beta * activations(components[i].layer, Z0, 0)[0]
            rhs[irows] = beta * X0[:, i]
        rep = solve(LeastSquaresSystem(A, rhs, {}), rcond)
        del A
        for k, j in enumerate(group):
            coeffs[j] = rep.coefficients[offs[k]:offs[k + 1]]
            ranks[j] = rep.rank
            known[j] = _combination(components[j], coeffs[j], Z)
    return FlowMapModel(list(components), coeffs, velocity, 0.0), ranks, order


def _stacked_residual(Z, Z0, X0, velocity, components, coeffs, beta):
    acts = [activations(c.layer, Z, 1) for c in components]
    N = np.column_stack([a[0] @ c for a, c in zip(acts, coeffs)])
    dN = np.column_stack([a[1] @ (c * comp.layer.weights[:, 0]) for a, c, comp in zip(acts, coeffs, components)])
    v = velocity(Z[:, 0], N)
    N0 = np.column_stack([activations(comp.layer, Z0, 0)[0] @ c for comp, c in zip(components, coeffs)])
    r = np.concatenate([(dN - v).T.ravel(), beta * (N0 - X0).T.ravel()])
    return r, acts, N


LM_LAMBDA0, LM_LAMBDA_MIN, LM_LAMBDA_MAX = 1e-6, 1e-16, 1e12


def _learn_gauss_newton(Z, Z0, X0, velocity, components, beta, rcond, max_iter, tol):
    widths = [c.layer.width for c in components]
    offs = np.concatenate([[0], np.cumsum(widths)])
    nz, n0 = Z.shape[0], Z0.shape[0]
    psi0 = [activations(c.layer, Z0, 0)[0] for c in components]

    def jacobian(acts, N):
        J = np.zeros((3 * (nz + n0), int(offs[-1])))
        Jv = velocity.jacobian(Z[:, 0], N)
        for i in range(3):
            for j in range(3):
                blk = -Jv[:, i, j][:, None] * acts[j][0]
                if i == j:
                    blk = blk + acts[j][1] * components[j].layer.weights[:, 0][None, :]
                J[i * nz:(i + 1) * nz, offs[j]:offs[j + 1]] = blk
            J[3 * nz + i * n0:3 * nz + (i + 1) * n0, offs[i]:offs[i + 1]] = beta * psi0[i]
        return J

    # start from the fit with the velocity frozen at the initial positions
    v0 = velocity(Z[:, 0], Z[:, 1:])
    coeffs = []
    for i, comp in enumerate(components):
        r0, r1 = activations(comp.layer, Z, 1)
        A = np.vstack([r1 * comp.layer.weights[:, 0][None, :], beta * psi0[i]])
        b = np.concatenate([v0[:, i], beta * X0[:, i]])
        coeffs.append(solve(LeastSquaresSystem(A, b, {}), rcond).coefficients)

    c = np.concatenate(coeffs)
    split = lambda c: [c[offs[i]:offs[i + 1]] for i in range(3)]
    r, acts, N = _stacked_residual(Z, Z0, X0, velocity, components, split(c), beta)
    cost = float(r @ r)
    history = [np.sqrt(cost)]
    lam, converged, it, rank = LM_LAMBDA0, False, 0, 0
    for it in range(1, max_iter + 1):
        J = jacobian(acts, N)
        # solve for the new coefficients rather than the increment so the
        # truncated SVD acts like the one-shot linear fit; the damping rows
        # pull towards the current iterate and switch off once lam reaches 0
        A = np.vstack([J, np.sqrt(lam) * np.eye(J.shape[1])]) if lam > 0 else J
        b = J @ c - r
        if lam > 0:
            b = np.concatenate([b, np.sqrt(lam) * c])
        rep = solve(LeastSquaresSystem(A, b, {}), rcond)
        rank = rep.rank
        c_new = rep.coefficients
        r_new, acts_new, N_new = _stacked_residual(Z, Z0, X0, velocity, components, split(c_new), beta)
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            rel = (np.sqrt(cost) - np.sqrt(cost_new)) / np.sqrt(cost)
            c, r, acts, N, cost = c_new, r_new, acts_new, N_new, cost_new
            history.append(np.sqrt(cost))
            lam = lam / 10.0 if lam > LM_LAMBDA_MIN else 0.0
            if rel < tol or np.sqrt(cost) < 1e-14:
                converged = True
                break
        elif lam == 0.0:
            # an undamped step no longer descends: the iterate is a fixed
            # point of the truncated Gauss-Newton map
            converged = True
            break
        else:
            lam = max(10.0 * lam, LM_LAMBDA_MIN)
            if lam > LM_LAMBDA_MAX:
                break
    return (FlowMapModel(list(components), split(c), velocity, 0.0), [rank] * 3, history, converged, it)


# ---------------------------------------------------------------- geometry of the evolving surface

@dataclass
class EvolvingFrame:
    X: np.ndarray           # (N,3)
    tangents: np.ndarray    # (N,3,2)
    normal: np.ndarray      # (N,3)
    H: np.ndarray           # (N,)
    div_v: np.ndarray       # surface divergence of the velocity
    velocity: np.ndarray    # (N,3)


def frame_from_parametrization(X, dX, d2X):
    """Unit normal ``X_1 x X_2`` and mean curvature with ``H = div(n) / 2``."""
    n = np.cross(dX[:, :, 0], dX[:, :, 1])
    nn = np.linalg.norm(n, axis=1)
    E = np.einsum("nk,nk->n", dX[:, :, 0], dX[:, :, 0])
    F = np.einsum("nk,nk->n", dX[:, :, 0], dX[:, :, 1])
    G = np.einsum("nk,nk->n", dX[:, :, 1], dX[:, :, 1])
    det = E * G - F * F
    if np.any(det <= 1e-14 * np.maximum(E * G, 1e-300)) or np.any(nn == 0):
        raise PoleError("degenerate first fundamental form (pole or collapsed chart)")
    n = n / nn[:, None]
    L = np.einsum("nk,nk->n", d2X[:, :, 0, 0], n)
    M = np.einsum("nk,nk->n", d2X[:, :, 0, 1], n)
    Nn = np.einsum("nk,nk->n", d2X[:, :, 1, 1], n)
    # with L = X_uu . n the textbook quotient is the curvature of -n; negate for H = div(n)/2
    H = -(E * Nn - 2 * F * M + G * L) / (2 * det)
    return n, H


def evolving_frame(model: FlowMapModel, surface: InitialSurface, t, X0=None, chart=None, xi=None) -> EvolvingFrame:
    """Frame of ``Gamma(t)`` at flow images of initial points (or chart parameters)."""
    if X0 is not None:
        chart, xi = surface.locate(X0)
    chart = np.broadcast_to(np.asarray(chart), (np.atleast_2d(xi).shape[0],))
    xi = np.atleast_2d(xi)
    n = xi.shape[0]
    tt = _times(t, xi)
    X0p = np.empty((n, 3))
    dX0 = np.empty((n, 3, 2))
    d2X0 = np.empty((n, 3, 2, 2))
    for k in (0, 1):
        m = chart == k
        if np.any(m):
            X0p[m], dX0[m], d2X0[m] = surface.evaluate(k, xi[m])
    X, g, h = model.spatial_jet(tt, X0p)
    dX = np.einsum("nik,nka->nia", g, dX0)
    d2X = (np.einsum("nikl,nka,nlb->niab", h, dX0, dX0) + np.einsum("nik,nkab->niab", g, d2X0))
    nrm, H = frame_from_parametrization(X, dX, d2X)
    Jv = model.velocity.jacobian(tt, X)
    div = np.trace(Jv, axis1=1, axis2=2) - np.einsum("ni,nij,nj->n", nrm, Jv, nrm)
    return EvolvingFrame(X, dX, nrm, H, div, model.velocity(tt, X))


def frames_over_time(model, surface, times, X0, chunk: int = CHUNK):
    """Frames at every (t, X0) pair of the space-time product, concatenated time-major."""
    chart, xi = surface.locate(X0)
    parts = [evolving_frame(model, surface, t, chart=chart, xi=xi) for t in np.asarray(times, float)]
    return EvolvingFrame(*(np.concatenate([getattr(p, f) for p in parts])
                           for f in ("X", "tangents", "normal", "H", "div_v", "velocity")))


# ---------------------------------------------------------------- PDE on the evolving surface

@dataclass
class EvolvingSolution:
    layer: RandomFeatureLayer
    coeffs: np.ndarray
    report: object
    system_shape: tuple

    def __call__(self, t, X):
        X = np.atleast_2d(X)
        Z = np.column_stack([_times(t, X), X])
        return activations(self.layer, Z, 0)[0] @ self.coeffs


def evolving_pde_rows(layer, t, frame: EvolvingFrame, diffusivity: float = 1.0):
    """``d_t psi + v.grad psi + (div_G v) psi - D Delta_G psi`` at (t, X)."""
    Z = np.column_stack([t, frame.X])
    lb, (r0, r1, _) = ambient_laplace_beltrami_rows(layer, Z, frame.normal, frame.H, slice(1, 4))
    W = layer.weights
    adv = frame.velocity @ W[:, 1:4].T + W[:, 0][None, :]
    return r1 * adv + frame.div_v[:, None] * r0 - diffusivity * lb


def solve_evolving_pde(model: FlowMapModel, surface: InitialSurface, layer: RandomFeatureLayer,
                       f: Callable, u0: Callable, times, X0, beta: float = 100.0,
                       diffusivity: float = 1.0, rcond: Optional[float] = None,
                       X0_initial=None) -> EvolvingSolution:
    """Space-time least squares for ``u`` on ``Gamma(t) = x(t, Gamma_0)``.

    ``f(t, X, frame) -> (N,)`` is the source at surface points and ``u0(X0)``
    the initial data. ``X0`` is either one (Nx, 3) set of initial points used
    at every time, or a sequence with one set per entry of ``times``.
    Initial rows use ``X0_initial`` (default: the first set).
    """
    if layer.input_dim != 4:
        raise AssemblyError("solution layers take (t, x, y, z)")
    times = np.asarray(times, dtype=float)
    if isinstance(X0, np.ndarray) and X0.ndim == 2:
        sets = [X0] * times.size
    else:
        sets = [np.atleast_2d(x) for x in X0]
        if len(sets) != times.size:
            raise AssemblyError("need one initial point set per time level")
    X0i = sets[0] if X0_initial is None else np.atleast_2d(X0_initial)
    offs = np.concatenate([[0], np.cumsum([len(x) for x in sets])])
    nrows = int(offs[-1]) + X0i.shape[0]
    A = np.empty((nrows, layer.width))
    rhs = np.empty(nrows)
    for k, t in enumerate(times):
        fr = evolving_frame(model, surface, t, X0=sets[k])
        sl = slice(offs[k], offs[k + 1])
        tt = np.full(len(sets[k]), t)
        A[sl] = evolving_pde_rows(layer, tt, fr, diffusivity)
        rhs[sl] = f(tt, fr.X, fr)
    Xs = model.position(0.0, X0i)
    sl = slice(int(offs[-1]), nrows)
    A[sl] = beta * activations(layer, np.column_stack([np.zeros(len(Xs)), Xs]), 0)[0]
    rhs[sl] = beta * u0(X0i)
    groups = {"interior": RowGroup(0, sl.start, 1.0), "initial": RowGroup(sl.start, nrows, beta)}
    rep = solve(LeastSquaresSystem(A, rhs, groups), rcond)
    return EvolvingSolution(layer, rep.coefficients, rep, A.shape)


# ---------------------------------------------------------------- diagnostics

@dataclass
class ConservationSeries:
    t: np.ndarray
    V: np.ndarray
    E_V: np.ndarray
    m: np.ndarray
    E_m: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "V", "E_V", "m", "E_m"])
            for row in zip(self.t, self.V, self.E_V, self.m, self.E_m):
                w.writerow([repr(float(v)) for v in row])


def conservation_report(model: FlowMapModel, surface: InitialSurface, times,
                        solution: Optional[Callable] = None, order: int = 32) -> ConservationSeries:
    """Enclosed volume ``1/3 int x.n ds`` and mass ``int u ds`` on ``Gamma(t)``.

    Integrals use Gauss-Legendre on the pole-z chart with the unnormalised
    area vector ``X_1 x X_2``, which stays valid at the poles.
    """
    xi, w = surface.quadrature(order)
    X0, dX0, _ = surface.evaluate(0, xi)
    V, m = [], []
    for t in np.asarray(times, dtype=float):
        X, g, _ = model.spatial_jet(t, X0)
        dX = np.einsum("nik,nka->nia", g, dX0)
        area = np.cross(dX[:, :, 0], dX[:, :, 1])
        V.append(float(np.sum(w * np.einsum("ni,ni->n", X, area)) / 3.0))
        if solution is not None:
            m.append(float(np.sum(w * solution(t, X) * np.linalg.norm(area, axis=1))))
    V = np.array(V)
    m = np.array(m) if m else np.full_like(V, np.nan)
    return ConservationSeries(np.asarray(times, float), V, np.abs(V - V[0]) / abs(V[0]), m,
                              np.abs(m - m[0]) / abs(m[0]))


def identity_flow(velocity: Optional[Velocity] = None, T: float = 1.0) -> FlowMapModel:
    """Exact identity map ``x(t, X0) = X0`` built from three linear-like features.

    Uses a single feature per component with tiny weight so ``tanh`` is
    linear to rounding level: ``x = c tanh(eps X0_i)`` with ``c = 1/eps``.
    """
    eps = 1e-6
    comps, coeffs = [], []
    for i in range(3):
        W = np.zeros((1, 4))
        W[0, 1 + i] = eps
        L = RandomFeatureLayer(W, np.zeros(1), np.zeros((1, 4)), np.full(4, eps), meta={"inputs": (i,)})
        comps.append(FlowComponent(L, (i,)))
        coeffs.append(np.array([1.0 / eps]))
    return FlowMapModel(comps, coeffs, velocity or zero_velocity(), T)


# ---------------------------------------------------------------- serialisation and export

FLOW_FORMAT = "surfrann.flow/1"


def save_flow(model: FlowMapModel, path) -> None:
    arrays = {"format": FLOW_FORMAT, "velocity": model.velocity.name, "T": model.T,
              "velocity_params": np.array(repr(model.velocity.params))}
    for i, (comp, c) in enumerate(zip(model.components, model.coeffs)):
        L = comp.layer
        arrays.update({f"w{i}": L.weights, f"b{i}": L.biases, f"B{i}": L.anchors, f"r{i}": L.ranges,
                       f"in{i}": np.array(comp.inputs, dtype=np.int64), f"c{i}": c,
                       f"seed{i}": np.array([L.seed, L.index])})
    np.savez(path, **arrays)


def load_flow(path, velocity: Optional[Velocity] = None) -> FlowMapModel:
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != FLOW_FORMAT:
            raise ValueError(f"unsupported flow format {str(z['format'])!r}")
        if velocity is None:
            import ast
            params = ast.literal_eval(str(z["velocity_params"]))
            velocity = VELOCITIES[str(z["velocity"])](**params)
        comps, coeffs = [], []
        for i in range(3):
            s = z[f"seed{i}"]
            ins = tuple(int(v) for v in z[f"in{i}"])
            L = RandomFeatureLayer(z[f"w{i}"], z[f"b{i}"], z[f"B{i}"], z[f"r{i}"], int(s[0]), int(s[1]),
                                   meta={"inputs": ins})
            comps.append(FlowComponent(L, ins))
            coeffs.append(z[f"c{i}"])
        return FlowMapModel(comps, coeffs, velocity, float(z["T"]))


def export_snapshot(path, t, frame: EvolvingFrame, u=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z", "nx", "ny", "nz", "H", "u"])
        uu = np.full(frame.X.shape[0], np.nan) if u is None else np.asarray(u)
        for X, n, H, v in zip(frame.X, frame.normal, frame.H, uu):
            w.writerow([repr(float(t)), *(repr(float(a)) for a in X), *(repr(float(a)) for a in n),
                        repr(float(H)), repr(float(v))])

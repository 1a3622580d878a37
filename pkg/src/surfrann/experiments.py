"""End-to-end benchmark runners. Each config dataclass holds the published
settings as defaults; runners return table-shaped rows plus artifacts."""
from __future__ import annotations

import csv
import functools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import assembly as asm
from . import evolving as ev
from .features import activations, make_layer, make_rng
from .geometry_levelset import (cheese, frame_at, oscillating_ellipsoid, perturb_off_surface,
                                project_to_surface, rms_residual, sample_levelset, sheared_sphere,
                                surface_laplacian, torus)
from .geometry_param import (cup_atlas, global_ansatz_function, patch_function, torus_atlas)
from .geometry_pointcloud import PointCloudSurface, fit_frames, load_cloud
from .problems import HEAT_SOLUTION, STATIC_SOLUTION
from .sampling import (TRAIN_STREAM, fibonacci_sphere, fibonacci_surface, grid_on_chart,
                       random_on_chart, random_sphere_points, time_grid)

log = logging.getLogger(__name__)
LAYER_INDEX = 0


def _values(layer, c, Z, chunk=4096):
    return np.concatenate([activations(layer, Z[s:s + chunk], 0)[0] @ c for s in range(0, len(Z), chunk)])


def _rcond(x):
    return None if not x else float(x)


# ---------------------------------------------------------------- configs

@dataclass
class TorusConfig:
    id: str = "ex1_torus"
    mode: str = "global_ansatz"          # or "penalized"
    M: tuple = (1000,)
    N: tuple = (2500,)                   # collocation counts; perfect squares
    seeds: tuple = (0,)
    r: float = 1.0
    box: tuple = ((-1.5, 1.5), (-1.5, 1.5), (-0.5, 0.5))   # anchors for the 3-input ansatz
    eta: float = 1.0
    edge_points: int = 0                 # 0: 2 sqrt(N) per interface
    n_test: int = 10000
    rcond: float = 0.0
    constant_fix: str = "reference_point"
    diagnostics: bool = False


@dataclass
class CheeseConfig:
    id: str = "ex2_cheese"
    M: tuple = (2000,)
    N: tuple = (8000,)
    seeds: tuple = (0,)
    r: float = 1.0
    box: tuple = ((-1.5, 1.5), (-1.5, 1.5), (-1.5, 1.5))
    n_all: int = 21192
    ep_coarse: float = 1.17e-5
    geometry_seed: int = 0
    point_sets: tuple = ("fine", "coarse")
    rcond: float = 0.0


@dataclass
class HeatCheeseConfig:
    id: str = "ex3_heat_cheese"
    M: tuple = (2400,)
    N: tuple = (8000,)
    N0: int = 1000
    seeds: tuple = (0,)
    r: float = 0.6
    box: tuple = ((0.0, 1.0), (-1.5, 1.5), (-1.5, 1.5), (-1.5, 1.5))
    beta: float = 100.0
    T: float = 1.0
    intervals: int = 200
    n_all: int = 21192
    ep_coarse: float = 1.17e-5
    geometry_seed: int = 0
    point_sets: tuple = ("fine",)
    rcond: float = 0.0


@dataclass
class CupConfig:
    id: str = "ex4_cup"
    M: int = 2000
    n: int = 25                          # samples per direction in t, xi1, xi2
    seed: int = 0
    r: float = 1.0
    box: tuple = ((0.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), (-1.1, 1.0))
    beta: float = 100.0
    diffusivity: float = 10.0
    u0: float = 10.0
    robin_value: float = 10.0
    source_amplitude: float = 15.0
    source_off: float = 0.5
    snapshot_times: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    rcond: float = 0.0


@dataclass
class BunnyConfig:
    id: str = "ex5_bunny"
    cloud: str = ""                      # XYZ/PLY path; empty: synthetic stand-in cloud
    synthetic_points: int = 30000
    k: int = 20
    orientation: str = "mst"
    M: int = 2500
    N: int = 40000
    N0: int = 200
    seed: int = 0
    r: float = 1.0
    box: tuple = ((0.0, 1.0), (-0.1, 0.07), (0.0, 0.2), (-0.07, 0.07))
    beta: float = 50.0
    diffusivity: float = 0.015
    source_center: tuple = (0.068, 0.06, 0.01)
    source_amplitude: float = 10.0
    source_sharpness: float = 100.0
    snapshot_times: tuple = (0.25, 0.5, 1.0)
    rcond: float = 0.0


@dataclass
class EllipsoidConfig:
    id: str = "ex6_ellipsoid"
    axes: tuple = (1.5, 1.0, 0.5)
    T: float = 2.0
    flow_widths: tuple = (2600, 500, 500)
    flow_r_t: tuple = (16.0, 1.0, 1.0)
    flow_r_x: float = 1.0
    flow_boxes: tuple = ((-1.5, 1.5), (-1.0, 1.0), (-0.5, 0.5))
    N0: tuple = (200,)
    beta: float = 100.0
    M: tuple = (2600,)
    r: float = 0.8
    box: tuple = ((0.0, 2.0), (-2.0, 2.0), (-1.0, 1.0), (-0.5, 0.5))
    seed: int = 0
    n_test: int = 5000
    solve_pde: bool = True
    rotate_lattices: bool = True
    layer_index: int = 6
    rcond: float = 0.0


@dataclass
class DropletConfig:
    id: str = "ex7_droplet"
    T: float = 3.0
    flow_widths: tuple = (2600, 500, 500)
    flow_r: float = 1.0
    N0: tuple = (200,)
    beta: float = 100.0
    M: int = 2600
    r: float = 1.0
    box: tuple = ((0.0, 3.0), (-3.2, 3.2), (-1.0, 1.0), (-1.0, 1.0))
    seed: int = 0
    n_test: int = 5000
    solve_pde: bool = True
    rotate_lattices: bool = True
    conservation_samples: int = 31
    quad_order: int = 32
    snapshot_times: tuple = (0.6, 1.2, 1.8, 2.4, 3.0)
    snapshot_points: int = 2000
    layer_index: int = 7
    rcond: float = 0.0


@dataclass
class ExperimentResult:
    rows: list
    artifacts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


class Timer:
    def __init__(self):
        self.t = {}

    def __call__(self, key):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.s = time.perf_counter()

            def __exit__(self, *a):
                timer.t[key] = timer.t.get(key, 0.0) + time.perf_counter() - self.s

        return _Ctx()

    def row(self):
        return {f"t_{k}": self.t.get(k, 0.0) for k in ("sample", "assemble", "solve", "evaluate")}


# ---------------------------------------------------------------- ex1: torus

def torus_source(X):
    fr = frame_at(torus(), X)
    return -surface_laplacian(fr, STATIC_SOLUTION.grad(0, X), STATIC_SOLUTION.hess(0, X))


def run_torus(cfg: TorusConfig) -> ExperimentResult:
    atlas = torus_atlas()
    ch = atlas.charts[0]
    xi_ref = np.array([[np.pi, np.pi]])
    u_ref = STATIC_SOLUTION.value(0, ch.evaluate(xi_ref, need_second=False)[0])[0]
    rows = []
    for M in cfg.M:
        for N in cfg.N:
            n0 = int(round(np.sqrt(N)))
            if n0 * n0 != N:
                raise ValueError(f"torus collocation count {N} is not a perfect square")
            for seed in cfg.seeds:
                tm = Timer()
                with tm("sample"):
                    xi = grid_on_chart(ch, n0)
                    xt = random_on_chart(ch, cfg.n_test, seed)
                    Xt = ch.evaluate(xt, need_second=False)[0]
                with tm("assemble"):
                    if cfg.mode == "global_ansatz":
                        L = make_layer(3, M, cfg.r, cfg.box, seed=seed, index=LAYER_INDEX)
                    else:
                        L = make_layer(2, M, cfg.r, ch.domain, seed=seed, index=LAYER_INDEX)
                    sysm = asm.assemble_static_atlas(atlas, [L], torus_source, cfg.mode, [xi], eta=cfg.eta,
                                                     edge_points=cfg.edge_points or None)
                with tm("solve"):
                    rep = asm.solve(sysm, _rcond(cfg.rcond))
                with tm("evaluate"):
                    c = rep.coefficients
                    if cfg.mode == "global_ansatz":
                        un = _values(L, c, Xt)
                        u_at_ref = _values(L, c, ch.evaluate(xi_ref, need_second=False)[0])[0]
                        broken = global_ansatz_function(atlas, L, c)
                    else:
                        un = _values(L, c, xt)
                        u_at_ref = _values(L, c, xi_ref)[0]
                        broken = patch_function([L], [c])
                    err = asm.relative_l2_error(un, STATIC_SOLUTION.value(0, Xt), cfg.constant_fix,
                                                reference=(u_at_ref, u_ref))
                    row = {"experiment": cfg.id, "mode": cfg.mode, "M": M, "N": N, "seed": seed,
                           "error": err, "rank": rep.rank, "residual": rep.residual_norm}
                    if cfg.diagnostics:
                        row["J_hat"] = asm.empirical_loss(atlas, broken, torus_source, N,
                                                          asm.default_edge_count(N), cfg.eta, seed)
                        row["Z_norm"] = asm.mismatch_norm(atlas, broken)
                row.update(tm.row())
                rows.append(row)
    return ExperimentResult(rows)


# ---------------------------------------------------------------- ex2/ex3: cheese

@functools.lru_cache(maxsize=4)
def cheese_point_sets(n_all: int, ep_coarse: float, seed: int):
    """Coarse set (off-surface by ``ep_coarse`` RMS) and its projection."""
    S = cheese()
    base = sample_levelset(S, n_all, seed)
    coarse = perturb_off_surface(S, base, ep_coarse, seed)
    rep = project_to_surface(S, coarse)
    for a in (coarse, rep.points):
        a.setflags(write=False)
    return {"coarse": coarse, "fine": rep.points, "ep_coarse": rms_residual(S, coarse),
            "ep_fine": rms_residual(S, rep.points)}


def _cheese_frames(P):
    prev = logging.getLogger("surfrann.geometry_levelset").level
    logging.getLogger("surfrann.geometry_levelset").setLevel(logging.ERROR)
    try:
        return frame_at(cheese(), P)
    finally:
        logging.getLogger("surfrann.geometry_levelset").setLevel(prev)


@dataclass
class _Frames:
    normal: np.ndarray
    H: np.ndarray


def run_cheese(cfg: CheeseConfig) -> ExperimentResult:
    sets = cheese_point_sets(cfg.n_all, cfg.ep_coarse, cfg.geometry_seed)
    rows = []
    for name in cfg.point_sets:
        P = sets[name]
        fr = _cheese_frames(P)
        f = -surface_laplacian(fr, STATIC_SOLUTION.grad(0, P), STATIC_SOLUTION.hess(0, P))
        u_ex = STATIC_SOLUTION.value(0, P)
        for M in cfg.M:
            for N in cfg.N:
                for seed in cfg.seeds:
                    tm = Timer()
                    with tm("sample"):
                        idx = np.sort(make_rng(seed, TRAIN_STREAM).choice(len(P), N, replace=False))
                    with tm("assemble"):
                        L = make_layer(3, M, cfg.r, cfg.box, seed=seed, index=LAYER_INDEX)
                        sysm = asm.assemble_static_levelset(_Frames(fr.normal[idx], fr.H[idx]), P[idx], L, f[idx])
                    with tm("solve"):
                        rep = asm.solve(sysm, _rcond(cfg.rcond))
                    with tm("evaluate"):
                        un = _values(L, rep.coefficients, P)
                        err = asm.relative_l2_error(un, u_ex, "reference_point", ref_index=0)
                    rows.append({"experiment": cfg.id, "point_set": name, "E_p": sets[f"ep_{name}"], "M": M,
                                 "N": N, "seed": seed, "error": err, "rank": rep.rank,
                                 "residual": rep.residual_norm, **tm.row()})
    return ExperimentResult(rows)


def run_heat_cheese(cfg: HeatCheeseConfig) -> ExperimentResult:
    sets = cheese_point_sets(cfg.n_all, cfg.ep_coarse, cfg.geometry_seed)
    T = time_grid(cfg.T, cfg.intervals)
    rows = []
    for name in cfg.point_sets:
        P = sets[name]
        fr = _cheese_frames(P)
        u_end = HEAT_SOLUTION.value(cfg.T, P)
        for M in cfg.M:
            for N in cfg.N:
                for seed in cfg.seeds:
                    tm = Timer()
                    with tm("sample"):
                        rng = make_rng(seed, TRAIN_STREAM)
                        pick = rng.choice(T.size * len(P), N, replace=False)
                        t, ix = T[pick // len(P)], pick % len(P)
                        i0 = rng.choice(len(P), cfg.N0, replace=False)
                        X = P[ix]
                        frs = _Frames(fr.normal[ix], fr.H[ix])
                        f = HEAT_SOLUTION.dt(t, X) - surface_laplacian(frs, HEAT_SOLUTION.grad(t, X),
                                                                        HEAT_SOLUTION.hess(t, X))
                    with tm("assemble"):
                        L = make_layer(4, M, cfg.r, cfg.box, seed=seed, index=LAYER_INDEX)
                        sysm = asm.assemble_heat_embedded(L, t, X, frs, f, P[i0], HEAT_SOLUTION.value(0, P[i0]),
                                                          beta=cfg.beta)
                    with tm("solve"):
                        rep = asm.solve(sysm, _rcond(cfg.rcond))
                    with tm("evaluate"):
                        un = _values(L, rep.coefficients, np.column_stack([np.full(len(P), cfg.T), P]))
                        err = asm.relative_l2_error(un, u_end)
                    rows.append({"experiment": cfg.id, "point_set": name, "M": M, "N": N, "N0": cfg.N0,
                                 "seed": seed, "error": err, "rank": rep.rank, "residual": rep.residual_norm,
                                 **tm.row()})
    return ExperimentResult(rows)


# ---------------------------------------------------------------- ex4: cup

def run_cup(cfg: CupConfig) -> ExperimentResult:
    atlas = cup_atlas()
    tm = Timer()

    def f(t, X):
        bump = np.exp(-(X[:, 0] ** 2 + X[:, 1] ** 2 + (X[:, 2] + 1.1) ** 2))
        return cfg.source_amplitude * bump * (np.asarray(t) <= cfg.source_off)

    with tm("sample"):
        ts = np.linspace(0.0, 1.0, cfg.n)
        interior, initial = {}, {}
        for i, ch in enumerate(atlas.charts):
            xi = grid_on_chart(ch, cfg.n)
            interior[i] = (np.repeat(ts, len(xi)), np.tile(xi, (ts.size, 1)))
            initial[i] = xi
        rim = atlas.boundaries[0]
        xe = rim.edge_points(cfg.n)
        robin = (np.repeat(ts, len(xe)), np.tile(xe, (ts.size, 1)), cfg.robin_value, cfg.beta)
    with tm("assemble"):
        L = make_layer(4, cfg.M, cfg.r, cfg.box, seed=cfg.seed, index=LAYER_INDEX)
        sysm = asm.assemble_heat_atlas(atlas, L, f, lambda X: np.full(len(X), cfg.u0), interior, initial,
                                       beta=cfg.beta, diffusivity=cfg.diffusivity, robin=robin)
    with tm("solve"):
        rep = asm.solve(sysm, _rcond(cfg.rcond))
    with tm("evaluate"):
        snaps = []
        for t in cfg.snapshot_times:
            for i, ch in enumerate(atlas.charts):
                X = ch.evaluate(grid_on_chart(ch, 41), need_second=False)[0]
                u = _values(L, rep.coefficients, np.column_stack([np.full(len(X), t), X]))
                snaps.append((t, i, X, u))
        res = sysm.A @ rep.coefficients - sysm.rhs
        group_rms = {k: float(np.sqrt(np.mean(res[asm_slice(g)] ** 2))) for k, g in sysm.groups.items()}
    rows = []
    for t in cfg.snapshot_times:
        u = np.concatenate([s[3] for s in snaps if s[0] == t])
        rows.append({"experiment": cfg.id, "M": cfg.M, "t": t, "u_min": float(u.min()),
                     "u_max": float(u.max()), "u_mean": float(u.mean()), "rank": rep.rank,
                     "residual": rep.residual_norm, **tm.row()})
    return ExperimentResult(rows, extra={"snapshots": snaps, "group_rms": group_rms})


def asm_slice(g):
    return slice(g.start, g.stop)


# ---------------------------------------------------------------- ex5: point-cloud heat

def synthetic_bunny_cloud(n: int, source_center=(0.068, 0.06, 0.01)) -> np.ndarray:
    """Ellipsoidal stand-in of bunny scale passing through the source point."""
    c = np.array([-0.015, 0.1, 0.0])
    d = np.asarray(source_center) - c
    b, cc = 0.1, 0.07
    a = abs(d[0]) / np.sqrt(1.0 - (d[1] / b) ** 2 - (d[2] / cc) ** 2)
    return fibonacci_surface(n, (a, b, cc)) + c


def run_bunny(cfg: BunnyConfig) -> ExperimentResult:
    tm = Timer()
    with tm("sample"):
        if cfg.cloud:
            cloud = load_cloud(cfg.cloud)
        else:
            cloud = PointCloudSurface.from_points(synthetic_bunny_cloud(cfg.synthetic_points, cfg.source_center),
                                                  source="synthetic")
        frames = fit_frames(cloud, cfg.k, cfg.orientation)
        good = np.flatnonzero(frames.ok)
        rng = make_rng(cfg.seed, TRAIN_STREAM)
        ix = good[rng.integers(0, good.size, cfg.N)]
        t = rng.random(cfg.N)
        i0 = good[rng.choice(good.size, min(cfg.N0, good.size), replace=False)]
        X = cloud.points[ix]
        s = cfg.source_sharpness
        src = lambda X: cfg.source_amplitude * np.exp(-np.sum((s * (X - np.asarray(cfg.source_center))) ** 2, axis=1))
    with tm("assemble"):
        L = make_layer(4, cfg.M, cfg.r, cfg.box, seed=cfg.seed, index=LAYER_INDEX)
        sysm = asm.assemble_heat_embedded(L, t, X, _Frames(frames.normal[ix], frames.H[ix]), src(X),
                                          cloud.points[i0], np.zeros(i0.size), beta=cfg.beta,
                                          diffusivity=cfg.diffusivity)
    with tm("solve"):
        rep = asm.solve(sysm, _rcond(cfg.rcond))
    rows, snaps = [], []
    with tm("evaluate"):
        P = cloud.points
        near = np.linalg.norm(P - np.asarray(cfg.source_center), axis=1) < 0.02
        for tt in cfg.snapshot_times:
            u = _values(L, rep.coefficients, np.column_stack([np.full(len(P), tt), P]))
            snaps.append((tt, u))
            rows.append({"experiment": cfg.id, "M": cfg.M, "N": cfg.N, "t": tt, "points": len(P),
                         "frames_failed": int((~frames.ok).sum()), "u_near_source": float(u[near].mean()),
                         "u_far": float(u[~near].mean()), "u_max": float(u.max()), "rank": rep.rank,
                         "residual": rep.residual_norm})
    for r in rows:
        r.update(tm.row())
    return ExperimentResult(rows, extra={"snapshots": snaps, "points": cloud.points, "frames": frames})


# ---------------------------------------------------------------- ex6/ex7: evolving surfaces

def flow_errors(model, surface, t, X0_test, exact_position, exact_surface):
    Xn = model.position(t, X0_test)
    Xe = exact_position(t, X0_test)
    fr = ev.evolving_frame(model, surface, t, X0=X0_test)
    ex = frame_at(exact_surface(t), Xe)
    rel = lambda a, b: float(np.linalg.norm(a - b) / np.linalg.norm(b))
    return {"E_x": rel(Xn, Xe), "E_n": rel(fr.normal, ex.normal), "E_H": rel(fr.H, ex.H)}


def _pde_point_sets(N0, axes, seed, rotate, n_times):
    if not rotate:
        return fibonacci_surface(N0, axes)
    return [fibonacci_surface(N0, axes, seed=seed, index=k) for k in range(n_times)]


def _ellipsoid_source(vel):
    U = HEAT_SOLUTION

    def f(t, X, frame):
        out = np.empty(len(X))
        for tv in np.unique(t):
            m = t == tv
            Xm = X[m]
            e = frame_at(oscillating_ellipsoid(tv), Xm)
            J = vel.jacobian(tv, Xm)
            div = np.trace(J, axis1=1, axis2=2) - np.einsum("ni,nij,nj->n", e.normal, J, e.normal)
            g = U.grad(tv, Xm)
            out[m] = (U.dt(tv, Xm) + np.einsum("ni,ni->n", vel(tv, Xm), g) + U.value(tv, Xm) * div
                      - surface_laplacian(e, g, U.hess(tv, Xm)))
        return out

    return f


def learn_ellipsoid_flow(cfg: EllipsoidConfig, N0: int):
    surf = ev.InitialSurface(tuple(cfg.axes))
    vel = ev.ellipsoid_oscillation()
    comps = ev.make_flow_components(cfg.flow_widths, [(0,), (1,), (2,)], cfg.flow_r_t, cfg.flow_r_x,
                                    [[b] for b in cfg.flow_boxes], cfg.T, seed=cfg.seed)
    X0 = fibonacci_surface(N0, cfg.axes)
    model = ev.learn_flow(X0, np.linspace(0.0, cfg.T, N0), vel, comps, beta=cfg.beta, rcond=_rcond(cfg.rcond))
    return surf, vel, model


def run_ellipsoid(cfg: EllipsoidConfig) -> ExperimentResult:
    rows, models = [], {}
    lvl = logging.getLogger("surfrann.geometry_levelset")
    prev = lvl.level
    lvl.setLevel(logging.ERROR)
    try:
        X0t = random_sphere_points(cfg.n_test, cfg.seed, cfg.axes)
        exact_pos = lambda t, X: X * np.array([ev.oscillation_scale(t), 1.0, 1.0])
        for N0 in cfg.N0:
            tm = Timer()
            with tm("solve"):
                surf, vel, model = learn_ellipsoid_flow(cfg, N0)
            with tm("evaluate"):
                errs = flow_errors(model, surf, cfg.T, X0t, exact_pos, oscillating_ellipsoid)
            models[N0] = model
            rows.append({"experiment": cfg.id, "stage": "flow", "widths": "/".join(map(str, cfg.flow_widths)),
                         "M": cfg.flow_widths[0], "N0": N0, "N": N0 * N0, **errs, "error": errs["E_x"],
                         "rank": model.report.ranks[0], "residual": model.report.residual_norm, **tm.row()})
            if not cfg.solve_pde:
                continue
            times = np.linspace(0.0, cfg.T, N0)
            X0 = fibonacci_surface(N0, cfg.axes)
            sets = _pde_point_sets(N0, cfg.axes, cfg.seed, cfg.rotate_lattices, times.size)
            Xe = exact_pos(cfg.T, X0t)
            for M in cfg.M:
                tm = Timer()
                with tm("solve"):
                    L = make_layer(4, M, cfg.r, cfg.box, seed=cfg.seed, index=cfg.layer_index)
                    sol = ev.solve_evolving_pde(model, surf, L, _ellipsoid_source(vel),
                                                lambda X: HEAT_SOLUTION.value(0, X), times, sets, beta=cfg.beta,
                                                rcond=_rcond(cfg.rcond), X0_initial=X0)
                with tm("evaluate"):
                    err = asm.relative_l2_error(sol(cfg.T, Xe), HEAT_SOLUTION.value(cfg.T, Xe))
                rows.append({"experiment": cfg.id, "stage": "pde", "widths": "/".join(map(str, cfg.flow_widths)),
                             "M": M, "N0": N0, "N": N0 * N0, "E_x": np.nan, "E_n": np.nan, "E_H": np.nan,
                             "error": err, "rank": sol.report.rank, "residual": sol.report.residual_norm,
                             **tm.row()})
    finally:
        lvl.setLevel(prev)
    return ExperimentResult(rows, extra={"models": models})


def learn_droplet_flow(cfg: DropletConfig, N0: int):
    surf = ev.InitialSurface((1.0, 1.0, 1.0))
    vel = ev.shear_flow()
    comps = ev.make_flow_components(cfg.flow_widths, [(0, 2), (1,), (2,)], cfg.flow_r, cfg.flow_r,
                                    [[(-1, 1), (-1, 1)], [(-1, 1)], [(-1, 1)]], cfg.T, seed=cfg.seed)
    X0 = fibonacci_sphere(N0)
    model = ev.learn_flow(X0, np.linspace(0.0, cfg.T, N0), vel, comps, beta=cfg.beta, rcond=_rcond(cfg.rcond))
    return surf, vel, model


def run_droplet(cfg: DropletConfig) -> ExperimentResult:
    rows, extra = [], {}
    X0t = random_sphere_points(cfg.n_test, cfg.seed)

    def exact_pos(t, X):
        Y = X.copy()
        Y[:, 0] += t * X[:, 2]
        return Y

    for N0 in cfg.N0:
        tm = Timer()
        with tm("solve"):
            surf, vel, model = learn_droplet_flow(cfg, N0)
        with tm("evaluate"):
            errs = flow_errors(model, surf, cfg.T, X0t, exact_pos, sheared_sphere)
        rows.append({"experiment": cfg.id, "stage": "flow", "widths": "/".join(map(str, cfg.flow_widths)),
                     "M": cfg.flow_widths[0], "N0": N0, "N": N0 * N0, **errs, "error": errs["E_x"],
                     "rank": model.report.ranks[0], "residual": model.report.residual_norm, **tm.row()})
        extra["model"] = model
    if cfg.solve_pde:
        N0 = cfg.N0[-1]
        times = np.linspace(0.0, cfg.T, N0)
        sets = _pde_point_sets(N0, (1.0, 1.0, 1.0), cfg.seed, cfg.rotate_lattices, times.size)
        tm = Timer()
        with tm("solve"):
            L = make_layer(4, cfg.M, cfg.r, cfg.box, seed=cfg.seed, index=cfg.layer_index)
            sol = ev.solve_evolving_pde(model, surf, L, lambda t, X, fr: np.zeros(len(X)),
                                        lambda X: np.ones(len(X)), times, sets, beta=cfg.beta,
                                        rcond=_rcond(cfg.rcond), X0_initial=fibonacci_sphere(N0))
        with tm("evaluate"):
            ts = np.linspace(0.0, cfg.T, cfg.conservation_samples)
            series = ev.conservation_report(model, surf, ts, sol, cfg.quad_order)
        rows.append({"experiment": cfg.id, "stage": "pde", "widths": "/".join(map(str, cfg.flow_widths)),
                     "M": cfg.M, "N0": N0, "N": N0 * N0, "E_x": np.nan, "E_n": np.nan, "E_H": np.nan,
                     "error": float(series.E_m.max()), "max_E_V": float(series.E_V.max()),
                     "max_E_m": float(series.E_m.max()), "rank": sol.report.rank,
                     "residual": sol.report.residual_norm, **tm.row()})
        extra.update(solution=sol, conservation=series)
        P0 = fibonacci_sphere(cfg.snapshot_points)
        extra["snapshots"] = [(t, ev.evolving_frame(model, surf, t, X0=P0)) for t in cfg.snapshot_times]
    return ExperimentResult(rows, extra=extra)


# ---------------------------------------------------------------- point sets

@dataclass
class SampleConfig:
    id: str = "sample"
    surface: str = "cheese"
    count: int = 21192
    seed: int = 0
    perturb: float = 0.0                 # > 0: push points off the surface to this E_p
    project: bool = True                 # Newton-project the (perturbed) set back
    format: str = "xyz"                  # or "ply"


def run_sample(cfg: SampleConfig) -> ExperimentResult:
    from .geometry_levelset import REGISTRY

    if cfg.surface not in REGISTRY:
        raise ValueError(f"unknown surface {cfg.surface!r}; choose from {sorted(REGISTRY)}")
    S = REGISTRY[cfg.surface]()
    tm = Timer()
    with tm("sample"):
        X = sample_levelset(S, cfg.count, cfg.seed)
        if cfg.perturb > 0:
            X = perturb_off_surface(S, X, cfg.perturb, cfg.seed)
        rep = project_to_surface(S, X) if cfg.project else None
    pts = rep.points if rep is not None else X
    row = {"experiment": cfg.id, "surface": cfg.surface, "N": len(pts), "seed": cfg.seed,
           "E_p_before": rms_residual(S, X), "E_p": rms_residual(S, pts), **tm.row()}
    return ExperimentResult([row], extra={"points": pts, "projection": rep})


EXPERIMENTS = {
    "ex1_torus": (TorusConfig, run_torus),
    "ex2_cheese": (CheeseConfig, run_cheese),
    "ex3_heat_cheese": (HeatCheeseConfig, run_heat_cheese),
    "ex4_cup": (CupConfig, run_cup),
    "ex5_bunny": (BunnyConfig, run_bunny),
    "ex6_ellipsoid": (EllipsoidConfig, run_ellipsoid),
    "ex7_droplet": (DropletConfig, run_droplet),
}


# ---------------------------------------------------------------- output

TIMING_PREFIX = "t_"


def write_rows(path, rows) -> None:
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def read_rows(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))

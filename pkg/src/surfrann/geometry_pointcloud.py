"""Point-cloud geometry: per-point normals and mean curvature from local quadratic fits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

K_DEFAULT = 20
RANK_TOL = 1e-10


class CloudParseError(ValueError):
    pass


@dataclass
class PointCloudSurface:
    points: np.ndarray
    duplicates_removed: int = 0
    source: str = ""
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be (N, 3)")
        self.tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def from_points(cls, points, source: str = "") -> "PointCloudSurface":
        P = np.asarray(points, dtype=float)
        _, first = np.unique(P, axis=0, return_index=True)
        keep = np.sort(first)
        return cls(P[keep], duplicates_removed=int(P.shape[0] - keep.size), source=source)


@dataclass
class FittedFrames:
    normal: np.ndarray     # (N, 3) unit
    H: np.ndarray          # (N,), NaN where the fit failed
    residual: np.ndarray   # (N,) RMS height-field residual
    ok: np.ndarray         # (N,) bool
    k: int
    orientation: str

    def to_csv(self, path, points) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "z", "nx", "ny", "nz", "H", "residual"])
            for p, n, h, r in zip(points, self.normal, self.H, self.residual):
                w.writerow([*(repr(float(v)) for v in p), *(repr(float(v)) for v in n),
                            repr(float(h)), repr(float(r))])


def fit_frames(cloud: PointCloudSurface, k: int = K_DEFAULT, orientation: str = "centroid",
               chunk: int = 20000) -> FittedFrames:
    """Normal and mean curvature at every point from a quadratic height fit.

    The fit uses the ``k`` nearest neighbours (the point itself included),
    expressed in the PCA frame of the neighbourhood. ``H`` is reported for
    the final (oriented) normal with the convention ``H = div(n) / 2``.
    """
    if k < 6:
        raise ValueError("k must be >= 6 for a quadratic fit")
    if orientation not in ("centroid", "mst"):
        raise ValueError(f"unknown orientation policy {orientation!r}")
    P = cloud.points
    N = P.shape[0]
    normal = np.full((N, 3), np.nan)
    H = np.full(N, np.nan)
    res = np.full(N, np.nan)
    ok = np.zeros(N, bool)
    if N < k:
        return FittedFrames(normal, H, res, ok, k, orientation)

    for s in range(0, N, chunk):
        sl = slice(s, min(N, s + chunk))
        _, idx = cloud.tree.query(P[sl], k=k)
        D = P[idx] - P[sl][:, None, :]
        C = D - D.mean(axis=1, keepdims=True)
        _, vec = np.linalg.eigh(np.einsum("nki,nkj->nij", C, C))
        npca, e1, e2 = vec[:, :, 0], vec[:, :, 2], vec[:, :, 1]
        scale = np.sqrt(np.mean(np.sum(D * D, axis=2), axis=1))[:, None]
        scale[scale == 0] = 1.0
        u = np.einsum("nki,ni->nk", D, e1) / scale
        v = np.einsum("nki,ni->nk", D, e2) / scale
        h = np.einsum("nki,ni->nk", D, npca) / scale
        V = np.stack([u * u, u * v, v * v, u, v, np.ones_like(u)], axis=2)
        U_, sv, Vt = np.linalg.svd(V, full_matrices=False)
        good = sv[:, -1] > RANK_TOL * sv[:, 0]
        coef = np.einsum("nji,nj->ni", Vt, np.einsum("nkj,nk->nj", U_, h) / np.where(good[:, None], sv, 1.0))
        r = h - np.einsum("nkj,nj->nk", V, coef)
        a, b, c, d, e = (coef[:, j] for j in range(5))
        sc = scale[:, 0]
        hss, hst, htt = 2 * a / sc, b / sc, 2 * c / sc
        W = 1.0 + d * d + e * e
        # mean curvature w.r.t. the graph normal (-h_s, -h_t, 1)/sqrt(W); negated so a cap
        # bending away from that normal (sphere seen from outside) gives H > 0
        Hg = -((1 + e * e) * hss - 2 * d * e * hst + (1 + d * d) * htt) / (2 * W ** 1.5)
        n = (-d[:, None] * e1 - e[:, None] * e2 + npca) / np.sqrt(W)[:, None]
        normal[sl] = np.where(good[:, None], n, npca)
        H[sl] = np.where(good, Hg, np.nan)
        res[sl] = np.sqrt(np.mean(r * r, axis=1)) * sc
        ok[sl] = good & np.isfinite(Hg)

    flip = _orientation_flips(P, normal, orientation, k, cloud.tree)
    normal[flip] *= -1
    H[flip] *= -1
    return FittedFrames(normal, H, res, ok, k, orientation)


def _orientation_flips(P, normal, policy, k, tree) -> np.ndarray:
    centroid = P.mean(axis=0)
    if policy == "centroid":
        return np.einsum("ni,ni->n", normal, P - centroid) < 0
    N = P.shape[0]
    kk = min(k, N)
    _, idx = tree.query(P, k=kk)
    rows = np.repeat(np.arange(N), kk - 1)
    cols = idx[:, 1:].ravel()
    w = 1.0 - np.abs(np.einsum("ni,ni->n", normal[rows], normal[cols])) + 1e-9
    G = coo_matrix((w, (rows, cols)), shape=(N, N)).tocsr()
    G = G.maximum(G.T)
    T = minimum_spanning_tree(G)
    T = T + T.T
    ncomp, labels = connected_components(T, directed=False)
    sign = np.ones(N)
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        cc = P[members].mean(axis=0)
        root = members[np.argmax(np.linalg.norm(P[members] - cc, axis=1))]
        sign[root] = 1.0 if normal[root] @ (P[root] - cc) >= 0 else -1.0
        order, pred = breadth_first_order(T, root, directed=False)
        for node in order[1:]:
            p = pred[node]
            sign[node] = sign[p] if normal[node] @ normal[p] >= 0 else -sign[p]
    return sign < 0


def orientation_coherence(cloud: PointCloudSurface, frames: FittedFrames, k: int = 6) -> float:
    """Fraction of nearest-neighbour pairs whose normals agree in sign."""
    _, idx = cloud.tree.query(cloud.points, k=k)
    dots = np.einsum("ni,nki->nk", frames.normal, frames.normal[idx[:, 1:]])
    return float(np.mean(dots > 0))


# ---------------------------------------------------------------- I/O

def _parse_xyz(lines, start=0):
    out = []
    for ln, raw in enumerate(lines, start=start + 1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.replace(",", " ").split()
        try:
            if len(parts) < 3:
                raise ValueError
            out.append([float(v) for v in parts[:3]])
        except ValueError:
            raise CloudParseError(f"line {ln}: expected three coordinates, got {raw.rstrip()!r}") from None
    return out


def _parse_ply(lines):
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError("line 1: missing 'ply' magic")
    nvert, props, in_vertex, end = None, [], False, None
    for ln, raw in enumerate(lines[1:], start=2):
        s = raw.split()
        if not s:
            continue
        if s[0] == "format" and s[1] != "ascii":
            raise CloudParseError(f"line {ln}: only ASCII PLY is supported")
        if s[0] == "element":
            in_vertex = s[1] == "vertex"
            if in_vertex:
                nvert = int(s[2])
        elif s[0] == "property" and in_vertex:
            props.append(s[-1])
        elif s[0] == "end_header":
            end = ln
            break
    if end is None or nvert is None:
        raise CloudParseError("PLY header without vertex element or end_header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise CloudParseError("PLY vertex element lacks x, y, z properties") from None
    out = []
    for ln in range(end, end + nvert):
        if ln >= len(lines):
            raise CloudParseError(f"line {ln + 1}: file ends before {nvert} vertices")
        parts = lines[ln].split()
        try:
            out.append([float(parts[c]) for c in cols])
        except (ValueError, IndexError):
            raise CloudParseError(f"line {ln + 1}: malformed vertex {lines[ln].rstrip()!r}") from None
    return out


def load_cloud(path) -> PointCloudSurface:
    """Read an XYZ or ASCII PLY file, dropping duplicate points."""
    path = Path(path)
    lines = path.read_text().splitlines()
    pts = _parse_ply(lines) if lines and lines[0].strip() == "ply" else _parse_xyz(lines)
    if not pts:
        raise CloudParseError(f"{path}: no points")
    return PointCloudSurface.from_points(np.array(pts), source=str(path))

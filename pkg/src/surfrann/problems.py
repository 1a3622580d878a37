"""Closed-form ambient test functions used to manufacture benchmark data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SinExpCos:
    """``u(t, x, y, z) = sin(x + s(t)) exp(cos(y - z))`` with ``s = sin`` or ``s = 0``.

    The static variant (``time_dependent=False``) is the Laplace-Beltrami
    benchmark solution; the time-dependent one drives the heat and evolving
    advection-diffusion benchmarks.
    """

    time_dependent: bool = True

    def _parts(self, t, X):
        X = np.atleast_2d(X)
        t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
        s = np.sin(t) if self.time_dependent else np.zeros_like(t)
        a = X[:, 0] + s
        q = X[:, 1] - X[:, 2]
        E = np.exp(np.cos(q))
        return t, np.sin(a), np.cos(a), q, E

    def value(self, t, X):
        _, S, _, _, E = self._parts(t, X)
        return S * E

    def dt(self, t, X):
        t, _, C, _, E = self._parts(t, X)
        if not self.time_dependent:
            return np.zeros_like(t)
        return C * np.cos(t) * E

    def grad(self, t, X):
        _, S, C, q, E = self._parts(t, X)
        sq = np.sin(q)
        return np.stack([C * E, -S * sq * E, S * sq * E], axis=1)

    def hess(self, t, X):
        _, S, C, q, E = self._parts(t, X)
        sq, cq = np.sin(q), np.cos(q)
        Ey = -sq * E
        Eyy = (sq * sq - cq) * E
        H = np.empty((S.shape[0], 3, 3))
        H[:, 0, 0] = -S * E
        H[:, 0, 1] = H[:, 1, 0] = C * Ey
        H[:, 0, 2] = H[:, 2, 0] = -C * Ey
        H[:, 1, 1] = S * Eyy
        H[:, 2, 2] = S * Eyy
        H[:, 1, 2] = H[:, 2, 1] = -S * Eyy
        return H


STATIC_SOLUTION = SinExpCos(time_dependent=False)
HEAT_SOLUTION = SinExpCos(time_dependent=True)

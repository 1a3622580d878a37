import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from surfrann.geometry_levelset import (CriticalPointError, cheese, frame_at, oscillating_ellipsoid,
                                        perturb_off_surface, plane, project_to_surface, rms_residual,
                                        sample_levelset, sheared_sphere, sphere, surface_gradient,
                                        surface_laplacian, torus)
from surfrann.sampling import fibonacci_sphere


def test_sphere_frame_sign_convention():
    fr = frame_at(sphere(), [[1.0, 0.0, 0.0]])
    assert np.allclose(fr.normal[0], [1, 0, 0]) and fr.H[0] == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(fr.P[0], np.diag([0, 1, 1]))
    fr2 = frame_at(sphere(2.0), [[0.0, 2.0, 0.0]])
    assert fr2.H[0] == pytest.approx(0.5, abs=1e-14)


def test_plane_is_flat():
    X = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    X[:, 2] = 0
    assert np.all(frame_at(plane(), X).H == 0)


def test_critical_point_rejected():
    with pytest.raises(CriticalPointError):
        frame_at(sphere(), [[0.0, 0.0, 0.0]])


@given(st.integers(0, 10_000))
def test_projector_properties(seed):
    X = sample_levelset(torus(), 50, seed)
    fr = frame_at(torus(), X)
    assert np.allclose(np.linalg.norm(fr.normal, axis=1), 1, atol=1e-12)
    assert np.allclose(fr.P @ fr.P, fr.P, atol=1e-12)
    assert np.allclose(fr.P, np.swapaxes(fr.P, 1, 2))
    assert np.allclose(np.einsum("nij,nj->ni", fr.P, fr.normal), 0, atol=1e-12)


def test_sphere_eigenfunction():
    X = fibonacci_sphere(200)
    fr = frame_at(sphere(), X)
    grad = np.tile([0.0, 0.0, 1.0], (200, 1))
    lap = surface_laplacian(fr, grad, np.zeros((200, 3, 3)))
    assert np.max(np.abs(lap + 2 * X[:, 2])) <= 1e-10
    zero = np.zeros((200, 3))
    assert np.all(surface_laplacian(fr, zero, np.zeros((200, 3, 3))) == 0)
    assert np.all(surface_gradient(fr, zero) == 0)


def test_sheared_sphere_and_ellipsoid_have_consistent_frames():
    t = 1.3
    X0 = fibonacci_sphere(100)
    X = X0.copy()
    X[:, 0] += t * X0[:, 2]
    S = sheared_sphere(t)
    assert np.max(np.abs(S.phi(X))) <= 1e-12
    fr = frame_at(S, X)
    assert np.all(np.einsum("ni,ni->n", fr.normal, X) > 0)
    E = oscillating_ellipsoid(0.0)
    assert np.max(np.abs(E.phi(X0 * [1.5, 1.0, 0.5]))) <= 1e-12


def test_projection_examples():
    rep = project_to_surface(sphere(), [[2.0, 0.0, 0.0]])
    assert np.allclose(rep.points, [[1, 0, 0]], atol=1e-13)
    X = fibonacci_sphere(50)
    rep = project_to_surface(sphere(), X)
    assert np.max(np.abs(rep.points - X)) <= 1e-15
    assert rep.ep_after <= rep.ep_before + 1e-300


@given(st.floats(1e-8, 1e-3), st.integers(0, 100))
def test_projection_monotone(ep, seed):
    S = torus()
    X = perturb_off_surface(S, sample_levelset(S, 200, seed), ep, seed)
    rep = project_to_surface(S, X)
    assert np.all(rep.residual_after <= rep.residual_before)
    assert rep.ep_after <= 1e-12


def test_sampling_statistics():
    X = sample_levelset(sphere(), 1000, 0)
    assert np.max(np.abs(sphere().phi(X))) <= 1e-12
    Y = sample_levelset(sphere(), 10_000, 1)
    assert np.linalg.norm(Y.mean(axis=0)) <= 0.05
    assert np.array_equal(sample_levelset(sphere(), 100, 7), sample_levelset(sphere(), 100, 7))


def test_cheese_point_sets():
    S = cheese()
    fine = sample_levelset(S, 21192, 0)
    assert fine.shape == (21192, 3) and rms_residual(S, fine) <= 1e-12
    coarse = perturb_off_surface(S, fine, 1.17e-5, 0)
    assert 0.5e-5 <= rms_residual(S, coarse) <= 2e-5
    assert project_to_surface(S, coarse).ep_after <= 1e-12

"""Curvature accuracy of the point-cloud frame fit on a unit sphere and a torus.

Usage: python3 scripts/pointcloud_curvature.py
"""
import numpy as np

from surfrann.geometry_levelset import frame_at, sample_levelset, torus
from surfrann.geometry_pointcloud import PointCloudSurface, fit_frames, orientation_coherence
from surfrann.sampling import fibonacci_sphere

for N in (2500, 5000, 10000, 20000):
    fr = fit_frames(PointCloudSurface.from_points(fibonacci_sphere(N)), k=20)
    print(f"sphere N={N:5d}  median |H-1| {np.median(np.abs(fr.H - 1)):.2e}")
T = torus()
P = sample_levelset(T, 20000, 0)
cloud = PointCloudSurface.from_points(P)
fr = fit_frames(cloud, k=20, orientation="mst")
ex = frame_at(T, P)
print(f"torus N=20000  median relative H error {np.median(np.abs(fr.H - ex.H) / np.abs(ex.H)):.2e}  "
      f"coherence {orientation_coherence(cloud, fr):.3f}")

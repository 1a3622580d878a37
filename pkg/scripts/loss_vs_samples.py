"""Empirical loss against its quadrature value as the sample count grows (penalized torus).

Usage: python3 scripts/loss_vs_samples.py
"""
from surfrann import assembly as asm
from surfrann.experiments import torus_source
from surfrann.features import make_layer
from surfrann.geometry_param import patch_function, torus_atlas
from surfrann.sampling import grid_on_chart

atlas = torus_atlas()
ch = atlas.charts[0]
L = make_layer(2, 600, 1.0, ch.domain, seed=0)
sysm = asm.assemble_static_atlas(atlas, [L], torus_source, "penalized", [grid_on_chart(ch, 40)])
broken = patch_function([L], [asm.solve(sysm).coefficients])
J = asm.population_loss(atlas, broken, torus_source)["total"]
print(f"quadrature loss {J:.6e}")
for n in (100, 1000, 10000, 100000):
    Jh = asm.empirical_loss(atlas, broken, torus_source, n, asm.default_edge_count(n), seed=1)
    print(f"N={n:6d}  empirical {Jh:.6e}  relative gap {abs(Jh - J) / J:.3f}")

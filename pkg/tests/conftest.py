"""Shared helpers: randomized micro instances for the cluster expansion."""

import numpy as np

from blockrg.cluster import ClusterModel, UltralocalMeasure, integrated_amplitudes
from blockrg.polymer import CubeTorus, Polymer


def random_cluster_model(rng, max_polymers=5, window=8, strength=0.04):
    """Random 1-D micro instance: interval polymers over at most `window` sites.

    Interval supports keep the family of Mayer unions small and the term
    magnitudes are rescaled below `strength`, so the truncated connected
    series is comparable to the brute-force partition function at 1e-10.
    """
    torus = CubeTorus(1, 3 * window)
    n_atoms = int(rng.integers(2, 4))
    points = sorted(float(x) for x in rng.uniform(-1.5, 1.5, n_atoms))
    weights = rng.dirichlet(np.ones(n_atoms))
    measure = UltralocalMeasure.from_atoms(points, weights, normalize=True)
    p_max = max(abs(p) for p in points)
    n_poly = int(rng.integers(2, max_polymers + 1))
    polymers = []
    values = []
    for _ in range(n_poly):
        length = int(rng.integers(1, 4))
        start = int(rng.integers(0, window - length + 1))
        polymers.append(Polymer(torus, tuple(range(start, start + length))))
        c = rng.uniform(-1.0, 1.0, 3)
        bound = abs(c[0]) + abs(c[1]) * length * p_max + abs(c[2]) * length * p_max**2
        c = c * (strength / bound)

        def h(vals, c0=c[0], c1=c[1], c2=c[2]):
            return c0 + c1 * vals.sum(axis=1) + c2 * (vals**2).sum(axis=1)

        values.append(h)
    cube_sites = tuple((c,) if c < window else () for c in range(torus.n_cubes))
    model = ClusterModel(torus, cube_sites, measure, tuple(polymers), tuple(values))
    assert len(integrated_amplitudes(model)) <= 20
    return model

"""Block averaging between lattice scales and its exact algebra.

The one-step average assigns to each coarse site the arithmetic mean of the
L^d fine sites in its block; k-fold composition averages over L^(kd) sites.
The adjoint with respect to the weighted inner products is the piecewise
constant extension.  Averaging a constant returns it, the composite of the
average with the extension is the identity on coarse fields, and the
extension followed by the average is an orthogonal projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from blockrg.lattice import DENSE_SITE_CAP, Field, TorusLattice, scale_field


@dataclass(frozen=True)
class BlockMap:
    """levels-fold block average from ``fine`` to ``fine.coarsened(levels)``."""

    fine: TorusLattice
    levels: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        # the coarse lattice must still have sites
        self.fine.coarsened(self.levels)

    @property
    def coarse(self) -> TorusLattice:
        return self.fine.coarsened(self.levels)

    @property
    def block_sites_per_axis(self) -> int:
        return self.fine.block**self.levels

    @property
    def sites_per_block(self) -> int:
        return self.block_sites_per_axis**self.fine.dim

    def _split_shape(self):
        nc = self.coarse.sites_per_side
        b = self.block_sites_per_axis
        shape = []
        for _ in range(self.fine.dim):
            shape.extend((nc, b))
        return tuple(shape)

    def apply_q(self, values) -> np.ndarray:
        """Block means: fine values -> coarse values."""
        v = np.asarray(values).reshape(self._split_shape())
        axes = tuple(range(1, 2 * self.fine.dim, 2))
        return v.mean(axis=axes).reshape(-1)

    def apply_qt(self, values) -> np.ndarray:
        """Piecewise constant extension: coarse values -> fine values.

        This is the adjoint of apply_q for the weighted inner products, and
        it is an isometry: the weighted norm of the extension equals the
        weighted norm of the coarse field.
        """
        b = self.block_sites_per_axis
        grid = np.asarray(values).reshape(self.coarse.shape)
        for mu in range(self.fine.dim):
            grid = np.repeat(grid, b, axis=mu)
        return grid.reshape(-1)

    def q_matrix(self):
        nf, nc = self.fine.n_sites, self.coarse.n_sites
        cols = self.block_of_site(np.arange(nf))
        vals = np.full(nf, 1.0 / self.sites_per_block)
        if max(nf, nc) <= DENSE_SITE_CAP:
            m = np.zeros((nc, nf))
            m[cols, np.arange(nf)] = vals
            return m
        return sp.csr_array((vals, (cols, np.arange(nf))), shape=(nc, nf))

    def qt_matrix(self):
        """Matrix of the weighted adjoint (the extension); entries are ones."""
        q = self.q_matrix()
        return q.T * float(self.sites_per_block)

    def projector_matrix(self):
        """Extension of the block mean: orthogonal projection on fine fields."""
        return self.qt_matrix() @ self.q_matrix()

    def block_of_site(self, fine_flat):
        """Coarse flat index owning each fine site."""
        multi = self.fine.coords(fine_flat) // self.block_sites_per_axis
        return self.coarse.flat_index(multi)

    def average_field(self, field: Field) -> Field:
        if field.lattice != self.fine:
            raise ValueError("field lives on a different lattice")
        return Field(self.coarse, self.apply_q(field.values))

    def extend_field(self, field: Field) -> Field:
        if field.lattice != self.coarse:
            raise ValueError("field lives on a different lattice")
        return Field(self.fine, self.apply_qt(field.values))


def compose(first: BlockMap, second: BlockMap) -> BlockMap:
    """Composite of two averages; second must start where first lands."""
    if second.fine != first.coarse:
        raise ValueError("block maps do not chain")
    return BlockMap(first.fine, first.levels + second.levels)


def scale_commutation_check(field: Field, rng=None) -> float:
    """Max abs difference between averaging then rescaling and the reverse order.

    Both orders are exact integer reindexings followed by the same scalar
    factor, so the return value is zero up to floating point roundoff.
    """
    up_then_avg = BlockMap(field.lattice.rescaled(up=True)).apply_q(scale_field(field, up=True).values)
    avg_then_up = scale_field(Field(field.lattice.coarsened(1), BlockMap(field.lattice).apply_q(field.values)), up=True).values
    return float(np.max(np.abs(up_then_avg - avg_then_up)))

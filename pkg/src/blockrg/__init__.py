"""Block-spin renormalization group machinery on periodic lattices.

Small, numerically exact instances of the multiscale objects used in
rigorous block-spin analyses of lattice scalar field theory: block
averaging and its algebra, the Gaussian free flow, random-walk expansions
of constrained propagators, polymer geometry, local functionals with
reblocking and normalization, a convergent cluster expansion engine, one
complete renormalization step, and the backward/forward coupling flow.
"""

from blockrg.lattice import TorusLattice, Field, Region
from blockrg.averaging import BlockMap
from blockrg.gaussian_flow import GaussParams

__all__ = ["TorusLattice", "Field", "Region", "BlockMap", "GaussParams"]

__version__ = "0.1.0"

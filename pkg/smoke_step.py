import time

import numpy as np

from blockrg.functional import FunctionalGeometry, LocalFunctional, MonomialTerm
from blockrg.gaussian_flow import GaussParams
from blockrg.lattice import TorusLattice
from blockrg.polymer import Polymer
from blockrg.rg_step import (
    FlowState,
    ResponseKernel,
    StepControls,
    delta_eplus,
    fluctuation_integral,
    localization_expansion,
    rg_step,
)

lat = TorusLattice(1, 3, 2, 1)
params = GaussParams(lat, 1.0, 0.2, 1)
geom = FunctionalGeometry(lat, 0)
grid = geom.grid

terms = {geom.polymer((c,)): (MonomialTerm(1e-4, 4), MonomialTerm(2e-4, 2)) for c in range(grid.n_cubes)}
interaction = LocalFunctional.from_dict(geom, terms)

state = FlowState(params, 0, 1e-3, mass_coeff=1e-2, interaction=interaction)
print("hypothesis:", state.hypothesis_report(0.5))

controls = StepControls(measure_nodes=3)

t0 = time.perf_counter()
kernel = ResponseKernel.build(params, 1, controls)
t1 = time.perf_counter()
print("kernel build %.2fs" % (t1 - t0))
print("diagnostics:", kernel.diagnostics)

rng = np.random.default_rng(0)
phi = 0.05 * rng.standard_normal(lat.n_sites)
w_fine = 0.05 * rng.standard_normal(lat.n_sites)
poly = geom.polymer((0, 1))
rep = delta_eplus(state, poly, phi, w_fine)
print("delta_eplus:", rep)

w_unit = 0.05 * rng.standard_normal(state.params.unit_lattice.n_sites)
t0 = time.perf_counter()
loc = localization_expansion(state, (0,), phi, w_unit, kernel=kernel, controls=controls)
t1 = time.perf_counter()
print("localization %.2fs" % (t1 - t0))
print("  telescope_error:", loc["telescope_error"])
print("  route_gap:", loc["route_gap"])
print("  w_locality:", loc["w_locality"])
print("  disconnected_max:", loc["disconnected_max"])
print("  halo_error:", loc["halo_error"])
print("  terms:", loc["terms"])

t0 = time.perf_counter()
fl = fluctuation_integral(state, np.zeros(lat.n_sites), kernel=kernel, controls=controls)
t1 = time.perf_counter()
print("fluctuation %.2fs" % (t1 - t0))
print("  cross_error:", fl["cross_error"])
print("  epsilon0:", fl["epsilon0"], "closed:", fl["epsilon0_closed"])
print("  log_xi_cluster:", fl["log_xi_cluster"], "direct:", fl["log_xi_direct"])
print("  assembly_residual:", fl["assembly_residual"])
print("  amplitudes:", fl["amplitudes"])

t0 = time.perf_counter()
state_next, report = rg_step(state, controls)
t1 = time.perf_counter()
print("rg_step %.2fs" % (t1 - t0))
print("  coupling_next:", state_next.coupling)
print("  mass_next:", state_next.mass_coeff)
print("  energy_next:", state_next.energy)
print("  invariants:", report["invariants"])
print("  bounds:", {k: (v["value"], v["envelope"], v["ok"]) for k, v in report["bounds"].items()})
print("  timings:", report["timings"])

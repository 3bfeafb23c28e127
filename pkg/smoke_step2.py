import time

import numpy as np

from blockrg.functional import FunctionalGeometry, LocalFunctional, MonomialTerm
from blockrg.gaussian_flow import GaussParams
from blockrg.lattice import TorusLattice
from blockrg.rg_step import (
    FlowState,
    LocalizationHaloError,
    ResponseKernel,
    StepControls,
    StepHypothesisError,
    cauchy_derivatives,
    fluctuation_integral,
    localization_expansion,
    rg_step,
)

# --- serialization round trip ---
lat = TorusLattice(1, 3, 2, 1)
params = GaussParams(lat, 1.0, 0.2, 1)
geom = FunctionalGeometry(lat, 0)
terms = {geom.polymer((c,)): (MonomialTerm(1e-4, 4), MonomialTerm(2e-4, 2)) for c in range(3)}
interaction = LocalFunctional.from_dict(geom, terms)
state = FlowState(params, 0, 1e-3, mass_coeff=1e-2, interaction=interaction)
d = state.to_dict()
state2 = FlowState.from_dict(d)
print("roundtrip equal:", state2.to_dict() == d)
c = StepControls(measure_nodes=3)
print("controls roundtrip:", StepControls.from_dict(c.to_dict()) == c)
try:
    StepControls.from_dict({"measure_nodes": 3, "bogus": 1})
except ValueError as e:
    print("controls unknown key rejected:", e)

# --- hypothesis refusal ---
bad = FlowState(params, 0, 1e-3, mass_coeff=0.5)
try:
    rg_step(bad, StepControls(measure_nodes=3))
except StepHypothesisError as e:
    print("refusal:", e)

# --- free theory: lambda=0 with override cutoff ---
free = FlowState(params, 0, 0.0, mass_coeff=0.0)
controls = StepControls(measure_nodes=3, p0_override=6.0)
t0 = time.perf_counter()
nxt, rep = rg_step(free, controls)
print("free rg_step %.2fs" % (time.perf_counter() - t0))
print("  free next:", nxt.coupling, nxt.mass_coeff, nxt.energy, nxt.interaction)
print("  free eps0:", rep["fluctuation"]["epsilon0"], rep["fluctuation"]["cross_error_zero"])

# --- instance S (se=1): fluctuation with richer measure ---
lat_s = TorusLattice(1, 3, 1, 1)
params_s = GaussParams(lat_s, 1.0, 0.2, 1)
geom_s = FunctionalGeometry(lat_s, 0)
terms_s = {geom_s.polymer((c,)): (MonomialTerm(1e-4, 4),) for c in range(3)}
state_s = FlowState(params_s, 0, 1e-3, interaction=LocalFunctional.from_dict(geom_s, terms_s))
ctrl_s = StepControls(measure_nodes=12)
t0 = time.perf_counter()
kern_s = ResponseKernel.build(params_s, 1, ctrl_s)
fl = fluctuation_integral(state_s, np.zeros(lat_s.n_sites), kern_s, ctrl_s)
print("instance S fluct %.2fs cross=%.3e eps0=%.6f closed=%.3e" % (
    time.perf_counter() - t0, fl["cross_error"], fl["epsilon0"], fl["epsilon0_closed"]))

# --- cauchy derivatives on instance S ---
t0 = time.perf_counter()
cd = cauchy_derivatives(state_s, StepControls(measure_nodes=4))
print("cauchy %.2fs" % (time.perf_counter() - t0))
for k, v in cd.items():
    print("  ", k, v if not isinstance(v, dict) else {kk: vv for kk, vv in v.items() if not isinstance(vv, np.ndarray)})

# --- locality showcase: se=3, 9 enlarged cubes ---
lat_l = TorusLattice(1, 3, 3, 1)
params_l = GaussParams(lat_l, 1.0, 0.2, 1)
geom_l = FunctionalGeometry(lat_l, 0)
terms_l = {geom_l.polymer((c,)): (MonomialTerm(1e-4, 4),) for c in range(geom_l.cube_torus.n_cubes)}
state_l = FlowState(params_l, 0, 1e-3, interaction=LocalFunctional.from_dict(geom_l, terms_l))
ctrl_l = StepControls(measure_nodes=3, walk_orders=10, r_nodes=8, halo=1, quad_nodes=4)
t0 = time.perf_counter()
kern_l = ResponseKernel.build(params_l, 1, ctrl_l)
print("se=3 kernel %.2fs supports=%s" % (time.perf_counter() - t0, kern_l.diagnostics["n_supports"]))
rng = np.random.default_rng(3)
phi_l = 0.05 * rng.standard_normal(lat_l.n_sites)
w_l = 0.05 * rng.standard_normal(state_l.params.unit_lattice.n_sites)
t0 = time.perf_counter()
loc = localization_expansion(state_l, (4,), phi_l, w_l, kernel=kern_l, controls=ctrl_l)
print("se=3 localization %.2fs" % (time.perf_counter() - t0))
print("  terms:", {z: float(v) for z, v in loc["terms"].items()})
print("  telescope_error:", loc["telescope_error"], "route_gap:", loc["route_gap"])
print("  w_locality:", loc["w_locality"], "disconnected:", loc["disconnected_max"])
print("  halo_error:", loc["halo_error"])

# --- halo raise: halo=0 should truncate too much ---
try:
    ctrl_h = StepControls(measure_nodes=3, walk_orders=10, r_nodes=8, halo=0, quad_nodes=4)
    loc0 = localization_expansion(state_l, (4,), phi_l, w_l, kernel=kern_l, controls=ctrl_h)
    print("halo=0 passed with halo_error:", loc0["halo_error"])
except LocalizationHaloError as e:
    print("halo raise:", e)

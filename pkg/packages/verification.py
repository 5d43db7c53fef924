"""
Residuals of a state (u, v) against the Lipschitz-solution definition: the weak
space-time identity, mass conservation, the flux residual |v_t - A(Du)| and the
distances of the gradient to the band set of the chosen solution type.
"""
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from packages import space_time_grid as stg
from packages.diffusion_profile import branch_inverses, flux
from packages.rank_one_geometry import SolutionType

logger = logging.getLogger(__name__)

RADIAL_SAMPLES = 257
SWEEP_ANGLES = 64
CHUNK_ENTRIES = 2 ** 21


@dataclass
class VerificationReport:
    weak_residual: float = 0.0
    mass_drift: float = 0.0
    flux_residual: float = 0.0
    set_residuals: dict = field(default_factory=dict)
    caps: dict = field(default_factory=lambda: {"ut": 0.0, "vt": 0.0})
    pass_index: int = None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: data[key] for key in ("weak_residual", "mass_drift", "flux_residual", "set_residuals",
                                                 "caps", "pass_index") if key in data})


@dataclass(frozen=True)
class TestFunction:
    """zeta(x, t) = f(x) g(t) in coordinates normalized to the unit box."""
    name: str
    spatial: object
    temporal: object

    __test__ = False


def _spatial_family(dimension):
    if dimension == 1:
        return {
            "1": lambda z: np.ones_like(z[0]),
            "x": lambda z: z[0],
            "x^2": lambda z: z[0] ** 2,
            "cos(pi x)": lambda z: np.cos(np.pi * z[0]),
            "cos(2 pi x)": lambda z: np.cos(2 * np.pi * z[0]),
        }
    return {
        "1": lambda z: np.ones_like(z[0]),
        "x": lambda z: z[0],
        "y": lambda z: z[1],
        "xy": lambda z: z[0] * z[1],
        "cos(pi x) cos(pi y)": lambda z: np.cos(np.pi * z[0]) * np.cos(np.pi * z[1]),
    }


TEMPORAL_FAMILY = {
    "1": lambda t: (np.ones_like(t), np.zeros_like(t)),
    "t": lambda t: (t, np.ones_like(t)),
    "t^2": lambda t: (t ** 2, 2 * t),
    "cos(pi t)": lambda t: (np.cos(np.pi * t), -np.pi * np.sin(np.pi * t)),
    "sin(pi t)": lambda t: (np.sin(np.pi * t), np.pi * np.cos(np.pi * t)),
}


def default_test_basis(dimension):
    """Tensor products of five spatial and five temporal functions (25 in all)."""
    return [TestFunction(f"{sn} * {tn}", sf, tf)
            for sn, sf in _spatial_family(dimension).items() for tn, tf in TEMPORAL_FAMILY.items()]


def constant_test_function():
    return TestFunction("1", lambda z: np.ones_like(z[0]), TEMPORAL_FAMILY["1"])


def _normalized_nodes(grid):
    return [(c - lo) / (hi - lo) for c, (lo, hi) in zip(stg.node_coordinates(grid), grid.extent)]


def _flux_fields(state, profile):
    """Face fluxes A(Du).n of the true profile on every slice."""
    def coefficient(s):
        safe = np.where(s > 0, s, 1.0)
        return np.where(s > 0, profile.sigma(safe) / safe, 0.0)
    return stg.face_fluxes(coefficient, state.u, state.grid)


def mass_drift(state):
    """max_t |integral u(t) - integral u_0|."""
    mass = stg.node_integral(state.u, state.grid)
    return float(np.abs(mass - mass[0]).max())


def weak_residual(state, profile, test_basis=None, sample_times=None, fluxes=None):
    """
    Largest defect of the weak identity over test functions and sample slices.

    For each zeta and slice s it evaluates
    |int(u(s) zeta(s) - u_0 zeta(0)) - int_0^s int(u zeta_t - A(Du).D zeta)|
    with control-volume quadrature in space, the trapezoid rule in time and
    D zeta as the face difference of the nodal values of zeta.
    """
    grid = state.grid
    basis = test_basis if test_basis is not None else default_test_basis(grid.dimension)
    slices = np.arange(grid.steps + 1) if sample_times is None else np.asarray(sample_times)
    fluxes = fluxes if fluxes is not None else _flux_fields(state, profile)
    volumes = stg.control_volumes(grid)
    areas = [stg.face_area(grid, k) * grid.spacing[k] for k in range(grid.dimension)]
    tau = grid.times / grid.horizon
    nodes = _normalized_nodes(grid)
    spatial_axes = tuple(range(1, grid.dimension + 1))
    u = state.u
    worst = 0.0
    for zeta in basis:
        f = np.asarray(zeta.spatial(nodes), dtype=float)
        g, g_prime = zeta.temporal(tau)
        g_prime = g_prime / grid.horizon
        mass_f = np.sum(u * (volumes * f), axis=spatial_axes)
        lhs = mass_f * g - mass_f[0] * g[0]
        df = stg.face_gradient(f, grid)
        dissipation = sum(np.sum(F * (d * a), axis=spatial_axes) for F, d, a in zip(fluxes, df, areas))
        integrand = mass_f * g_prime - dissipation * g
        cumulative = np.concatenate([[0.0], np.cumsum(0.5 * grid.dt * (integrand[1:] + integrand[:-1]))])
        worst = max(worst, float(np.abs(lhs[slices] - cumulative[slices]).max()))
    return worst


def flux_residual_density(u, v, grid, profile):
    """|v_t - A(Du)| at cell centres for every slice."""
    vt = stg.time_derivative(stg.face_to_cells(v, grid), grid)
    return np.linalg.norm(vt - flux(profile, stg.cell_gradient(u, grid)), axis=-1)


def flux_residual(state, profile):
    """Quadrature of |v_t - A(Du)| over Omega_T."""
    return stg.spacetime_cell_integral(flux_residual_density(state.u, state.v, state.grid, profile), state.grid)


@dataclass(frozen=True)
class Band:
    """Union of closed |p| intervals, optionally with the point 0."""
    intervals: tuple
    includes_zero: bool

    def distance(self, s):
        s = np.asarray(s, dtype=float)
        out = np.abs(s) if self.includes_zero else np.full(s.shape, np.inf)
        for lo, hi in self.intervals:
            out = np.minimum(out, np.maximum(np.maximum(lo - s, s - hi), 0.0))
        return out


def target_band(profile, r_tilde, solution_type, include_zero=True):
    """Type I: [s_-^2(r~), s_+(r~)] and {0}; Type II: [0, s_-^1(r~)] and [s_0, s_+(r~)]."""
    solution_type = SolutionType.parse(solution_type)
    inverses = branch_inverses(profile, r_tilde)
    if solution_type is SolutionType.TYPE_I:
        return Band(intervals=((inverses.s_minus2_r, inverses.s_plus_r),), includes_zero=include_zero)
    return Band(intervals=((0.0, inverses.s_minus1_r), (profile.s_zero, inverses.s_plus_r)), includes_zero=True)


def _band_radii(band):
    radii = [np.linspace(lo, hi, RADIAL_SAMPLES) for lo, hi in band.intervals]
    if band.includes_zero:
        radii.append(np.zeros(1))
    return np.concatenate(radii)


def distance_to_B(p, beta, profile, band):
    """
    Distance of (p, beta) to B = {(p', A(p')) : |p'| in the band}.

    p and beta have the vector components on their last axis. Candidates are
    taken along the directions of p, beta, their opposites and (in 2D) an
    angle sweep, at sampled radii of the band.
    """
    p = np.asarray(p, dtype=float)
    beta = np.asarray(beta, dtype=float)
    shape = p.shape[:-1]
    n = p.shape[-1]
    p = p.reshape(-1, n)
    beta = beta.reshape(-1, n)
    radii = _band_radii(band)
    sig = profile.sigma(radii)
    out = np.empty(len(p))
    directions_count = 2 if n == 1 else 4 + SWEEP_ANGLES
    chunk = max(64, CHUNK_ENTRIES // (directions_count * len(radii)))
    for start in range(0, len(p), chunk):
        pc, bc = p[start:start + chunk], beta[start:start + chunk]
        if n == 1:
            directions = np.broadcast_to(np.array([[[1.0]], [[-1.0]]]), (2, len(pc), 1))
        else:
            angles = np.linspace(0.0, 2 * np.pi, SWEEP_ANGLES, endpoint=False)
            sweep = np.stack([np.cos(angles), np.sin(angles)], axis=-1)[:, None, :]
            sweep = np.broadcast_to(sweep, (SWEEP_ANGLES, len(pc), 2))
            own = [_unit(pc), -_unit(pc), _unit(bc), -_unit(bc)]
            directions = np.concatenate([np.stack(own), sweep])
        pd = np.einsum("dmk,mk->dm", directions, pc)
        bd = np.einsum("dmk,mk->dm", directions, bc)
        base = np.sum(pc ** 2, axis=-1) + np.sum(bc ** 2, axis=-1)
        values = (base[None, :, None] - 2 * radii[None, None, :] * pd[..., None] - 2 * sig[None, None, :] * bd[..., None]
                  + (radii ** 2 + sig ** 2)[None, None, :])
        out[start:start + chunk] = np.sqrt(np.maximum(values.min(axis=(0, 2)), 0.0))
    return out.reshape(shape)


def _unit(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    fallback = np.zeros_like(x)
    fallback[..., 0] = 1.0
    return np.where(norm > 0, x / np.where(norm > 0, norm, 1.0), fallback)


def b_distance_density(u, v, grid, profile, band):
    """dist((Du, v_t), B) at cell centres."""
    vt = stg.time_derivative(stg.face_to_cells(v, grid), grid)
    return distance_to_B(stg.cell_gradient(u, grid), vt, profile, band)


def set_distance_report(state, r_tilde, profile, solution_type, masks=None):
    """
    Band distances of |Du| off the classical region, the classical-region
    check |Du| > s_+(r~), and the distance of (Du, v_t) to B on Omega_T^1.
    """
    grid = state.grid
    masks = masks if masks is not None else state.masks
    norm = np.linalg.norm(stg.cell_gradient(state.u, grid), axis=-1)
    band = target_band(profile, r_tilde, solution_type)
    outside = ~masks.omega3
    band_gap = np.where(outside, band.distance(norm), 0.0)
    s_plus_r = band.intervals[-1][1]
    classical_gap = np.where(masks.omega3, np.maximum(s_plus_r - norm, 0.0), 0.0)

    report = {
        "band_max": float(band_gap.max()) if band_gap.size else 0.0,
        "band_integral": stg.spacetime_cell_integral(band_gap, grid),
        "classical_violation": float(classical_gap.max()) if classical_gap.size else 0.0,
        "b_distance_max": 0.0,
        "b_distance_integral": 0.0,
        "omega1_measure": stg.spacetime_cell_measure(masks.omega1, grid),
    }
    if masks.omega1.any():
        b_band = target_band(profile, r_tilde, solution_type, include_zero=False)
        density = np.where(masks.omega1, b_distance_density(state.u, state.v, grid, profile, b_band), 0.0)
        report["b_distance_max"] = float(density.max())
        report["b_distance_integral"] = stg.spacetime_cell_integral(density, grid)
    return report


def measured_caps(state):
    """Sup norms of u_t on nodes and v_t on faces."""
    grid = state.grid
    ut = np.abs(stg.time_derivative(state.u, grid)).max()
    vt = max(np.abs(stg.time_derivative(component, grid)).max() for component in state.v)
    return {"ut": float(ut), "vt": float(vt)}


def potential_from_density(u, grid):
    """v(x, t) = integral_0^x u(y, t) dy on the faces of a 1D grid, so that div v = u."""
    if grid.dimension != 1:
        raise ValueError("potential_from_density is defined for one space dimension")
    u = np.asarray(u, dtype=float)
    mass = u * stg.control_volumes(grid)
    return (np.cumsum(mass, axis=-1)[..., :-1],)


def full_report(state, plan, pass_index=None):
    """All verifiers on one state; deterministic given the state and the plan."""
    fluxes = _flux_fields(state, plan.profile)
    report = VerificationReport(
        weak_residual=weak_residual(state, plan.profile, fluxes=fluxes),
        mass_drift=mass_drift(state),
        flux_residual=flux_residual(state, plan.profile),
        set_residuals=set_distance_report(state, plan.r_tilde, plan.profile, plan.solution_type),
        caps=measured_caps(state),
        pass_index=pass_index,
    )
    logger.info("Verification (pass %s): weak %.3e, mass %.3e, flux %.3e", pass_index, report.weak_residual,
                report.mass_drift, report.flux_residual)
    return report

"""
Classical pre-solve: the uniformly parabolic Neumann problem
u_t = div(A~(Du)), the Poisson potential of u_0, the vector field v* with
div v* = u*, and the partition of Omega_T by |Du*|.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import spsolve
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from packages import space_time_grid as stg
from packages.diffusion_profile import branch_inverses
from packages.errors import Incompatible, NonlinearDivergence

logger = logging.getLogger(__name__)

STEP_TOL = 1e-10
BAND_TOL = 1e-8
MAX_PICARD = 25
MAX_NEWTON = 30
STALL_RATIO = 0.9


@dataclass
class ParabolicSolution:
    u: np.ndarray
    gradient_max: np.ndarray
    picard_iterations: list = field(default_factory=list)
    newton_steps: int = 0


@dataclass
class BoundaryFunctionPair:
    u_star: np.ndarray
    v_star: tuple
    du_star: np.ndarray
    potential: np.ndarray
    v0: tuple
    gradient_bound: float
    gradient_max: np.ndarray = None


@dataclass
class RegionMasks:
    """Cell masks over (slices, cells...) for Omega_T^0..3 and the t = 0 trace of Omega_T^3."""
    omega0: np.ndarray
    omega1: np.ndarray
    omega2: np.ndarray
    omega3: np.ndarray
    initial_trace: np.ndarray
    r_tilde: float
    s_plus_r: float

    def counts(self):
        return {name: int(getattr(self, name).sum()) for name in ("omega0", "omega1", "omega2", "omega3", "initial_trace")}


def normalize_initial(u0, grid):
    """Subtract the quadrature mean so that the integral of u_0 vanishes."""
    u0 = np.asarray(u0, dtype=float)
    return u0 - stg.node_mean(u0, grid)


def _newton_coefficient(mod_profile, u, grid):
    """d/dg_n of f~(|g|^2) g_n: f~ + (g_n^2/|g|^2)(sigma~'(|g|) - f~). Exact in 1D."""
    normals = stg.face_gradient(u, grid)
    norms2 = stg.face_gradient_norm_squared(u, grid)
    out = []
    for g, n2 in zip(normals, norms2):
        s = np.sqrt(n2)
        base = mod_profile.flux_coefficient(s)
        share = np.where(n2 > 0, g ** 2 / np.where(n2 > 0, n2, 1.0), 1.0)
        out.append(base + share * (mod_profile.sigma_tilde_prime(s) - base))
    return tuple(out)


def _step_residual(mod_profile, u, u_old, grid, dt):
    """u - u_old - dt div A~(Du), in units of u."""
    return u - u_old - dt * stg.divergence(stg.face_fluxes(mod_profile.flux_coefficient, u, grid), grid)


def _backward_euler_step(mod_profile, u_old, grid, dt, volumes, step_index, solution):
    shape = u_old.shape
    mass = sps.diags(volumes.ravel())
    u = u_old.copy()
    residual = np.abs(_step_residual(mod_profile, u, u_old, grid, dt)).max()
    previous = np.inf
    for iteration in range(1, MAX_PICARD + 1):
        if residual <= STEP_TOL:
            solution.picard_iterations.append(iteration - 1)
            return u
        if residual > STALL_RATIO * previous:
            break
        frozen = _frozen_coefficients(mod_profile, u, grid)
        system = (mass - dt * stg.conductance_matrix(frozen, grid)).tocsc()
        u = spsolve(system, (volumes * u_old).ravel()).reshape(shape)
        previous, residual = residual, np.abs(_step_residual(mod_profile, u, u_old, grid, dt)).max()
        logger.debug("step %d picard %d residual %.3e", step_index, iteration, residual)
    solution.picard_iterations.append(iteration)
    if residual <= STEP_TOL:
        return u
    logger.warning("Picard stalled at step %d (residual %.3e); switching to damped Newton", step_index, residual)
    return _damped_newton(mod_profile, u, u_old, grid, dt, volumes, step_index, solution)


def _frozen_coefficients(mod_profile, u, grid):
    return tuple(mod_profile.flux_coefficient(np.sqrt(n2)) for n2 in stg.face_gradient_norm_squared(u, grid))


def _damped_newton(mod_profile, u, u_old, grid, dt, volumes, step_index, solution):
    shape = u_old.shape
    mass = sps.diags(volumes.ravel())
    residual_field = _step_residual(mod_profile, u, u_old, grid, dt)
    residual = np.abs(residual_field).max()
    for iteration in range(MAX_NEWTON):
        if residual <= STEP_TOL:
            return u
        jacobian = (mass - dt * stg.conductance_matrix(_newton_coefficient(mod_profile, u, grid), grid)).tocsc()
        delta = spsolve(jacobian, -(volumes * residual_field).ravel()).reshape(shape)
        damping = 1.0
        while damping > 1e-4:
            trial = u + damping * delta
            trial_field = _step_residual(mod_profile, trial, u_old, grid, dt)
            trial_residual = np.abs(trial_field).max()
            if trial_residual < (1.0 - 1e-4 * damping) * residual:
                break
            damping *= 0.5
        else:
            break
        u, residual_field, residual = trial, trial_field, trial_residual
        solution.newton_steps += 1
        logger.debug("step %d newton %d damping %.3g residual %.3e", step_index, iteration, damping, residual)
    if residual <= STEP_TOL:
        return u
    raise NonlinearDivergence(f"Nonlinear solve stalled at step {step_index} with residual {residual:.3e}",
                              step=step_index, residual=float(residual))


def solve_parabolic(mod_profile, u0, grid, progress=False):
    """
    Backward Euler for u_t = div(f~(|Du|^2) Du) with homogeneous Neumann data.

    Parameters:
    mod_profile (ModifiedProfile): Uniformly parabolic flux law.
    u0 (ndarray): Initial node values.
    grid (GridST): Space-time grid.
    progress (bool): Show a tqdm bar over time steps.

    Returns:
    ParabolicSolution: Node values per slice and the per-slice max |Du|.
    """
    if not mod_profile.theta_lo > 0:
        raise ValueError("modified profile is not uniformly parabolic (theta <= 0)")
    u0 = np.asarray(u0, dtype=float)
    volumes = stg.control_volumes(grid)
    u = np.empty((grid.steps + 1,) + u0.shape)
    u[0] = u0
    solution = ParabolicSolution(u=u, gradient_max=np.empty(grid.steps + 1))
    solution.gradient_max[0] = _max_gradient(u0, grid)
    with logging_redirect_tqdm([logger]):
        for n in tqdm(range(1, grid.steps + 1), desc="parabolic", disable=not progress, leave=False):
            u[n] = _backward_euler_step(mod_profile, u[n - 1], grid, grid.dt, volumes, n, solution)
            solution.gradient_max[n] = _max_gradient(u[n], grid)
    drift = np.abs(stg.node_integral(u, grid) - stg.node_integral(u0, grid)).max()
    logger.info("Parabolic solve: %d steps, mass drift %.2e, newton steps %d", grid.steps, drift, solution.newton_steps)
    return solution


def _max_gradient(u, grid):
    return float(np.sqrt(max(n2.max() for n2 in stg.face_gradient_norm_squared(u, grid))))


def solve_poisson_neumann(u0, grid):
    """
    Solve Delta h = u_0 with zero normal derivative and zero mean.

    The bordered system [[K, V], [V^T, 0]] fixes the constant; V are the
    control volumes and K the Neumann Laplacian times V.
    """
    u0 = np.asarray(u0, dtype=float)
    scale = max(np.abs(u0).max(), 1e-300)
    mean = stg.node_mean(u0, grid)
    if abs(mean) > 1e-12 * scale:
        raise Incompatible(f"Initial data has nonzero mean {mean:.3e}", mean=float(mean))
    if not np.any(u0):
        return np.zeros_like(u0)
    volumes = stg.control_volumes(grid).ravel()
    laplacian = stg.conductance_matrix(tuple(np.ones(g.shape) for g in stg.face_gradient(u0, grid)), grid)
    border = sps.csr_matrix(volumes[None, :])
    system = sps.bmat([[laplacian, border.T], [border, None]], format="csc")
    rhs = np.concatenate([volumes * u0.ravel(), [0.0]])
    solution = spsolve(system, rhs)
    potential = solution[:-1].reshape(u0.shape)
    return potential - stg.node_mean(potential, grid)


def assemble_vstar(mod_profile, u_star, v0, grid, rule="trapezoid"):
    """
    v*(t) = v_0 + integral_0^t A~(Du*) on faces.

    ``rule="trapezoid"`` averages consecutive slices; ``rule="implicit"``
    uses the backward-Euler fluxes, for which div v* = u* holds to the
    solver tolerance on every slice.
    """
    if rule not in ("trapezoid", "implicit"):
        raise ValueError(f"unknown time rule {rule!r}")
    fluxes = stg.face_fluxes(mod_profile.flux_coefficient, u_star, grid)
    v_star = []
    for v0_k, flux_k in zip(v0, fluxes):
        if rule == "trapezoid":
            increments = 0.5 * grid.dt * (flux_k[1:] + flux_k[:-1])
        else:
            increments = grid.dt * flux_k[1:]
        integral = np.concatenate([np.zeros((1,) + v0_k.shape), np.cumsum(increments, axis=0)])
        v_star.append(v0_k[None] + integral)
    return tuple(v_star)


def build_boundary_function(mod_profile, u0, grid, rule="trapezoid", progress=False):
    """Normalize u_0, solve for u*, its potential and v*; returns a BoundaryFunctionPair."""
    u0 = normalize_initial(u0, grid)
    solution = solve_parabolic(mod_profile, u0, grid, progress=progress)
    potential = solve_poisson_neumann(u0, grid)
    v0 = stg.face_gradient(potential, grid)
    v_star = assemble_vstar(mod_profile, solution.u, v0, grid, rule=rule)
    du_star = stg.cell_gradient(solution.u, grid)
    bound = float(np.linalg.norm(du_star, axis=-1).max())
    return BoundaryFunctionPair(u_star=solution.u, v_star=v_star, du_star=du_star, potential=potential, v0=v0,
                                gradient_bound=bound, gradient_max=solution.gradient_max)


def partition_domain(du_star, r_tilde, profile, tol=BAND_TOL):
    """Masks of Omega_T^0 (|Du*| = 0), ^1 (between), ^2 (= s_+(r~)), ^3 (> s_+(r~)) on cell centres."""
    s_plus_r = branch_inverses(profile, r_tilde).s_plus_r
    norm = np.linalg.norm(du_star, axis=-1)
    omega0 = norm <= tol
    omega2 = np.abs(norm - s_plus_r) <= tol
    omega3 = (norm > s_plus_r) & ~omega2
    omega1 = ~(omega0 | omega2 | omega3)
    return RegionMasks(omega0=omega0, omega1=omega1, omega2=omega2, omega3=omega3,
                       initial_trace=omega3[0].copy(), r_tilde=float(r_tilde), s_plus_r=s_plus_r)

"""
The construction pipeline: choice of the flux level r~, the finite cover of
(0, r~) by certified level windows, the admissible initial state built from
the classical solution, density-refinement passes that laminate boxes of
Omega_T^1, and the driver for data whose gradient starts above s_+.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from packages import space_time_grid as stg
from packages.diffusion_profile import modify_profile
from packages.errors import (AuditFailed, BoundaryNotClean, BudgetInfeasible, CoverFailed, HypothesisFailed, MeanNotZero,
                             NoCrossing, NotInS, NoWindow, OutOfRange, PassIncomplete)
from packages.lamination import (C_DEFAULT, BoxST, Cutoff, EtaFrame, apply_patch, build_laminate, div_right_inverse,
                                 grid_laminate)
from packages.parabolic_solver import RegionMasks, build_boundary_function, normalize_initial, partition_domain
from packages.rank_one_geometry import (DiagonalPoint, SolutionType, Window, collinear_distance, estimate_mu_prime,
                                        explicit_frames_1d, solve_frame)
from packages.verification import (b_distance_density, flux_residual, flux_residual_density, full_report,
                                   set_distance_report, target_band)

logger = logging.getLogger(__name__)

GRADIENT_TOL = 1e-12
COVER_OVERLAP = 0.1
MIN_WINDOW = 1e-6
MAX_WINDOWS = 200
AUDIT_SAMPLES = 1000
MIN_BOX_CELLS = 8
NU_MIN_CELLS = 4
NU_TARGET_CELLS = 16
TRACE_SLACK = 0.1
LAMBDA_TOL = 1e-6
BOX_CELLS_2D = 16
TAU_SHARE = 0.02
SLACK_SHARE = 0.9


@dataclass
class RunPlan:
    profile: object
    solution_type: SolutionType
    r_tilde: float
    cover: list
    grid: stg.GridST
    u0: np.ndarray = field(repr=False)
    epsilon0: float = 0.8
    passes: int = 3
    eta: float = 0.1
    box_cells: int = None
    box_slices: int = None
    nu: float = None
    seed: int = 0
    vstar_rule: str = "implicit"
    progress: bool = False

    @property
    def epsilons(self):
        return [self.epsilon0 / 2 ** j for j in range(self.passes)]

    @property
    def box_shape(self):
        """(cells per axis, slices) of the first-generation boxes; whole rows over the horizon in 1D."""
        if self.grid.dimension == 1:
            return self.box_cells or self.grid.cells[0], self.box_slices or self.grid.steps
        size = self.box_cells or BOX_CELLS_2D
        return size, self.box_slices or size

    @property
    def cover_slack(self):
        return 1e-3 * self.r_tilde

    @property
    def flux_bound(self):
        """R = max{sigma(M_0), sigma(s_+)}, M_0 the largest initial gradient."""
        m0 = float(np.linalg.norm(stg.cell_gradient(self.u0, self.grid), axis=-1).max())
        return max(float(self.profile.sigma(m0)), self.profile.r_max)


@dataclass
class StatePair:
    grid: stg.GridST = field(repr=False)
    u: np.ndarray = field(repr=False)
    v: tuple = field(repr=False)
    masks: RegionMasks = field(repr=False)
    u_star: np.ndarray = field(repr=False)
    v_star: tuple = field(repr=False)
    time_cap: float = np.inf
    touched: np.ndarray = field(default=None, repr=False)
    patch_log: list = field(default_factory=list)
    history: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.touched is None:
            self.touched = np.zeros(self.masks.omega1.shape, dtype=bool)

    def copy(self):
        return replace(self, u=self.u.copy(), v=tuple(c.copy() for c in self.v), touched=self.touched.copy(),
                       patch_log=list(self.patch_log), history=list(self.history), reports=list(self.reports),
                       audit=dict(self.audit))


def _gradient_norms(u0, grid):
    return np.linalg.norm(stg.cell_gradient(np.asarray(u0, dtype=float), grid), axis=-1)


def select_r_tilde(profile, u0, grid, strategy="midpoint"):
    """
    A flux level strictly inside (sigma(m_0'), sigma(s_+)), m_0' = max{min |Du_0|, s_0}.

    ``strategy`` is "midpoint" or a number to be validated.
    """
    norms = _gradient_norms(u0, grid)
    if norms.max() <= GRADIENT_TOL:
        raise HypothesisFailed("Initial data is constant", reason="constant")
    if not np.any((norms > GRADIENT_TOL) & (norms < profile.s_plus)):
        raise HypothesisFailed(f"min |Du_0| = {norms.min():.6g} is not below s_+ = {profile.s_plus:.6g}",
                               reason="steep", min_gradient=float(norms.min()))
    m0_prime = max(float(norms.min()), profile.s_zero)
    low, high = float(profile.sigma(m0_prime)), profile.r_max
    if strategy == "midpoint":
        return 0.5 * (low + high)
    value = float(strategy)
    if not low < value < high:
        raise OutOfRange(f"r~ = {value} must lie in ({low:.6g}, {high:.6g})", r=value, low=low, high=high)
    return value


def _window_radius(profile, r, r_tilde, solution_type, dimension, seed):
    mu0 = 0.999 * min(r, r_tilde - r)
    try:
        mu = estimate_mu_prime(profile, r, solution_type, dimension=dimension, mu0=mu0, seed=seed).mu
    except NoWindow:
        return 0.0
    return min(mu, mu0)


def build_cover(profile, r_tilde, solution_type, dimension=1, slack=None, seed=0):
    """
    Greedy left-to-right cover of (slack, r~ - slack) by certified windows.

    Each new window must contain the right end of its predecessor with an
    overlap of at least 10% of the smaller width; centres are tried from the
    midpoint of what is left toward the uncovered point.
    """
    solution_type = SolutionType.parse(solution_type)
    slack = 1e-3 * r_tilde if slack is None else slack
    upper = r_tilde - slack
    reach, previous_width = slack, None
    cover = []
    while reach < upper or not cover:
        if len(cover) >= MAX_WINDOWS:
            raise CoverFailed(f"Cover of (0, {r_tilde}) needs more than {MAX_WINDOWS} windows", reach=reach)
        r = 0.5 * (reach + upper) if reach < upper else reach
        r = min(max(r, reach * (1.0 + 1e-9)), 0.5 * (reach + r_tilde))
        while True:
            mu = _window_radius(profile, r, r_tilde, solution_type, dimension, seed)
            overlap = 0.0 if previous_width is None else COVER_OVERLAP * min(previous_width, 2 * mu)
            if mu >= MIN_WINDOW and r - mu < reach - overlap:
                break
            r = reach + 0.5 * (r - reach)
            if r - reach < MIN_WINDOW:
                raise CoverFailed(f"Window around r={reach:.6g} degenerates below {MIN_WINDOW}", r=reach)
        cover.append(Window(r=r, mu=mu, solution_type=solution_type))
        reach, previous_width = r + mu, 2 * mu
        logger.debug("cover window %d: r=%.6g mu=%.6g", len(cover), r, mu)
    logger.info("Cover of (%.3g, %.6g) by %d windows", slack, upper, len(cover))
    return cover


def covers(cover, lo, hi):
    """Interval sweep: is (lo, hi) inside the union of the open windows?"""
    reach = lo
    for window in sorted(cover, key=lambda w: w.r - w.mu):
        left = window.r - window.mu
        if left < reach or (reach == lo and left <= lo):
            reach = max(reach, window.r + window.mu)
    return reach >= hi


def window_index(cover, level):
    """Smallest k with level in (r_k - mu_k, r_k + mu_k), or None."""
    for k, window in enumerate(cover):
        if abs(level - window.r) < window.mu:
            return k
    return None


def make_plan(profile, u0, grid, solution_type="I", r_tilde="auto", **options):
    """Normalize u_0, choose r~ and build the cover; the remaining options go to RunPlan."""
    u0 = normalize_initial(u0, grid)
    solution_type = SolutionType.parse(solution_type)
    strategy = "midpoint" if r_tilde in (None, "auto", "midpoint") else r_tilde
    value = select_r_tilde(profile, u0, grid, strategy)
    cover = build_cover(profile, value, solution_type, dimension=grid.dimension, seed=options.get("seed", 0))
    return RunPlan(profile=profile, solution_type=solution_type, r_tilde=value, cover=cover, grid=grid, u0=u0,
                   **options)


def _state_from_pair(pair, masks, grid):
    time_cap = float(np.abs(stg.time_derivative(pair.u_star, grid)).max()) + 1.0
    return StatePair(grid=grid, u=pair.u_star.copy(), v=tuple(c.copy() for c in pair.v_star), masks=masks,
                     u_star=pair.u_star, v_star=pair.v_star, time_cap=time_cap)


def build_initial_state(plan):
    """
    The state (u*, v*) of the modified problem, audited on sampled cells of
    Omega_T^1: (Du*, A~(Du*)) must admit a rank-one frame in the window of its
    level. Levels inside the cover slack are counted but not audited.
    """
    mod = modify_profile(plan.profile, plan.r_tilde)
    pair = build_boundary_function(mod, plan.u0, plan.grid, rule=plan.vstar_rule, progress=plan.progress)
    masks = partition_domain(pair.du_star, plan.r_tilde, plan.profile)
    state = _state_from_pair(pair, masks, plan.grid)
    cells = np.argwhere(masks.omega1)
    audit = {"sampled": 0, "passed": 0, "below_cover": 0, "vt_defect": 0.0, "regions": masks.counts()}
    if len(cells):
        rng = np.random.default_rng(plan.seed)
        chosen = cells[rng.choice(len(cells), size=min(AUDIT_SAMPLES, len(cells)), replace=False)]
        vt = stg.time_derivative(stg.face_to_cells(pair.v_star, plan.grid), plan.grid)
        for index in map(tuple, chosen):
            p = pair.du_star[index]
            beta = np.atleast_1d(mod.sigma_tilde(np.linalg.norm(p))) * p / np.linalg.norm(p)
            audit["vt_defect"] = max(audit["vt_defect"], float(np.linalg.norm(vt[index] - beta)))
            k = window_index(plan.cover, float(np.linalg.norm(beta)))
            if k is None:
                audit["below_cover"] += 1
                continue
            audit["sampled"] += 1
            try:
                solve_frame(plan.profile, DiagonalPoint(p, beta), plan.cover[k], seed=plan.seed)
            except NotInS as exc:
                nearest = min(plan.cover, key=lambda w: abs(w.r - np.linalg.norm(beta)))
                raise AuditFailed(f"Cell {index} has no frame in window {k}: {exc}", cell=index, p=p, beta=beta,
                                  window=plan.cover[k], nearest=nearest) from exc
            audit["passed"] += 1
    state.audit = audit
    logger.info("Initial state audit: %d/%d frames, %d below the cover slack", audit["passed"], audit["sampled"],
                audit["below_cover"])
    return state


def _box_cells_ok(state, box, nu):
    cells = box.cell_index()
    if not state.masks.omega1[cells].all() or state.touched[cells].any():
        return False
    return nu is None or box.diameter < nu


def tile_boxes(state, size, offset=0, nu=None, slices=None):
    """
    Dyadic tiling of Omega_T^1 by boxes of ``size`` cells per axis over
    ``slices`` slices (``size`` when None); a box that does not fit is split
    in halves down to MIN_BOX_CELLS.
    """
    grid = state.grid
    slices = size if slices is None else slices
    starts = [range(offset, cells - size + 1, size) for cells in grid.cells]
    slice_offset = offset * slices // size
    stack = []
    for t0 in range(slice_offset, grid.steps - slices + 1, slices):
        for corner in np.array(np.meshgrid(*starts, indexing="ij")).reshape(grid.dimension, -1).T:
            stack.append((tuple(int(c) for c in corner), (size,) * grid.dimension, int(t0), slices))
    while stack:
        corner, lengths, t0, duration = stack.pop(0)
        box = BoxST(grid=grid, node_lo=corner, node_hi=tuple(c + n for c, n in zip(corner, lengths)), slice_lo=t0,
                    slice_hi=t0 + duration)
        if _box_cells_ok(state, box, nu):
            yield box
        elif min(lengths) // 2 >= MIN_BOX_CELLS:
            axes = [((c, n // 2), (c + n // 2, n - n // 2)) for c, n in zip(corner, lengths)]
            times = ((t0, duration // 2), (t0 + duration // 2, duration - duration // 2)) \
                if duration // 2 >= MIN_BOX_CELLS else ((t0, duration),)
            for time in times:
                for parts in np.ndindex(*(2,) * grid.dimension):
                    pieces = [axes[k][i] for k, i in enumerate(parts)]
                    stack.append((tuple(p[0] for p in pieces), tuple(p[1] for p in pieces)) + time)


def _slab(box):
    """Index ranges of the box with a one-cell (and one-slice) halo, clipped to the grid."""
    grid = box.grid
    t = slice(max(box.slice_lo - 1, 0), min(box.slice_hi + 1, grid.steps) + 1)
    nodes = tuple(slice(max(lo - 1, 0), min(hi + 1, count - 1) + 1)
                  for lo, hi, count in zip(box.node_lo, box.node_hi, grid.nodes))
    return t, nodes


def _slab_fields(state, box):
    t, nodes = _slab(box)
    u = state.u[(t,) + nodes]
    v = []
    for axis, component in enumerate(state.v):
        faces = tuple(slice(s.start, s.stop - 1) if k == axis else s for k, s in enumerate(nodes))
        v.append(component[(t,) + faces])
    cells = tuple(slice(s.start, s.stop - 1) for s in nodes)
    return u, tuple(v), (t,) + cells


def _local_residual(state, box, profile, band):
    """Flux residual plus B-distance on Omega_T^1 over the box and its halo."""
    grid = state.grid
    u, v, cells = _slab_fields(state, box)
    density = flux_residual_density(u, v, grid, profile)
    omega1 = state.masks.omega1[cells]
    if omega1.any():
        density = density + np.where(omega1, b_distance_density(u, v, grid, profile, band), 0.0)
    weights = stg.time_weights(grid)[cells[0]]
    value = float(np.dot(weights, density.reshape(density.shape[0], -1).sum(axis=1)) * grid.cell_measure)
    ut = float(np.abs(np.gradient(u, grid.dt, axis=0)).max())
    return value, ut


def _centre_point(state, box):
    grid = state.grid
    n_c = (box.slice_lo + box.slice_hi) // 2
    centre = tuple((lo + hi) // 2 for lo, hi in zip(box.node_lo, box.node_hi))
    du = stg.cell_gradient(state.u[n_c], grid)[centre]
    window = slice(n_c - 1, n_c + 2)
    vt = np.gradient(stg.face_to_cells(tuple(c[window] for c in state.v), grid), grid.dt, axis=0)[1]
    return du, vt[centre], n_c


def _laminate_parameters(frame, box, eps, plan, ut_slack):
    """tau-shrunk weights, the scaling b, the period nu and the cutoff for one box."""
    n = box.dimension
    span = frame.t_plus - frame.t_minus
    lam = frame.lam
    tau = min(min(lam, 1.0 - lam) / 4.0, TAU_SHARE * eps / ((1.0 + plan.profile.lambda_hi) * span))
    lambda2 = frame.t_plus - tau * span
    lambda1 = -(frame.t_minus + tau * span)
    delta = tau * min(frame.t_plus, -frame.t_minus)
    constant = C_DEFAULT[n] * sum(box.side_lengths)
    rho = min(tau * span, delta / (2.0 * constant), eps / (20.0 * constant), plan.eta)
    b = rho / (2.0 * span)
    fraction = lambda2 / (lambda1 + lambda2)
    saw_sup = lambda1 * fraction / 2.0
    grid = box.grid
    h_phase = max(abs(q) * h for q, h in zip(frame.q, grid.spacing)) + abs(b) * grid.dt
    nu_lo, nu_hi = NU_MIN_CELLS * h_phase, min(plan.eta / (2.0 * saw_sup), min(box.side_lengths) / 2.0)
    if nu_hi < nu_lo:
        raise BudgetInfeasible(f"period window [{nu_lo:.3g}, {nu_hi:.3g}] is empty", binding="resolution")
    nu = min(NU_TARGET_CELLS * h_phase, nu_hi)
    slack = ut_slack - b * max(lambda1, lambda2)
    if slack <= 0:
        raise BudgetInfeasible("no room under the time-derivative cap", binding="time_cap")
    cells = [hi - lo for lo, hi in zip(box.node_lo, box.node_hi)]
    slices = box.slice_hi - box.slice_lo
    ramp_t = max(1.875 * nu * saw_sup / slack / box.duration, 2.0 / slices)
    if 2.0 * (1.0 / slices + ramp_t) > 0.9:
        raise BudgetInfeasible("time collar leaves no plateau", binding="time_cap")
    cutoff = Cutoff(lengths=box.side_lengths + (box.duration,),
                    margin=tuple(1.0 / c for c in cells) + (1.0 / slices,),
                    width=tuple(2.0 / c for c in cells) + (ramp_t,))
    rho_phase = min(1.0 / 20.0, 0.4 * min(fraction, 1.0 - fraction))
    return {"tau": tau, "lambda1": lambda1, "lambda2": lambda2, "rho": rho, "b": b, "nu": nu, "cutoff": cutoff,
            "rho_phase": rho_phase, "delta": delta}


def _judge(state, box, patch, inverse, before, plan, band, entry):
    """Apply the patch in place and keep it only if the local residual does not grow and the caps hold."""
    saved_u = state.u[box.node_index()].copy()
    saved_v = [state.v[a][box.face_index(a)].copy() for a in range(box.dimension)]
    apply_patch(state.u, state.v, patch, inverse.g, inplace=True)
    after, ut_after = _local_residual(state, box, plan.profile, band)
    entry.update({"before": before, "after": after})
    if after <= before and ut_after < state.time_cap and np.abs(patch.phi).max() < plan.eta:
        entry["accepted"] = True
        state.touched[box.cell_index()] = True
        return "accepted", entry
    state.u[box.node_index()] = saved_u
    for a in range(box.dimension):
        state.v[a][box.face_index(a)] = saved_v[a]
    return "rejected", entry


def _in_cover(cover, levels):
    centres = np.array([w.r for w in cover])
    radii = np.array([w.mu for w in cover])
    return np.any(np.abs(np.asarray(levels)[..., None] - centres) < radii, axis=-1)


def _refine_column(state, box, eps, plan, band):
    """
    Laminate a box of a one-dimensional grid with its kinks on nodes.

    Each cell takes the explicit frame of its own point (Du, v_t), tau-shrunk
    toward the point. The pattern is released from zero no faster than the
    time-derivative cap leaves room for at each node.
    """
    grid = state.grid
    lo, hi = box.node_lo[0], box.node_hi[0]
    _, vt, _ = _centre_point(state, box)
    entry = {"box": box.box_id, "accepted": False, "window": window_index(plan.cover, float(abs(vt[0])))}
    p = np.diff(state.u[box.slices, lo:hi + 1], axis=1) / grid.h
    beta = stg.time_derivative(state.v[0][:, lo:hi], grid)[box.slices]
    q, t_minus, t_plus = explicit_frames_1d(plan.profile, p, beta, plan.solution_type)
    with np.errstate(invalid="ignore"):
        active = _in_cover(plan.cover, np.abs(beta)) & (t_minus < 0.0) & (t_plus > 0.0)
    if not active.any():
        return "no_window", entry
    span = np.where(active, t_plus - t_minus, 1.0)
    lam = np.where(active, -t_minus / span, 0.5)
    active &= np.minimum(lam, 1.0 - lam) >= LAMBDA_TOL
    if not active.any():
        return "on_target", entry
    tau = np.minimum(np.minimum(lam, 1.0 - lam) / 4.0, TAU_SHARE * eps / ((1.0 + plan.profile.lambda_hi) * span))
    ends = (q * (t_minus + tau * span), q * (t_plus - tau * span))
    lower = np.where(active, np.minimum(*ends), np.nan)
    upper = np.where(active, np.maximum(*ends), np.nan)

    ut = np.abs(stg.time_derivative(state.u[:, lo:hi + 1], grid))[box.slices]
    slack = np.maximum(SLACK_SHARE * (state.time_cap - ut), 0.0)
    rate = np.zeros_like(slack)
    rate[1:] = np.minimum(slack[1:], slack[:-1])
    before, _ = _local_residual(state, box, plan.profile, band)
    patch = grid_laminate(box, lower, upper, rate, open_end=box.slice_hi == grid.steps)
    try:
        inverse = div_right_inverse(patch.phi, box)
    except (MeanNotZero, BoundaryNotClean) as exc:
        logger.warning("patch on %s not realizable: %s", box.box_id, exc)
        entry["binding"] = type(exc).__name__
        return "infeasible", entry
    entry.update({"active": float(active.mean()), "tau": float(np.median(tau[active])),
                  "divergence_constant": inverse.constant, "audit": patch.audit})
    return _judge(state, box, patch, inverse, before, plan, band, entry)


def _refine_box(state, box, eps, plan, band):
    """Laminate one box along the frame of its centre point; returns an outcome label and the log entry."""
    entry = {"box": box.box_id, "accepted": False}
    du, vt, _ = _centre_point(state, box)
    level = float(np.linalg.norm(vt))
    k = window_index(plan.cover, level)
    if k is None:
        return "no_window", entry
    try:
        frame = solve_frame(plan.profile, DiagonalPoint(du, vt), plan.cover[k], seed=plan.seed)
    except NotInS:
        return "not_in_s", entry
    if not frame.t_minus < 0.0 < frame.t_plus or min(frame.lam, 1.0 - frame.lam) < LAMBDA_TOL:
        return "on_target", entry
    u_box, v_box, _ = _slab_fields(state, box)
    grid = state.grid
    all_axes = tuple(range(u_box.ndim))
    vt_box = np.gradient(stg.face_to_cells(v_box, grid), grid.dt, axis=0)
    oscillation = max(float(np.ptp(stg.cell_gradient(u_box, grid), axis=all_axes).max()),
                      float(np.ptp(vt_box, axis=all_axes).max()))
    if oscillation > 0.5 * min(frame.t_plus, -frame.t_minus):
        return "oscillation", entry
    before, ut_before = _local_residual(state, box, plan.profile, band)
    try:
        params = _laminate_parameters(frame, box, eps, plan, 0.5 * (state.time_cap - ut_before))
        patch = build_laminate(EtaFrame(frame.q, params["b"], frame.gamma), params["lambda1"], params["lambda2"],
                               box, eps, nu=params["nu"], cutoff=params["cutoff"], rho=params["rho_phase"],
                               enforce=False, audit=False)
        inverse = div_right_inverse(patch.phi, box)
    except BudgetInfeasible as exc:
        entry["binding"] = exc.binding
        return "infeasible", entry
    except (MeanNotZero, BoundaryNotClean) as exc:
        logger.warning("patch on %s not realizable: %s", box.box_id, exc)
        entry["binding"] = type(exc).__name__
        return "infeasible", entry
    ends = (du + frame.t_minus * frame.q, du + frame.t_plus * frame.q)
    entry.update({"window": k, "q": frame.q.tolist(), "gamma": frame.gamma.tolist(), "t_minus": frame.t_minus,
                  "t_plus": frame.t_plus, "tau": params["tau"], "b": params["b"], "nu": params["nu"],
                  "rho": params["rho"], "divergence_constant": inverse.constant, "audit": patch.audit,
                  "collinear_distance": float(collinear_distance(plan.profile, *ends, plan.cover[k].r,
                                                                 plan.solution_type))})
    return _judge(state, box, patch, inverse, before, plan, band, entry)


def refine_once(state, eps, plan, pass_index=0):
    """
    One density-refinement pass at budget eps.

    Boxes of Omega_T^1 are laminated (in 1D on the grid nodes with per-cell
    frames, in 2D along the frame of the box centre) and kept only when the
    local residual does not grow and the caps hold, so
    u = u*, v = v* outside the accepted boxes. Raises PassIncomplete (with
    the pass result as ``state``) when the measured flux residual exceeds
    eps |Omega_T| or the B-distance exceeds eps |Omega_T^1|.
    """
    if not state.masks.omega1.any():
        logger.info("Pass %d: Omega_T^1 is empty, nothing to refine", pass_index)
        return state
    grid = state.grid
    new = state.copy()
    band = target_band(plan.profile, plan.r_tilde, plan.solution_type, include_zero=False)
    size, slices = plan.box_shape
    offset = (size // 2) * (pass_index % 2)
    boxes = list(tile_boxes(new, size, offset, plan.nu, slices))
    refine_box = _refine_column if grid.dimension == 1 else _refine_box
    outcomes = Counter()
    with logging_redirect_tqdm([logger]):
        for box in tqdm(boxes, desc=f"pass {pass_index}", disable=not plan.progress, leave=False):
            outcome, entry = refine_box(new, box, eps, plan, band)
            outcomes[outcome] += 1
            if "window" in entry:
                entry["pass"] = pass_index
                new.patch_log.append(entry)
            if outcome == "rejected":
                logger.debug("patch on %s rejected: %.4g -> %.4g", box.box_id, entry["before"], entry["after"])

    flux_value = flux_residual(new, plan.profile)
    distances = set_distance_report(new, plan.r_tilde, plan.profile, plan.solution_type)
    summary = {"pass": pass_index, "eps": eps, "boxes": len(boxes), "outcomes": dict(outcomes),
               "flux_residual": flux_value, "set_distance": distances["b_distance_integral"]}
    new.history.append(summary)
    logger.info("Pass %d (eps=%.3g): %d boxes, %d accepted, flux residual %.4g", pass_index, eps, len(boxes),
                outcomes["accepted"], flux_value)

    if flux_value > eps * grid.spacetime_volume:
        raise PassIncomplete(f"Flux residual {flux_value:.4g} exceeds {eps:.3g} |Omega_T|", state=new,
                             binding="flux_residual", value=flux_value)
    if distances["b_distance_integral"] > eps * distances["omega1_measure"]:
        raise PassIncomplete(f"Set distance {distances['b_distance_integral']:.4g} exceeds {eps:.3g} |Omega_T^1|",
                             state=new, binding="set_distance", value=distances["b_distance_integral"])
    return new


def iterate(plan, state=None, callback=None):
    """
    Passes j = 0..J-1 at eps_j = eps_0 / 2^j.

    Returns the final state and the flux-residual trace (initial value first).
    ``callback(j, state, report)`` runs after every pass.
    """
    state = build_initial_state(plan) if state is None else state
    trace = [flux_residual(state, plan.profile)]
    for j, eps in enumerate(plan.epsilons):
        try:
            state = refine_once(state, eps, plan, pass_index=j)
        except PassIncomplete as exc:
            trace.append(flux_residual(exc.state, plan.profile))
            raise PassIncomplete(str(exc), state=exc.state, trace=trace, binding=exc.binding, pass_index=j) from exc
        trace.append(flux_residual(state, plan.profile))
        if trace[-1] > (1.0 + TRACE_SLACK) * trace[-2]:
            logger.warning("Flux residual grew from %.4g to %.4g in pass %d", trace[-2], trace[-1], j)
        report = full_report(state, plan, pass_index=j)
        state.reports.append(report)
        if callback is not None:
            callback(j, state, report)
    return state, trace


def constant_state(u0, grid):
    """u = u_0 for all t, v = 0: the solution for data with no gradient."""
    u0 = np.asarray(u0, dtype=float)
    u = np.broadcast_to(u0, (grid.steps + 1,) + u0.shape).copy()
    v = tuple(np.zeros((grid.steps + 1,) + g.shape) for g in stg.face_gradient(u0, grid))
    shape = (grid.steps + 1,) + grid.cells
    empty = np.zeros(shape, dtype=bool)
    masks = RegionMasks(omega0=np.ones(shape, dtype=bool), omega1=empty, omega2=empty.copy(), omega3=empty.copy(),
                        initial_trace=np.zeros(grid.cells, dtype=bool), r_tilde=0.0, s_plus_r=0.0)
    return StatePair(grid=grid, u=u, v=v, masks=masks, u_star=u.copy(), v_star=tuple(c.copy() for c in v),
                     time_cap=1.0)


def general_existence(profile, u0, grid, solution_type="I", r_tilde="auto", **options):
    """
    Solve from any initial data.

    Constant data gives the constant state. Data with some nonzero gradient
    below s_+ goes straight to ``iterate``. Steep data (every nonzero |Du_0|
    at least s_+, flat parts allowed) is first
    evolved with the profile modified below s_bar = (s_0 + s_+)/2 until a
    gradient enters (0, s_+); the construction restarts from that slice and
    the two pieces are joined. Without such a slice NoCrossing carries u*.
    """
    u0 = np.asarray(u0, dtype=float)
    norms = _gradient_norms(u0, grid)
    if norms.max() <= GRADIENT_TOL:
        logger.info("Initial data is constant; returning the constant solution")
        return constant_state(u0, grid)
    if np.any((norms > GRADIENT_TOL) & (norms < profile.s_plus)):
        plan = make_plan(profile, u0, grid, solution_type, r_tilde, **options)
        return iterate(plan)[0]

    s_bar = 0.5 * (profile.s_zero + profile.s_plus)
    r_bar = float(profile.sigma(s_bar))
    mod = modify_profile(profile, r_bar)
    pair = build_boundary_function(mod, u0, grid, rule="implicit", progress=options.get("progress", False))
    norms_t = np.linalg.norm(pair.du_star, axis=-1)
    entered = np.any((norms_t > GRADIENT_TOL) & (norms_t < profile.s_plus), axis=tuple(range(1, norms_t.ndim)))
    crossings = np.flatnonzero(entered)
    if len(crossings) == 0 or crossings[0] >= grid.steps:
        state = _state_from_pair(pair, partition_domain(pair.du_star, r_bar, profile), grid)
        raise NoCrossing(f"|Du*| stays above s_+ = {profile.s_plus:.6g} up to T", state=state)

    n_bar = int(crossings[0])
    t_bar = float(grid.times[n_bar])
    logger.info("Gradient enters (0, s_+) at t = %.6g (slice %d)", t_bar, n_bar)
    rest_grid = stg.GridST(dimension=grid.dimension, extent=grid.extent, nodes=grid.nodes,
                           horizon=grid.horizon - t_bar, steps=grid.steps - n_bar)
    plan = make_plan(profile, pair.u_star[n_bar], rest_grid, solution_type, r_tilde, **options)
    rest, _ = iterate(plan)

    shift = tuple(v_star[n_bar] - v_rest[0] for v_star, v_rest in zip(pair.v_star, rest.v))
    u = np.concatenate([pair.u_star[:n_bar], rest.u])
    v = tuple(np.concatenate([v_star[:n_bar], v_rest + d[None]]) for v_star, v_rest, d in zip(pair.v_star, rest.v, shift))
    head = partition_domain(pair.du_star[:n_bar], plan.r_tilde, profile)
    masks = RegionMasks(**{name: np.concatenate([getattr(head, name), getattr(rest.masks, name)])
                           for name in ("omega0", "omega1", "omega2", "omega3")},
                        initial_trace=head.initial_trace, r_tilde=plan.r_tilde, s_plus_r=head.s_plus_r)
    u_star = np.concatenate([pair.u_star[:n_bar], rest.u_star])
    v_star = tuple(np.concatenate([a[:n_bar], b + d[None]]) for a, b, d in zip(pair.v_star, rest.v_star, shift))
    joined = StatePair(grid=grid, u=u, v=v, masks=masks, u_star=u_star, v_star=v_star,
                       time_cap=max(rest.time_cap, float(np.abs(stg.time_derivative(pair.u_star, grid)).max()) + 1.0),
                       touched=np.concatenate([np.zeros_like(head.omega1), rest.touched]),
                       patch_log=rest.patch_log, history=rest.history, reports=rest.reports, audit=dict(rest.audit))
    joined.audit.update({"crossing_slice": n_bar, "crossing_time": t_bar,
                         "jump": float(np.abs(pair.u_star[n_bar] - rest.u[0]).max())})
    return joined

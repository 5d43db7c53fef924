"""
Rank-one geometry of the diagonal components (p, beta): collinear
connections, frames (q, gamma, t_-, t_+) solving the implicit system,
the explicit angle and perturbation bounds, the determinant certificate and
the level-window estimate.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from packages.diffusion_profile import branch_inverses, branch_inverses_array, flux
from packages.errors import NoSolution, NoWindow, NotInS, OutOfDomain, OutOfRange

logger = logging.getLogger(__name__)

FRAME_TOL = 1e-10
BRACKET_TOL = 1e-10
MAX_HALVINGS = 20
RANDOM_SEEDS = 8


class SolutionType(str, Enum):
    TYPE_I = "I"
    TYPE_II = "II"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        text = str(value).strip().upper().replace("TYPE", "").replace("_", "").strip()
        aliases = {"I": cls.TYPE_I, "1": cls.TYPE_I, "FFT": cls.TYPE_I, "II": cls.TYPE_II, "2": cls.TYPE_II, "BFT": cls.TYPE_II}
        if text not in aliases:
            raise ValueError(f"unknown solution type {value!r}")
        return aliases[text]


@dataclass(frozen=True)
class DiagonalPoint:
    p: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if p.shape != beta.shape or p.ndim != 1 or len(p) not in (1, 2):
            raise ValueError("p and beta must be vectors of the same dimension 1 or 2")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(beta))):
            raise ValueError("diagonal point has non-finite entries")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "beta", beta)

    @property
    def dimension(self):
        return len(self.p)


@dataclass(frozen=True)
class Window:
    r: float
    mu: float
    solution_type: SolutionType = SolutionType.TYPE_I


@dataclass(frozen=True)
class RankOneFrame:
    q: np.ndarray
    gamma: np.ndarray
    t_minus: float
    t_plus: float

    @property
    def lam(self):
        return -self.t_minus / (self.t_plus - self.t_minus)


@dataclass(frozen=True)
class Decomposition:
    xi: np.ndarray
    eta: np.ndarray
    xi_minus: np.ndarray
    xi_plus: np.ndarray
    lam: float


@dataclass(frozen=True)
class MuEstimate:
    mu: float
    d: float
    min_det: float
    halvings: int


def minus_branch(inverses, solution_type):
    """s_-^2(r) for Type I, s_-^1(r) for Type II."""
    return inverses.s_minus2_r if SolutionType.parse(solution_type) is SolutionType.TYPE_I else inverses.s_minus1_r


def window_brackets(profile, window):
    """Open radius brackets ((plus_lo, plus_hi), (minus_lo, minus_hi)) of a window."""
    lower = branch_inverses(profile, window.r - window.mu)
    upper = branch_inverses(profile, window.r + window.mu)
    plus = (lower.s_plus_r, upper.s_plus_r)
    if SolutionType.parse(window.solution_type) is SolutionType.TYPE_I:
        minus = (upper.s_minus2_r, lower.s_minus2_r)
    else:
        minus = (lower.s_minus1_r, upper.s_minus1_r)
    return plus, minus


def _inside(value, bracket, tol=BRACKET_TOL):
    return bracket[0] - tol < value < bracket[1] + tol


def half_angle(R1, R2, Rt1, Rt2):
    """
    The angle theta in [0, pi/2) with
    (Rt1 - Rt2)(R1 + R2) cos^2 theta = (Rt1 + Rt2)(R2 - R1) sin^2 theta.
    """
    if not (0 < R1 < R2 and Rt1 > 0 and Rt2 > 0):
        raise OutOfDomain(f"half_angle needs 0 < R1 < R2 and positive levels, got {(R1, R2, Rt1, Rt2)}")
    if Rt1 < Rt2:
        raise NoSolution(f"No angle exists when Rt1={Rt1} < Rt2={Rt2}", Rt1=Rt1, Rt2=Rt2)
    return float(np.arctan(np.sqrt(((Rt1 - Rt2) * (R1 + R2)) / ((Rt1 + Rt2) * (R2 - R1)))))


def half_angle_residual(R1, R2, Rt1, Rt2, theta):
    return (Rt1 - Rt2) * (R1 + R2) * np.cos(theta) ** 2 - (Rt1 + Rt2) * (R2 - R1) * np.sin(theta) ** 2


def perturbation_bound(a, b, c, d11, d12, d21, d22, e1, e2):
    """
    Radius within which the collinear configuration (0,-a), (0,b), (0,c)
    contains every admissible pair perturbed by the given widths.

    Parameters:
    a, b, c (float): Landmark radii with b > a > 0 and level c > 0.
    d11, d12 (float): Widths below/above a; d21, d22 widths below/above b.
    e1, e2 (float): Widths below/above c.

    Returns:
    float: max(h1, h2, h3).
    """
    if not (b > a > 0 and c > 0):
        raise OutOfDomain(f"landmarks need b > a > 0 and c > 0, got {(a, b, c)}")
    half_gap = (b - a) / 2.0
    widths = (d11, d12, d21, d22, e1, e2)
    if (min(widths) < 0 or d11 >= a or d12 >= half_gap or d21 >= half_gap or e1 >= c):
        raise OutOfDomain(f"widths {widths} leave the admissible domain", widths=widths)
    g = np.arctan(np.sqrt((a + b + d12 + d22) * (e1 + e2) / (2.0 * (b - a - d12 - d21) * (c - e1))))

    def spread(centre, radii):
        return max(np.sqrt(max(rad ** 2 + centre ** 2 - 2.0 * centre * rad * np.cos(g), 0.0)) for rad in radii)

    h1 = spread(a, (a + d12, a - d11))
    h2 = spread(b, (b + d22, b - d21))
    h3 = spread(c, (c + e2, c - e1))
    return float(max(h1, h2, h3))


def window_widths(profile, r, mu, solution_type):
    """Landmarks (a, b, c) and widths of a level window in the order perturbation_bound expects."""
    centre = branch_inverses(profile, r)
    lower = branch_inverses(profile, r - mu)
    upper = branch_inverses(profile, r + mu)
    b = centre.s_plus_r
    d21, d22 = b - lower.s_plus_r, upper.s_plus_r - b
    if SolutionType.parse(solution_type) is SolutionType.TYPE_I:
        a = centre.s_minus2_r
        d11, d12 = a - upper.s_minus2_r, lower.s_minus2_r - a
    else:
        a = centre.s_minus1_r
        d11, d12 = a - lower.s_minus1_r, upper.s_minus1_r - a
    return (a, b, r), (d11, d12, d21, d22, mu, mu)


def collinear_connection(profile, r, zeta, solution_type):
    """Endpoints p_-^0, p_+^0 and common flux beta^0 = r zeta of the collinear connection at level r."""
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    zeta = zeta / np.linalg.norm(zeta)
    inverses = branch_inverses(profile, r)
    p_plus0 = inverses.s_plus_r * zeta
    p_minus0 = -minus_branch(inverses, solution_type) * zeta
    return p_minus0, p_plus0, r * zeta


def frame_residual(profile, point, frame):
    """max |A(p + t q) - beta - t gamma| over t in {t_-, t_+}."""
    return max(float(np.linalg.norm(flux(profile, point.p + t * frame.q) - point.beta - t * frame.gamma))
               for t in (frame.t_minus, frame.t_plus))


def _frame_is_valid(profile, point, frame, brackets):
    plus, minus = brackets
    if not frame.t_minus < 0 < frame.t_plus:
        return False
    if abs(np.linalg.norm(frame.q) - 1.0) > 1e-12 or abs(float(np.dot(frame.gamma, frame.q))) > 1e-12:
        return False
    if not _inside(np.linalg.norm(point.p + frame.t_plus * frame.q), plus):
        return False
    if not _inside(np.linalg.norm(point.p + frame.t_minus * frame.q), minus):
        return False
    return frame_residual(profile, point, frame) <= FRAME_TOL * 10


def _explicit_frame_1d(profile, point, window):
    """n = 1: gamma = 0, q = sign(beta), endpoints on the branches at level |beta|."""
    level = abs(float(point.beta[0]))
    if level == 0.0:
        raise NotInS("beta = 0 has no rank-one frame in one dimension", point=point)
    try:
        inverses = branch_inverses(profile, level)
    except OutOfRange as exc:
        raise NotInS(f"|beta|={level} is not an admissible level", point=point) from exc
    q = np.sign(point.beta)
    along = float(q[0] * point.p[0])
    return RankOneFrame(q=q, gamma=np.zeros(1), t_minus=-minus_branch(inverses, window.solution_type) - along,
                        t_plus=inverses.s_plus_r - along)


def explicit_frames_1d(profile, p, beta, solution_type):
    """
    ``_explicit_frame_1d`` over arrays of points: returns (q, t_minus, t_plus)
    shaped like ``p``, NaN where |beta| is not a level in (0, sigma(s_+)).
    """
    p = np.asarray(p, dtype=float)
    beta = np.asarray(beta, dtype=float)
    level = np.abs(beta)
    admissible = (level > 0.0) & (level < profile.r_max)
    inverses = branch_inverses_array(profile, np.where(admissible, level, 0.5 * profile.r_max))
    q = np.where(beta < 0.0, -1.0, 1.0)
    along = q * p
    t_minus = np.where(admissible, -minus_branch(inverses, solution_type) - along, np.nan)
    t_plus = np.where(admissible, inverses.s_plus_r - along, np.nan)
    return q, t_minus, t_plus


def _jacobian_flux(profile, x):
    """DA(x) = (sigma' - sigma/|x|) x^ x^ + (sigma/|x|) I."""
    norm = np.linalg.norm(x)
    unit = x / norm
    ratio = float(profile.sigma(norm)) / norm
    return (float(profile.sigma_prime(norm)) - ratio) * np.outer(unit, unit) + ratio * np.eye(len(x))


def _system(profile, point, unknowns):
    n = point.dimension
    gamma_, q_, s_ = unknowns[:n], unknowns[n:2 * n], unknowns[2 * n]
    plus = point.p + s_ * q_
    minus = point.p + q_
    values = np.concatenate([flux(profile, plus) - point.beta - s_ * gamma_,
                             flux(profile, minus) - point.beta - gamma_,
                             [np.dot(gamma_, q_)]])
    jac = np.zeros((2 * n + 1, 2 * n + 1))
    d_plus = _jacobian_flux(profile, plus)
    jac[:n, :n] = -s_ * np.eye(n)
    jac[:n, n:2 * n] = s_ * d_plus
    jac[:n, 2 * n] = d_plus @ q_ - gamma_
    jac[n:2 * n, :n] = -np.eye(n)
    jac[n:2 * n, n:2 * n] = _jacobian_flux(profile, minus)
    jac[2 * n, :n] = q_
    jac[2 * n, n:2 * n] = gamma_
    return values, jac


def _newton(profile, point, unknowns, max_iter=60):
    values, jac = _system(profile, point, unknowns)
    norm = np.linalg.norm(values)
    for _ in range(max_iter):
        if norm <= FRAME_TOL * 1e-2:
            break
        try:
            step = np.linalg.solve(jac, -values)
        except np.linalg.LinAlgError:
            return unknowns, np.inf
        damping = 1.0
        while damping > 1e-6:
            trial = unknowns + damping * step
            if np.linalg.norm(trial[point.dimension:2 * point.dimension]) > 0:
                trial_values, trial_jac = _system(profile, point, trial)
                trial_norm = np.linalg.norm(trial_values)
                if np.isfinite(trial_norm) and trial_norm < (1.0 - 1e-4 * damping) * norm:
                    break
            damping *= 0.5
        else:
            break
        unknowns, values, jac, norm = trial, trial_values, trial_jac, trial_norm
    return unknowns, norm


def _seed_from_endpoints(profile, point, p_minus, p_plus):
    q_ = p_minus - point.p
    length = np.linalg.norm(q_)
    if length == 0:
        return None
    s_ = -np.linalg.norm(p_plus - point.p) / length
    gamma_ = flux(profile, point.p + q_) - point.beta
    gamma_ = gamma_ - np.dot(gamma_, q_) / length ** 2 * q_
    return np.concatenate([gamma_, q_, [s_]])


def _seeds(profile, point, window, initial_guess, rng):
    if initial_guess is not None:
        f = initial_guess
        yield np.concatenate([f.t_minus * f.gamma, f.t_minus * f.q, [f.t_plus / f.t_minus]])
    level = float(np.linalg.norm(point.beta))
    if 0 < level < profile.r_max:
        zeta = point.beta / level
    else:
        level = window.r
        norm_p = np.linalg.norm(point.p)
        zeta = point.p / norm_p if norm_p > 0 else np.eye(point.dimension)[0]
    p_minus0, p_plus0, _ = collinear_connection(profile, level, zeta, window.solution_type)
    seed = _seed_from_endpoints(profile, point, p_minus0, p_plus0)
    if seed is not None:
        yield seed
    for _ in range(RANDOM_SEEDS):
        zeta = rng.normal(size=point.dimension)
        p_minus0, p_plus0, _ = collinear_connection(profile, window.r, zeta, window.solution_type)
        seed = _seed_from_endpoints(profile, point, p_minus0, p_plus0)
        if seed is not None:
            yield seed


def solve_frame(profile, point, window, initial_guess=None, seed=0):
    """
    Rank-one frame through a diagonal point with endpoints in the window's brackets.

    For n = 2 the system
        A(p + s'q') = beta + s'gamma',  A(p + q') = beta + gamma',  gamma'.q' = 0
    is solved by damped Newton from the collinear seed, then from random
    unit directions; the frame is q = -q'/|q'|, gamma = -gamma'/|q'|,
    t_+ = -s'|q'|, t_- = -|q'|. For n = 1 the frame is explicit.

    Parameters:
    profile (Profile): The non-Fourier profile.
    point (DiagonalPoint): The point (p, beta).
    window (Window): Level window and solution type.
    initial_guess (RankOneFrame): Optional warm start.

    Returns:
    RankOneFrame: A frame satisfying every bracket and the defining identities.
    """
    brackets = window_brackets(profile, window)
    plus_hi = brackets[0][1]
    if np.linalg.norm(point.p) > plus_hi + BRACKET_TOL:
        raise NotInS(f"|p|={np.linalg.norm(point.p):.6g} exceeds s_+(r+mu)={plus_hi:.6g}", point=point)
    if point.dimension == 1:
        frame = _explicit_frame_1d(profile, point, window)
        if _frame_is_valid(profile, point, frame, brackets):
            return frame
        raise NotInS("explicit one-dimensional frame violates the window brackets", point=point, frame=frame)

    n = point.dimension
    rng = np.random.default_rng(seed)
    best = np.inf
    for attempt, unknowns in enumerate(_seeds(profile, point, window, initial_guess, rng)):
        unknowns, residual = _newton(profile, point, unknowns)
        best = min(best, residual)
        q_, s_ = unknowns[n:2 * n], unknowns[2 * n]
        length = np.linalg.norm(q_)
        if not np.isfinite(residual) or residual > FRAME_TOL or length == 0:
            continue
        frame = RankOneFrame(q=-q_ / length, gamma=-unknowns[:n] / length, t_minus=-length, t_plus=-s_ * length)
        if _frame_is_valid(profile, point, frame, brackets):
            logger.debug("solve_frame converged from seed %d with residual %.2e", attempt, residual)
            return frame
    raise NotInS(f"No frame found from any seed (best residual {best:.3e})", point=point, residual=best)


def det_B(profile, v, u, q, gamma, window=None):
    """
    Determinant certificate of the frame system at endpoints v (plus side),
    u (minus side), direction q and flux slope gamma.
    """
    v, u, q, gamma = (np.atleast_1d(np.asarray(x, dtype=float)) for x in (v, u, q, gamma))
    if np.linalg.norm(gamma) > 1.0 + 1e-12:
        raise OutOfDomain(f"|gamma|={np.linalg.norm(gamma):.3g} exceeds 1")
    if window is not None:
        plus, minus = window_brackets(profile, window)
        if not (_inside(np.linalg.norm(v), plus) and _inside(np.linalg.norm(u), minus)):
            raise OutOfDomain("endpoints outside the window brackets")
    return float(_det_batch(profile, v[None], u[None], q[None], gamma[None])[0])


def _det_batch(profile, v, u, q, gamma):
    n = v.shape[-1]
    nv = np.linalg.norm(v, axis=-1)
    nu = np.linalg.norm(u, axis=-1)
    v_hat, u_hat = v / nv[:, None], u / nu[:, None]
    a_v, a_u = profile.sigma(nv) / nv, profile.sigma(nu) / nu
    b_v, b_u = profile.sigma_prime(nv), profile.sigma_prime(nu)
    gap = a_u - a_v
    cos_vq = np.sum(v_hat * q, axis=-1)
    w = ((b_v - a_v) * cos_vq)[:, None] * v_hat + a_v[:, None] * q
    scale = gap * ((b_v - a_v) * cos_vq ** 2 + a_v)
    matrix = (np.eye(n)[None]
              + ((b_u - a_u) / gap)[:, None, None] * np.einsum("ki,kj->kij", u_hat, u_hat)
              - ((b_v - a_v) / gap)[:, None, None] * np.einsum("ki,kj->kij", v_hat, v_hat)
              + (1.0 / scale)[:, None, None] * np.einsum("ki,kj->kij", w - gamma, w + gamma))
    return np.linalg.det(matrix)


def _unit_directions(dimension, count=64):
    if dimension == 1:
        return np.array([[1.0], [-1.0]])
    angles = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def _orders_strictly(profile, r, mu, solution_type):
    centre = branch_inverses(profile, r)
    lower = branch_inverses(profile, r - mu)
    upper = branch_inverses(profile, r + mu)
    if SolutionType.parse(solution_type) is SolutionType.TYPE_I:
        middle = 0.5 * (centre.s_minus2_r + centre.s_plus_r)
        return lower.s_minus2_r < middle < lower.s_plus_r
    middle = 0.5 * (centre.s_minus1_r + centre.s_plus_r)
    return upper.s_minus1_r < middle < lower.s_plus_r


def _clip_radius(x, bracket):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / norm * np.clip(norm, bracket[0], bracket[1])


def estimate_mu_prime(profile, r, solution_type, dimension=1, samples=1000, mu0=None, seed=0):
    """
    Largest mu = mu0 / 2^k for which the window around r is certified.

    A window passes when the branch ordering of the collinear construction
    holds and |DET| stays above d/2 on ``samples`` perturbed configurations,
    d being the smallest |DET| of the collinear configurations over unit
    directions. Perturbations are drawn within perturbation_bound.
    """
    solution_type = SolutionType.parse(solution_type)
    r_max = profile.r_max
    if not 0 < r < r_max:
        raise OutOfRange(f"Flux level r={r} outside (0, {r_max})", r=r)
    mu0 = min(r, r_max - r) / 2.0 if mu0 is None else mu0
    centre = branch_inverses(profile, r)
    k_bar, l_bar = centre.s_plus_r, -minus_branch(centre, solution_type)
    directions = _unit_directions(dimension)
    zeros = np.zeros_like(directions)
    d = float(np.abs(_det_batch(profile, k_bar * directions, l_bar * directions, directions, zeros)).min())
    rng = np.random.default_rng(seed)
    for k in range(MAX_HALVINGS + 1):
        mu = mu0 / 2 ** k
        if not _orders_strictly(profile, r, mu, solution_type):
            continue
        try:
            landmarks, widths = window_widths(profile, r, mu, solution_type)
            radius = perturbation_bound(*landmarks, *widths)
        except OutOfDomain:
            continue
        plus, minus = window_brackets(profile, Window(r=r, mu=mu, solution_type=solution_type))
        zeta = directions[rng.integers(len(directions), size=samples)]
        if dimension > 1:
            zeta = rng.normal(size=(samples, dimension))
            zeta /= np.linalg.norm(zeta, axis=-1, keepdims=True)

        def jitter(scale):
            step = rng.normal(size=(samples, dimension))
            step /= np.maximum(np.linalg.norm(step, axis=-1, keepdims=True), 1e-300)
            return step * scale * rng.uniform(0, 1, size=(samples, 1))

        span = k_bar - l_bar
        v = _clip_radius(k_bar * zeta + jitter(radius), plus)
        u = _clip_radius(l_bar * zeta + jitter(radius), minus)
        q = zeta + jitter(4.0 * radius / span)
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        gamma = jitter(min(2.0 * radius / span, 1.0))
        if dimension == 1:
            gamma = np.zeros_like(gamma)
        min_det = float(np.abs(_det_batch(profile, v, u, q, gamma)).min())
        if min_det > d / 2.0:
            logger.debug("mu'(%.4g) = %.4g after %d halvings (d=%.4g, min|DET|=%.4g)", r, mu, k, d, min_det)
            return MuEstimate(mu=mu, d=d, min_det=min_det, halvings=k)
    raise NoWindow(f"No certified window around r={r} down to mu={mu0 / 2 ** MAX_HALVINGS:.3g}", r=r)


def decompose(point, frame, b):
    """
    Split xi = [[p, c], [B, beta]] (with free c = 0, B = 0) along the rank-one
    direction eta = [[q, b], [gamma (x) q / b, gamma]] into xi_+/- = xi + t_+/- eta.
    """
    if b == 0:
        raise ValueError("the scaling b must be nonzero")
    n = point.dimension
    eta = np.zeros((1 + n, n + 1))
    eta[0, :n] = frame.q
    eta[0, n] = b
    eta[1:, :n] = np.outer(frame.gamma, frame.q) / b
    eta[1:, n] = frame.gamma
    xi = np.zeros((1 + n, n + 1))
    xi[0, :n] = point.p
    xi[1:, n] = point.beta
    return Decomposition(xi=xi, eta=eta, xi_minus=xi + frame.t_minus * eta, xi_plus=xi + frame.t_plus * eta,
                         lam=frame.lam)


def is_rank_one(matrix, tol=1e-10):
    singular = np.linalg.svd(matrix, compute_uv=False)
    return singular[0] > 0 and (len(singular) < 2 or singular[1] <= tol * singular[0])


def collinear_distance(profile, p_minus, p_plus, r, solution_type):
    """
    Distance of a rank-one pair to the collinear configuration at level r whose
    axis bisects p_+/|p_+| and -p_-/|p_-|.
    """
    zeta = p_plus / np.linalg.norm(p_plus) - p_minus / np.linalg.norm(p_minus)
    zeta = zeta / np.linalg.norm(zeta)
    p_minus0, p_plus0, beta0 = collinear_connection(profile, r, zeta, solution_type)
    return max(np.linalg.norm(p_minus0 - p_minus), np.linalg.norm(p_plus0 - p_plus),
               np.linalg.norm(beta0 - flux(profile, p_minus)), np.linalg.norm(beta0 - flux(profile, p_plus)))

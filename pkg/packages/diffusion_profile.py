"""
Non-Fourier diffusion profiles sigma(s) = s f(s^2), their landmarks and branch
inverses, and the monotone modified profile used for the classical pre-solve.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from packages.errors import ConstructionFailed, NotNonFourier, OutOfRange
from packages.expression_grammar import compile_expression

logger = logging.getLogger(__name__)

ROOT_TOL = 1e-12
JOINT_TOL = 1e-10
MAX_SLOPE_HALVINGS = 20
BISECTION_STEPS = 64


@dataclass(frozen=True)
class Profile:
    """A diffusion profile with its non-Fourier landmarks."""
    sigma: object = field(repr=False)
    sigma_prime: object = field(repr=False)
    s_minus: float
    s_zero: float
    s_plus: float
    lambda_lo: float
    lambda_hi: float
    s_max: float
    alpha: float = 0.5
    name: str = "custom"

    @property
    def r_max(self):
        """sigma(s_+) = -sigma(s_-), the top of the admissible flux levels."""
        return float(self.sigma(self.s_plus))


@dataclass(frozen=True)
class BranchInverses:
    r: float
    s_plus_r: float
    s_minus1_r: float
    s_minus2_r: float


@dataclass(frozen=True)
class ModifiedProfile:
    """
    Monotone surrogate of sigma: linear with slope ``linear_slope`` on
    [0, s_bend], a quadratic joint on [s_bend, s_joint], sigma beyond.
    ``base`` is None for the purely linear profile.
    """
    base: object = field(repr=False)
    r_cut: object
    s_joint: float
    s_bend: float
    linear_slope: float
    theta_lo: float
    theta_hi: float

    @classmethod
    def linear(cls, slope=1.0):
        """sigma_tilde(s) = slope * s everywhere; the heat equation for slope 1."""
        return cls(base=None, r_cut=None, s_joint=np.inf, s_bend=np.inf,
                   linear_slope=float(slope), theta_lo=float(slope), theta_hi=float(slope))

    def _joint_curvature(self):
        m1 = float(self.base.sigma_prime(self.s_joint))
        return (m1 - self.linear_slope) / (self.s_joint - self.s_bend)

    def sigma_tilde(self, s):
        s = np.asarray(s, dtype=float)
        kappa = self.linear_slope
        if self.base is None:
            return kappa * s
        c = self._joint_curvature()
        out = np.where(s <= self.s_bend, kappa * s, kappa * s + 0.5 * c * (s - self.s_bend) ** 2)
        return np.where(s >= self.s_joint, self.base.sigma(np.maximum(s, self.s_joint)), out)

    def sigma_tilde_prime(self, s):
        s = np.asarray(s, dtype=float)
        kappa = self.linear_slope
        if self.base is None:
            return np.full_like(s, kappa)
        c = self._joint_curvature()
        out = np.where(s <= self.s_bend, kappa, kappa + c * (s - self.s_bend))
        return np.where(s >= self.s_joint, self.base.sigma_prime(np.maximum(s, self.s_joint)), out)

    def f_tilde(self, s_squared):
        """f~(S) = sigma~(sqrt S)/sqrt S, extended by its limit at S = 0."""
        return self.flux_coefficient(np.sqrt(np.asarray(s_squared, dtype=float)))

    def flux_coefficient(self, s):
        """sigma~(s)/s as a function of s = |p|; equals the linear slope near 0."""
        s = np.asarray(s, dtype=float)
        safe = np.where(s > 0, s, 1.0)
        return np.where(s > 0, self.sigma_tilde(safe) / safe, self.linear_slope)

    def parabolicity(self, s_squared):
        """f~(S) + 2 S f~'(S), which is sigma~'(sqrt S)."""
        return self.sigma_tilde_prime(np.sqrt(np.asarray(s_squared, dtype=float)))


def _root(function, lo, hi, target):
    g = lambda s: float(function(s)) - target
    root = brentq(g, lo, hi, xtol=ROOT_TOL * 1e-2, rtol=4 * np.finfo(float).eps, maxiter=500)
    return root


def _polish(profile, root, target, lo, hi):
    """One Newton step after bisection; kept only if it lowers the residual."""
    slope = float(profile.sigma_prime(root))
    if abs(slope) < 1e-14:
        return root
    candidate = root - (float(profile.sigma(root)) - target) / slope
    if lo < candidate < hi and abs(float(profile.sigma(candidate)) - target) < abs(float(profile.sigma(root)) - target):
        return candidate
    return root


def _first_sign_change(values, grid, start, sign_from):
    for i in range(start, len(grid) - 1):
        if sign_from < 0 and values[i] < 0 <= values[i + 1]:
            return i
        if sign_from > 0 and values[i] > 0 >= values[i + 1]:
            return i
    return None


def make_profile(sigma, sigma_prime, s_scan=50.0, s_max=None, alpha=0.5, name="custom", scan_points=20000):
    """
    Locate the landmarks of a profile and return a ``Profile``.

    Parameters:
    sigma (callable): Vectorised profile sigma(s).
    sigma_prime (callable): Its derivative.
    s_scan (float): Right end of the landmark scan.
    s_max (float): Validation horizon; 4 * s_plus when None.

    Returns:
    Profile: The profile with s_-, s_0, s_+, lambda and Lambda filled in.
    """
    grid = np.linspace(0.0, s_scan, scan_points)
    slopes = np.asarray(sigma_prime(grid), dtype=float)
    values = np.asarray(sigma(grid), dtype=float)
    if not slopes[1] < 0:
        raise NotNonFourier("sigma is not decreasing near 0", clause="dip", point=float(grid[1]))
    i = _first_sign_change(slopes, grid, 1, -1)
    if i is None:
        raise NotNonFourier("sigma has no interior minimum", clause="minimum")
    s_minus = _root(sigma_prime, grid[i], grid[i + 1], 0.0)
    j = _first_sign_change(values, grid, i + 1, -1)
    if j is None:
        raise NotNonFourier("sigma has no zero crossing after its minimum", clause="zero")
    s_zero = _root(sigma, grid[j], grid[j + 1], 0.0)
    depth = -float(sigma(s_minus))
    above = np.nonzero((grid > s_zero) & (values >= depth))[0]
    if depth <= 0 or len(above) == 0:
        raise NotNonFourier("sigma never reaches -sigma(s_-) after s_0", clause="reach")
    k = above[0]
    s_plus = _root(sigma, max(grid[k - 1], s_zero), grid[k], depth)
    if s_max is None:
        s_max = 4.0 * s_plus
    tail = np.linspace(2.0 * s_zero, s_max, 2000)[1:]
    tail_slopes = np.asarray(sigma_prime(tail), dtype=float)
    profile = Profile(sigma=sigma, sigma_prime=sigma_prime, s_minus=s_minus, s_zero=s_zero, s_plus=s_plus,
                      lambda_lo=float(tail_slopes.min()), lambda_hi=float(tail_slopes.max()),
                      s_max=float(s_max), alpha=alpha, name=name)
    logger.info("Profile %s: s_-=%.12g s_0=%.12g s_+=%.12g", name, s_minus, s_zero, s_plus)
    return profile


def quadratic_glued():
    """sigma(s) = s(s-3) on [0,4] glued C^1 to 4 + 5(s-4) beyond."""
    sigma = lambda s: np.where(np.asarray(s) <= 4.0, np.asarray(s) * (np.asarray(s) - 3.0), 4.0 + 5.0 * (np.asarray(s) - 4.0))
    sigma_prime = lambda s: np.where(np.asarray(s) <= 4.0, 2.0 * np.asarray(s) - 3.0, 5.0)
    return make_profile(sigma, sigma_prime, s_scan=10.0, name="quadratic-glued")


PROFILE_PRESETS = {"quadratic-glued": quadratic_glued}


def profile_from_expression(expression, derivative=None, s_max=None, name="custom"):
    """Build a profile from the config grammar; central differences when no derivative is given."""
    sigma = compile_expression(expression, ("s",))
    if derivative:
        sigma_prime = compile_expression(derivative, ("s",))
    else:
        step = 1e-6
        sigma_prime = lambda s: (sigma(np.asarray(s, dtype=float) + step) - sigma(np.asarray(s, dtype=float) - step)) / (2 * step)
    return make_profile(sigma, sigma_prime, s_max=s_max, name=name)


def validate_nf(profile, samples=10000, raise_on_failure=True):
    """
    Check every clause of the non-Fourier hypothesis on sampled points.

    Returns:
    dict: clause name -> {"passed": bool, "point": violating s or None}.
    """
    if samples < 1000:
        raise ValueError("validate_nf needs at least 1000 samples")
    sigma, d_sigma = profile.sigma, profile.sigma_prime
    report = {}

    def record(clause, mask, points):
        bad = np.nonzero(~mask)[0]
        report[clause] = {"passed": len(bad) == 0, "point": float(points[bad[0]]) if len(bad) else None}

    origin = np.array([0.0])
    record("sigma(0)=0", np.abs(sigma(origin)) <= ROOT_TOL, origin)
    order = np.array([profile.s_zero > profile.s_minus > 0])
    record("s_zero>s_minus>0", order, np.array([profile.s_minus]))
    zero = np.array([profile.s_zero])
    record("sigma(s_zero)=0", np.abs(sigma(zero)) <= ROOT_TOL * max(1.0, abs(float(d_sigma(zero)))), zero)
    left = np.linspace(0.0, profile.s_minus, samples)[1:-1]
    record("decreasing on (0,s_minus)", d_sigma(left) < 0, left)
    middle = np.linspace(profile.s_minus, profile.s_max, samples)[1:]
    middle = middle[np.abs(middle - profile.s_minus) > 1e-9]
    record("increasing on (s_minus,s_max]", d_sigma(middle) > 0, middle)
    top = np.array([profile.s_plus])
    reach = (np.abs(sigma(top) + sigma(np.array([profile.s_minus]))) <= 1e-10) & (sigma(top) > 0) & (top > profile.s_zero)
    record("sigma(s_plus)=-sigma(s_minus)>0", reach, top)
    tail = np.linspace(2.0 * profile.s_zero, profile.s_max, samples)[1:]
    slopes = d_sigma(tail)
    record("slope bounds beyond 2 s_zero",
           (slopes >= profile.lambda_lo - 1e-12) & (slopes <= profile.lambda_hi + 1e-12) & (profile.lambda_lo > 0), tail)

    failed = [clause for clause, entry in report.items() if not entry["passed"]]
    if failed and raise_on_failure:
        clause = failed[0]
        raise NotNonFourier(f"Clause '{clause}' fails at s={report[clause]['point']}", clause=clause,
                            point=report[clause]["point"], report=report)
    return report


def branch_inverses(profile, r):
    """The three solutions of sigma(s) = r, -r, -r on their branches."""
    r_max = profile.r_max
    if not 0.0 < r < r_max:
        raise OutOfRange(f"Flux level r={r} outside (0, {r_max})", r=r, r_max=r_max)
    s_plus_r = _polish(profile, _root(profile.sigma, profile.s_zero, profile.s_plus, r), r, profile.s_zero, profile.s_plus)
    s_minus1_r = _polish(profile, _root(profile.sigma, 0.0, profile.s_minus, -r), -r, 0.0, profile.s_minus)
    s_minus2_r = _polish(profile, _root(profile.sigma, profile.s_minus, profile.s_zero, -r), -r, profile.s_minus, profile.s_zero)
    return BranchInverses(r=float(r), s_plus_r=s_plus_r, s_minus1_r=s_minus1_r, s_minus2_r=s_minus2_r)


def _bisect_array(function, lo, hi, target, increasing):
    lo = np.full_like(target, lo)
    hi = np.full_like(target, hi)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        above = np.asarray(function(mid)) > target
        if not increasing:
            above = ~above
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


def branch_inverses_array(profile, levels):
    """
    ``branch_inverses`` over an array of levels, by bisection on each branch
    and one Newton step kept only where it lowers the defect.

    Returns:
    BranchInverses: With array fields shaped like ``levels``.
    """
    levels = np.asarray(levels, dtype=float)
    if np.any((levels <= 0.0) | (levels >= profile.r_max)):
        bad = levels[(levels <= 0.0) | (levels >= profile.r_max)].flat[0]
        raise OutOfRange(f"Flux level r={bad} outside (0, {profile.r_max})", r=float(bad), r_max=profile.r_max)

    def solve(lo, hi, target, increasing):
        root = _bisect_array(profile.sigma, lo, hi, target, increasing)
        slope = np.asarray(profile.sigma_prime(root), dtype=float)
        defect = np.asarray(profile.sigma(root)) - target
        safe = np.where(np.abs(slope) > 0, slope, 1.0)
        polished = np.clip(root - defect / safe, lo, hi)
        better = np.abs(np.asarray(profile.sigma(polished)) - target) < np.abs(defect)
        return np.where(better, polished, root)

    return BranchInverses(r=levels,
                          s_plus_r=solve(profile.s_zero, profile.s_plus, levels, True),
                          s_minus1_r=solve(0.0, profile.s_minus, -levels, False),
                          s_minus2_r=solve(profile.s_minus, profile.s_zero, -levels, True))


def radial_flux(sigma_function, p):
    """sigma(|p|) p/|p| along the last axis, 0 where p = 0."""
    p = np.asarray(p, dtype=float)
    norm = np.linalg.norm(p, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, np.asarray(sigma_function(safe)) * p / safe, 0.0)


def flux(profile, p):
    """A(p) = sigma(|p|) p/|p| for vectors along the last axis of p."""
    return radial_flux(profile.sigma, p)


def modified_flux(mod_profile, p):
    """A~(p) = sigma~(|p|) p/|p|."""
    return radial_flux(mod_profile.sigma_tilde, p)


def modify_profile(profile, r_cut, samples=10000):
    """
    Build the modified profile rejoining sigma at s_+(r_cut).

    sigma~ is kappa*s up to s_bend and then a quadratic whose slope ramps
    linearly from kappa to sigma'(s_+(r_cut)), reaching the value r_cut there.
    kappa starts at min(sigma'(s_j)/2, r_cut/(2 s_j)) and is halved until
    sigma~ > sigma on (0, s_j) holds at every sample.

    Parameters:
    profile (Profile): The non-Fourier profile.
    r_cut (float): Level in (0, sigma(s_+)) where sigma~ rejoins sigma.

    Returns:
    ModifiedProfile: The monotone surrogate with its parabolicity bounds.
    """
    s_joint = branch_inverses(profile, r_cut).s_plus_r
    m1 = float(profile.sigma_prime(s_joint))
    if not m1 > 0:
        raise ConstructionFailed(f"sigma is flat at the joint s={s_joint:.6g}", pinch=float(s_joint))
    kappa = min(0.5 * m1, r_cut / (2.0 * s_joint))
    s_linear = s_joint / 4.0
    grid = np.linspace(0.0, s_joint, samples + 2)[1:-1]
    pinch = None
    for attempt in range(MAX_SLOPE_HALVINGS + 1):
        width = 2.0 * (r_cut - kappa * s_joint) / (m1 - kappa)
        s_bend = s_joint - width
        if s_bend >= s_linear:
            candidate = ModifiedProfile(base=profile, r_cut=float(r_cut), s_joint=s_joint, s_bend=s_bend,
                                        linear_slope=kappa, theta_lo=0.0, theta_hi=0.0)
            gap = candidate.sigma_tilde(grid) - profile.sigma(grid)
            if gap.min() > 0:
                break
            pinch = float(grid[np.argmin(gap)])
        else:
            pinch = float(s_bend)
        logger.warning("modify_profile: halving linear slope %.3g (attempt %d)", kappa, attempt + 1)
        kappa *= 0.5
    else:
        raise ConstructionFailed(f"Modified profile cannot stay above sigma; pinch near s={pinch}", pinch=pinch)

    span = np.linspace(0.0, profile.s_max, samples)
    slopes = candidate.sigma_tilde_prime(span)
    result = ModifiedProfile(base=profile, r_cut=float(r_cut), s_joint=s_joint, s_bend=s_bend, linear_slope=kappa,
                             theta_lo=float(slopes.min()), theta_hi=float(slopes.max()))
    logger.info("Modified profile at r_cut=%.6g: kappa=%.4g theta=%.4g Theta=%.4g", r_cut, kappa,
                result.theta_lo, result.theta_hi)
    return result

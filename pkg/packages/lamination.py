"""
Lamination patches and the divergence right-inverse on space-time boxes.

A patch omega = (phi, psi) oscillates along the rank-one direction eta: its
gradient is -lambda1 * eta or lambda2 * eta away from a small set. phi is a
mollified sawtooth in the phase q.x + b t times a smooth cutoff, corrected to
zero mean on every slice; psi is the curl of a stream function and therefore
divergence free, exactly so on the grid.

In one dimension ``grid_laminate`` puts the kinks on nodes instead, so every
cell away from the closure cells carries one of its two slopes exactly.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from packages import space_time_grid as stg
from packages.errors import BoundaryNotClean, BudgetInfeasible, MeanNotZero

logger = logging.getLogger(__name__)

AUDIT_FACTOR = 4
PLATEAU_COLLAR = 0.1
MAX_NU_HALVINGS = 40
EXACT_TOL = 1e-9
C_DEFAULT = {1: 1.0, 2: 4.0}
HYSTERESIS = 0.5
RATE_SHARE = 0.8


@dataclass(frozen=True)
class BoxST:
    """Closed box of grid nodes node_lo..node_hi (per axis) over slices slice_lo..slice_hi."""
    grid: stg.GridST = field(repr=False)
    node_lo: tuple
    node_hi: tuple
    slice_lo: int
    slice_hi: int

    def __post_init__(self):
        object.__setattr__(self, "node_lo", tuple(int(i) for i in self.node_lo))
        object.__setattr__(self, "node_hi", tuple(int(i) for i in self.node_hi))
        if len(self.node_lo) != self.grid.dimension or len(self.node_hi) != self.grid.dimension:
            raise ValueError("box corners must have one index per spatial axis")
        for lo, hi, count in zip(self.node_lo, self.node_hi, self.grid.nodes):
            if not 0 <= lo < hi < count:
                raise ValueError(f"box node range [{lo}, {hi}] outside the grid (0..{count - 1})")
        if not 0 <= self.slice_lo < self.slice_hi <= self.grid.steps:
            raise ValueError(f"box slice range [{self.slice_lo}, {self.slice_hi}] outside 0..{self.grid.steps}")

    @property
    def dimension(self):
        return self.grid.dimension

    @property
    def box_id(self):
        corners = "_".join(f"{lo}-{hi}" for lo, hi in zip(self.node_lo, self.node_hi))
        return f"x{corners}_t{self.slice_lo}-{self.slice_hi}"

    @property
    def lower(self):
        return tuple(float(self.grid.axes[k][self.node_lo[k]]) for k in range(self.dimension))

    @property
    def upper(self):
        return tuple(float(self.grid.axes[k][self.node_hi[k]]) for k in range(self.dimension))

    @property
    def side_lengths(self):
        """|J_1|, ..., |J_n|."""
        return tuple(hi - lo for lo, hi in zip(self.lower, self.upper))

    @property
    def time_interval(self):
        return float(self.grid.times[self.slice_lo]), float(self.grid.times[self.slice_hi])

    @property
    def duration(self):
        t0, t1 = self.time_interval
        return t1 - t0

    @property
    def centre(self):
        t0, t1 = self.time_interval
        return tuple(0.5 * (lo + hi) for lo, hi in zip(self.lower, self.upper)) + (0.5 * (t0 + t1),)

    @property
    def diameter(self):
        return float(np.sqrt(sum(L ** 2 for L in self.side_lengths) + self.duration ** 2))

    @property
    def measure(self):
        return float(np.prod(self.side_lengths) * self.duration)

    @property
    def node_counts(self):
        return tuple(hi - lo + 1 for lo, hi in zip(self.node_lo, self.node_hi))

    @property
    def slices(self):
        return slice(self.slice_lo, self.slice_hi + 1)

    def node_index(self):
        """Index of the box nodes in a (slices, nodes...) array."""
        return (self.slices,) + tuple(slice(lo, hi + 1) for lo, hi in zip(self.node_lo, self.node_hi))

    def face_index(self, axis):
        """Index of the faces joining box nodes along ``axis`` in a face array."""
        index = [self.slices]
        for k, (lo, hi) in enumerate(zip(self.node_lo, self.node_hi)):
            index.append(slice(lo, hi) if k == axis else slice(lo, hi + 1))
        return tuple(index)

    def cell_index(self):
        return (self.slices,) + tuple(slice(lo, hi) for lo, hi in zip(self.node_lo, self.node_hi))

    def volumes(self):
        """Control volumes of the whole grid restricted to the box nodes."""
        return stg.control_volumes(self.grid)[tuple(slice(lo, hi + 1) for lo, hi in zip(self.node_lo, self.node_hi))]

    def dual_widths(self, axis):
        lo, hi = self.node_lo[axis], self.node_hi[axis]
        return stg.dual_widths(self.grid, axis)[lo:hi + 1]

    def local_axes(self):
        """Node coordinates inside the box, spatial axes then time."""
        axes = [self.grid.axes[k][lo:hi + 1] for k, (lo, hi) in enumerate(zip(self.node_lo, self.node_hi))]
        return axes + [self.grid.times[self.slices]]


@dataclass(frozen=True)
class EtaFrame:
    """The rank-one direction eta = [[q, b], [gamma (x) q / b, gamma]]."""
    q: np.ndarray
    b: float
    gamma: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            raise ValueError("q must be a unit vector")
        if abs(float(np.dot(q, gamma))) > 1e-12:
            raise ValueError("gamma must be orthogonal to q")
        if self.b == 0:
            raise ValueError("b must be nonzero")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "gamma", gamma)

    @property
    def matrix(self):
        n = len(self.q)
        eta = np.zeros((1 + n, n + 1))
        eta[0, :n] = self.q
        eta[0, n] = self.b
        eta[1:, :n] = np.outer(self.gamma, self.q) / self.b
        eta[1:, n] = self.gamma
        return eta


@dataclass(frozen=True)
class Sawtooth:
    """
    1-periodic zero-mean profile with slope -lambda1 on a fraction
    lambda2/(lambda1+lambda2) of each period and lambda2 elsewhere, its two
    kinks smoothed over a half-width rho (phase units).
    """
    lambda1: float
    lambda2: float
    rho: float

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("sawtooth slopes must be positive")
        if not 0 < self.rho < 0.5 * min(self.fraction, 1.0 - self.fraction):
            raise ValueError(f"mollification radius {self.rho} too large for the kink spacing")

    @property
    def fraction(self):
        return self.lambda2 / (self.lambda1 + self.lambda2)

    @property
    def kinks(self):
        a = self.fraction
        return 0.5 * a, 1.0 - 0.5 * a

    @property
    def sup(self):
        return self.lambda1 * self.kinks[0]

    def _pieces(self, s):
        c1, c2 = self.kinks
        l1, l2 = self.lambda1, self.lambda2
        frac = np.mod(s, 1.0)
        value = np.where(frac <= c1, -l1 * frac, np.where(frac <= c2, -l1 * c1 + l2 * (frac - c1), -l1 * (frac - 1.0)))
        slope = np.where((frac > c1) & (frac <= c2), l2, -l1)
        anti = np.where(frac <= c1, -0.5 * l1 * frac ** 2,
                        np.where(frac <= c2, -0.5 * l1 * c1 ** 2 - l1 * c1 * (frac - c1) + 0.5 * l2 * (frac - c1) ** 2,
                                 -0.5 * l1 * (1.0 - frac) ** 2))
        return frac, value, slope, anti

    def evaluate(self, s):
        """Values, slopes and the periodic antiderivative of the mollified profile."""
        frac, value, slope, anti = self._pieces(np.asarray(s, dtype=float))
        jump = self.lambda1 + self.lambda2
        for centre, delta in zip(self.kinks, (jump, -jump)):
            z = (frac - centre) / self.rho
            inside = np.abs(z) < 1.0
            x = np.clip(0.5 * (z + 1.0), 0.0, 1.0)
            m_left = -self.lambda1 if delta > 0 else self.lambda2
            smooth_value = (value - np.where(z > 0, delta * self.rho * z, 0.0)) + delta * self.rho * (2 * x ** 6 - 6 * x ** 5 + 5 * x ** 4)
            value = np.where(inside, smooth_value, value)
            slope = np.where(inside, m_left + delta * smootherstep(x), slope)
            shift = 2.0 * (2.0 * x ** 7 / 7.0 - x ** 6 + x ** 5) - 0.5 * np.maximum(z, 0.0) ** 2
            anti = anti + np.where(inside, delta * self.rho ** 2 * shift, np.where(z >= 1.0, delta * self.rho ** 2 / 14.0, 0.0))
        return value, slope, anti


def smootherstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (10.0 - 15.0 * x + 6.0 * x ** 2)


def smootherstep_prime(x):
    inside = (x > 0) & (x < 1)
    return np.where(inside, 30.0 * x ** 2 * (1.0 - x) ** 2, 0.0)


def smootherstep_second(x):
    inside = (x > 0) & (x < 1)
    return np.where(inside, 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x), 0.0)


@dataclass(frozen=True)
class Cutoff:
    """Product of plateau ramps, one per space-time axis: zero on a margin, smootherstep over a width."""
    lengths: tuple
    margin: tuple
    width: tuple

    def axis_factors(self, axis, z):
        """(R, dR/dx, d2R/dx2, left-ramp derivative, its derivative) on normalized coordinates z."""
        m, w, L = self.margin[axis], self.width[axis], self.lengths[axis]
        u1, u2 = (z - m) / w, (1.0 - m - z) / w
        left, right = smootherstep(u1), smootherstep(u2)
        left_d, right_d = smootherstep_prime(u1) / w, -smootherstep_prime(u2) / w
        left_dd, right_dd = smootherstep_second(u1) / w ** 2, smootherstep_second(u2) / w ** 2
        value = left * right
        first = (left_d * right + left * right_d) / L
        second = (left_dd * right + 2.0 * left_d * right_d + left * right_dd) / L ** 2
        return value, first, second, left_d / L, left_dd / L ** 2

    def mean_value(self, axis):
        return 1.0 - 2.0 * self.margin[axis] - self.width[axis]


@dataclass
class LaminatePatch:
    box: BoxST = field(repr=False)
    phi: np.ndarray = field(repr=False)
    psi: tuple = field(repr=False)
    eta: EtaFrame = None
    lambda1: float = 0.0
    lambda2: float = 0.0
    nu: float = 0.0
    rho_m: float = 0.0
    cutoff: Cutoff = None
    audit: dict = field(default_factory=dict)

    @property
    def eta1(self):
        return -self.lambda1 * self.eta.matrix

    @property
    def eta2(self):
        return self.lambda2 * self.eta.matrix

    @property
    def is_zero(self):
        return not np.any(self.phi) and not any(np.any(p) for p in self.psi)


def _face_shapes(box):
    counts = box.node_counts
    slices = box.slice_hi - box.slice_lo + 1
    shapes = []
    for axis in range(box.dimension):
        shape = list(counts)
        shape[axis] -= 1
        shapes.append((slices,) + tuple(shape))
    return shapes


def zero_patch(box, eta=None, lambda1=0.0, lambda2=0.0):
    shape = (box.slice_hi - box.slice_lo + 1,) + box.node_counts
    psi = tuple(np.zeros(s) for s in _face_shapes(box))
    audit = {"bad_measure": 0.0, "max_distance": 0.0, "sup_norm": 0.0, "mean_residual": 0.0, "div_residual": 0.0}
    return LaminatePatch(box=box, phi=np.zeros(shape), psi=psi, eta=eta, lambda1=lambda1, lambda2=lambda2, audit=audit)


class _Laminate:
    """Continuum fields of one laminate on one box."""

    def __init__(self, eta, saw, nu, box, cutoff):
        self.eta, self.saw, self.nu, self.box, self.cutoff = eta, saw, nu, box, cutoff
        self.n = box.dimension
        self.lower = np.array(box.lower + (box.time_interval[0],))
        self.lengths = np.array(box.side_lengths + (box.duration,))
        self.centre = np.array(box.centre)
        self.direction = np.concatenate([eta.q, [eta.b]])
        self.stream = 0.0 if self.n == 1 else float(eta.gamma[0] * -eta.q[1] + eta.gamma[1] * eta.q[0]) / eta.b

    def normalized(self, coords):
        return [(c - lo) / L for c, lo, L in zip(coords, self.lower, self.lengths)]

    def base(self, coords):
        """phi_0 pieces: value/nu, slope, antiderivative of the sawtooth at the phase."""
        phase = sum(d * (c - m) for d, c, m in zip(self.direction, coords, self.centre))
        return self.saw.evaluate(phase / self.nu)

    def cutoff_parts(self, coords):
        z = self.normalized(coords)
        return [self.cutoff.axis_factors(a, z[a]) for a in range(self.n + 1)]

    @staticmethod
    def product(parts, skip=()):
        out = 1.0
        for a, part in enumerate(parts):
            if a not in skip:
                out = out * part[0]
        return out

    def correction_bump(self, parts):
        """Spatial bump supported in the left collar of axis 0, with its gradient."""
        spatial = parts[:self.n]
        others = self.product(spatial, skip=(0,))
        bump = spatial[0][3] * others
        grad = [spatial[0][4] * others]
        for k in range(1, self.n):
            grad.append(spatial[0][3] * spatial[k][1] * self.product(spatial, skip=(0, k)))
        mass = float(np.prod([self.cutoff.mean_value(k) * self.lengths[k] for k in range(1, self.n)])) if self.n > 1 else 1.0
        return bump, grad, mass


def _audit_coordinates(box, factor):
    cells = [hi - lo for lo, hi in zip(box.node_lo, box.node_hi)] + [box.slice_hi - box.slice_lo]
    axes = []
    for count, lo, L in zip(cells, box.lower + (box.time_interval[0],), box.side_lengths + (box.duration,)):
        points = factor * count
        axes.append(lo + L * (np.arange(points) + 0.5) / points)
    return axes


def _continuum_audit(lam, box, factor):
    """Evaluate grad(omega) on the audit grid and measure the three laminate properties."""
    n = box.dimension
    axes = _audit_coordinates(box, factor)
    time_first = [axes[n]] + axes[:n]
    mesh = np.meshgrid(*time_first, indexing="ij")
    coords = list(mesh[1:]) + [mesh[0]]
    value, slope, anti = lam.base(coords)
    parts = lam.cutoff_parts(coords)
    chi = lam.product(parts)
    chi_x = lam.product(parts, skip=(n,))
    phi0 = lam.nu * value
    spatial_axes = tuple(range(1, n + 1))
    cell = float(np.prod([L / len(a) for L, a in zip(box.side_lengths, axes[:n])]))
    m_x = np.sum(chi_x * phi0, axis=spatial_axes, keepdims=True) * cell
    dm_x = np.sum(chi_x * slope * lam.eta.b, axis=spatial_axes, keepdims=True) * cell
    chi_t, dchi_t = parts[n][0], parts[n][1]
    bump, bump_grad, mass = lam.correction_bump(parts)
    amplitude, d_amplitude = chi_t * m_x, dchi_t * m_x + chi_t * dm_x

    grad_phi = []
    for a in range(n + 1):
        d_chi = parts[a][1] * lam.product(parts, skip=(a,))
        term = d_chi * phi0 + chi * slope * lam.direction[a]
        if a < n:
            term = term - amplitude * bump_grad[a] / mass
        else:
            term = term - d_amplitude * bump / mass
        grad_phi.append(term)
    phi = chi * phi0 - amplitude * bump / mass
    rows = [np.stack(grad_phi, axis=-1)]
    sup = np.abs(phi).max()

    if n == 2:
        c = lam.stream
        pi0 = -c * lam.nu ** 2 * anti
        d_pi = [-c * lam.nu * value * lam.direction[a] for a in range(3)]
        dd_pi = [[-c * slope * lam.direction[a] * lam.direction[b] for b in range(3)] for a in range(3)]
        d_chi = [parts[a][1] * lam.product(parts, skip=(a,)) for a in range(3)]

        def dd_chi(a, b):
            if a == b:
                return parts[a][2] * lam.product(parts, skip=(a,))
            return parts[a][1] * parts[b][1] * lam.product(parts, skip=(a, b))

        def dd_f(a, b):
            return dd_chi(a, b) * pi0 + d_chi[a] * d_pi[b] + d_chi[b] * d_pi[a] + chi * dd_pi[a][b]

        psi1 = d_chi[1] * pi0 + chi * d_pi[1]
        psi2 = -(d_chi[0] * pi0 + chi * d_pi[0])
        rows.append(np.stack([dd_f(1, b) for b in range(3)], axis=-1))
        rows.append(np.stack([-dd_f(0, b) for b in range(3)], axis=-1))
        sup = max(sup, np.abs(psi1).max(), np.abs(psi2).max())
    else:
        rows.append(np.zeros_like(rows[0]))

    gradient = np.stack(rows, axis=-2)
    eta1, eta2 = -lam.saw.lambda1 * lam.eta.matrix, lam.saw.lambda2 * lam.eta.matrix
    tol = EXACT_TOL * (1.0 + max(np.abs(eta1).max(), np.abs(eta2).max()))
    off1 = np.abs(gradient - eta1).max(axis=(-2, -1))
    off2 = np.abs(gradient - eta2).max(axis=(-2, -1))
    bad = (off1 > tol) & (off2 > tol)
    segment = eta2 - eta1
    weight = np.clip(np.einsum("...ij,ij->...", gradient - eta1, segment) / np.sum(segment ** 2), 0.0, 1.0)
    nearest = eta1 + weight[..., None, None] * segment
    distance = np.sqrt(np.sum((gradient - nearest) ** 2, axis=(-2, -1)))
    return {"bad_measure": float(bad.mean() * box.measure), "max_distance": float(distance.max()),
            "sup_norm": float(sup), "audit_points": int(bad.size)}


def _realize(lam, box):
    """Sample phi and psi on the box nodes and faces with an exact discrete zero mean."""
    n = box.dimension
    axes = box.local_axes()
    mesh = np.meshgrid(*([axes[n]] + axes[:n]), indexing="ij")
    coords = list(mesh[1:]) + [mesh[0]]
    value, _, _ = lam.base(coords)
    parts = lam.cutoff_parts(coords)
    phi = lam.product(parts) * lam.nu * value
    volumes = box.volumes()
    spatial_axes = tuple(range(1, n + 1))
    mean = np.sum(phi * volumes, axis=spatial_axes, keepdims=True)
    bump = lam.correction_bump(parts)[0]
    bump = bump[0]
    if np.sum(bump * volumes) <= 1e-14 * volumes.sum():
        bump = np.zeros(box.node_counts)
        layer = [1] + [slice(1, -1)] * (n - 1)
        bump[tuple(layer)] = 1.0
    phi = phi - mean * bump / np.sum(bump * volumes)
    phi[(slice(None),) + _boundary_mask(box)] = 0.0

    shapes = _face_shapes(box)
    if n == 1:
        return phi, (np.zeros(shapes[0]),)
    cell_axes = [0.5 * (a[1:] + a[:-1]) for a in axes[:n]]
    cmesh = np.meshgrid(*([axes[n]] + cell_axes), indexing="ij")
    ccoords = list(cmesh[1:]) + [cmesh[0]]
    _, _, anti = lam.base(ccoords)
    stream = -lam.stream * lam.product(lam.cutoff_parts(ccoords)) * lam.nu ** 2 * anti
    padded = np.pad(stream, ((0, 0), (0, 0), (1, 1)))
    flux_x = np.diff(padded, axis=2)
    padded = np.pad(stream, ((0, 0), (1, 1), (0, 0)))
    flux_y = -np.diff(padded, axis=1)
    psi_x = flux_x / box.dual_widths(1)[None, None, :]
    psi_y = flux_y / box.dual_widths(0)[None, :, None]
    return phi, (psi_x, psi_y)


def _boundary_mask(box):
    """Boolean mask of the box's spatial boundary nodes."""
    mask = np.zeros(box.node_counts, dtype=bool)
    for axis in range(box.dimension):
        index = [slice(None)] * box.dimension
        index[axis] = 0
        mask[tuple(index)] = True
        index[axis] = -1
        mask[tuple(index)] = True
    return (mask,)


def box_divergence(faces, box):
    """Divergence at box nodes of a box face field; faces leaving the box carry zero flux."""
    total = 0.0
    for axis, values in enumerate(faces):
        array_axis = 1 + axis
        pad = [(0, 0)] * values.ndim
        pad[array_axis] = (1, 1)
        widths = box.dual_widths(axis)
        shape = [1] * values.ndim
        shape[array_axis] = len(widths)
        total = total + np.diff(np.pad(values, pad), axis=array_axis) / widths.reshape(shape)
    return total


def _realized_checks(phi, psi, box, scale):
    volumes = box.volumes()
    spatial_axes = tuple(range(1, box.dimension + 1))
    norm = max(np.abs(phi).max(), 1e-300)
    mean = np.abs(np.sum(phi * volumes, axis=spatial_axes)).max() / volumes.sum()
    div = np.abs(box_divergence(psi, box)).max() if box.dimension > 1 else 0.0
    return {"mean_residual": float(mean / norm), "div_residual": float(div / max(scale, 1e-300)),
            "sup_phi": float(np.abs(phi).max()), "sup_psi": float(max(np.abs(p).max() for p in psi))}


def default_cutoff(box, eps):
    """Plateau on the inner 80% of each axis, shrunk until the collar fits a sixth of the measure budget."""
    relative = min(eps / (3.0 * box.measure), 0.5)
    collar = min(PLATEAU_COLLAR, relative / (4.0 * (box.dimension + 1)))
    count = box.dimension + 1
    return Cutoff(lengths=box.side_lengths + (box.duration,), margin=(0.25 * collar,) * count,
                  width=(0.75 * collar,) * count)


def build_laminate(eta_frame, lambda1, lambda2, box, eps, nu=None, cutoff=None, rho=None, enforce=True,
                   audit=True, audit_factor=AUDIT_FACTOR):
    """
    Build a lamination patch along eta on ``box``.

    With ``enforce`` the oscillation period nu is chosen from the eps budgets
    (thirds for the bad-set measure, the distance to the segment
    [eta1, eta2] and the sup norm) and halved until the audit passes. Without
    it the caller's nu, cutoff and rho are used as given and the audit is
    only reported.

    Parameters:
    eta_frame (EtaFrame): Direction data (q, b, gamma).
    lambda1, lambda2 (float): Positive weights; the gradients are -lambda1 eta and lambda2 eta.
    box (BoxST): Space-time box on the working grid.
    eps (float): Tolerance of the laminate properties.

    Returns:
    LaminatePatch: Realized fields on the box with their audit record.
    """
    if not (lambda1 > 0 and lambda2 > 0 and eps > 0):
        raise ValueError("lambda1, lambda2 and eps must be positive")
    if enforce and eps >= box.measure:
        logger.debug("eps %.3g covers the box measure %.3g; returning the zero patch", eps, box.measure)
        return zero_patch(box, eta_frame, lambda1, lambda2)

    fraction = lambda2 / (lambda1 + lambda2)
    relative = min(eps / (3.0 * box.measure), 0.5)
    if rho is None:
        rho = min(1.0 / 20.0, relative / 8.0, 0.45 * min(fraction, 1.0 - fraction))
    saw = Sawtooth(lambda1, lambda2, rho)
    cutoff = cutoff or default_cutoff(box, eps)
    n = box.dimension
    scale = max(lambda1, lambda2) * np.abs(eta_frame.matrix).max()

    if nu is None:
        ratio = abs(float(np.linalg.norm(eta_frame.gamma))) / abs(eta_frame.b)
        steep = sum(1.875 / (w * L) for w, L in zip(cutoff.width, cutoff.lengths))
        curved = sum(5.78 / (w * L) ** 2 for w, L in zip(cutoff.width, cutoff.lengths))
        reach = (saw.sup + 1.0) * (1.0 + ratio) * (1.0 + steep) * (1.0 + curved) * 6.0
        nu = min(min(box.side_lengths) / 4.0, eps / reach)

    for halving in range(MAX_NU_HALVINGS + 1):
        lam = _Laminate(eta_frame, saw, nu, box, cutoff)
        phi, psi = _realize(lam, box)
        record = _realized_checks(phi, psi, box, scale)
        if audit:
            record.update(_continuum_audit(lam, box, audit_factor))
        record.update({"nu": nu, "rho_m": rho, "halvings": halving})
        if not enforce:
            break
        passed = record["sup_phi"] < eps and record["sup_psi"] < eps
        if audit:
            passed = passed and record["bad_measure"] < eps and record["max_distance"] < eps and record["sup_norm"] < eps
        if passed:
            break
        nu *= 0.5
    else:
        raise BudgetInfeasible(f"Laminate budgets unmet on box {box.box_id} down to nu={nu:.3g}",
                               binding=_binding(record, eps), box=box.box_id)
    logger.debug("laminate on %s: nu=%.3g %s", box.box_id, nu, record)
    return LaminatePatch(box=box, phi=phi, psi=psi, eta=eta_frame, lambda1=lambda1, lambda2=lambda2, nu=nu,
                         rho_m=rho, cutoff=cutoff, audit=record)


def _binding(record, eps):
    for key in ("bad_measure", "max_distance", "sup_norm", "sup_phi"):
        if record.get(key, 0.0) >= eps:
            return key
    return "unknown"


def _pick(candidates, reference, previous, half):
    """Index (0 lower, 1 upper) of the candidate node value to keep, with hysteresis on a flip."""
    distance = [abs(c - reference) for c in candidates]
    if previous < 0:
        return int(distance[1] < distance[0])
    if distance[1 - previous] + HYSTERESIS * half < distance[previous]:
        return 1 - previous
    return previous


def _node_targets(lower, upper, previous, choice, h):
    """
    Node values of one slice whose cell slopes are lower or upper.

    The middle node keeps its previous value and slopes are chosen outward,
    each keeping its node near the previous slice; the first and last cells
    close the pattern to zero. ``choice`` is updated in place.
    """
    cells = len(lower)
    target = np.zeros(cells + 1)
    middle = cells // 2
    target[middle] = previous[middle]
    flips = 0
    sweep = [(j, j, j + 1, 1.0) for j in range(middle, cells - 1)]
    sweep += [(j, j + 1, j, -1.0) for j in range(middle - 1, 0, -1)]
    for cell, source, dest, direction in sweep:
        base = target[source]
        if np.isnan(lower[cell]):
            target[dest] = base
            choice[cell] = -1
            continue
        candidates = (base + direction * h * lower[cell], base + direction * h * upper[cell])
        half = 0.5 * h * (upper[cell] - lower[cell])
        reference = min(max(previous[dest], -half), half)
        picked = _pick(candidates, reference, choice[cell], half)
        flips += int(choice[cell] >= 0 and picked != choice[cell])
        choice[cell] = picked
        target[dest] = candidates[picked]
    return target, flips


def grid_laminate(box, lower, upper, rate, open_end=True):
    """
    One-dimensional laminate with its kinks on the nodes of ``box``.

    Away from two closure cells per slice every cell slope of phi is lower or
    upper. phi starts from zero on the first slice of the box, never moves a
    node faster than ``rate`` allows, has zero mean on every slice and
    vanishes at both end nodes. Unless ``open_end``, phi returns to zero on
    the last slice.

    Parameters:
    box (BoxST): A box of a one-dimensional grid.
    lower, upper (numpy.ndarray): (slices, cells) slopes, lower < upper; NaN keeps a cell's slope.
    rate (numpy.ndarray): (slices, nodes) bound on |phi(k) - phi(k-1)| / dt; row 0 is unused.

    Returns:
    LaminatePatch: The realized patch with psi = 0.
    """
    if box.dimension != 1:
        raise ValueError("grid_laminate works on one-dimensional boxes")
    grid = box.grid
    h, dt = grid.h, grid.dt
    slices, nodes = box.slice_hi - box.slice_lo + 1, box.node_counts[0]
    lower, upper, rate = (np.asarray(a, dtype=float) for a in (lower, upper, rate))
    if lower.shape != (slices, nodes - 1) or upper.shape != lower.shape or rate.shape != (slices, nodes):
        raise ValueError("slope and rate arrays do not match the box")
    with np.errstate(invalid="ignore"):
        if np.any(upper <= lower):
            raise ValueError("every laminated cell needs lower < upper")

    volumes = box.volumes()
    bump = np.sin(np.pi * np.arange(nodes) / (nodes - 1)) ** 2
    bump[[0, -1]] = 0.0
    bump_mass = float(np.dot(bump, volumes))
    phi = np.zeros((slices, nodes))
    target = np.zeros(nodes)
    choice = np.full(nodes - 1, -1, dtype=int)
    flips = 0
    for k in range(1, slices):
        target, changed = _node_targets(lower[k], upper[k], target, choice, h)
        flips += changed
        goal = target
        step_cap = RATE_SHARE * rate[k] * dt
        if not open_end:
            remaining = slices - 1 - k
            goal = np.where(np.abs(phi[k - 1]) >= step_cap * remaining, 0.0, target)
        trial = phi[k - 1] + np.clip(goal - phi[k - 1], -step_cap, step_cap)
        trial -= np.dot(trial, volumes) / bump_mass * bump
        step = trial - phi[k - 1]
        allowed = rate[k] * dt
        over = np.abs(step) > allowed
        theta = min(1.0, float(np.min(allowed[over] / np.abs(step[over])))) if over.any() else 1.0
        phi[k] = phi[k - 1] + theta * step
    if not open_end:
        phi[-1] = 0.0

    slopes = np.diff(phi, axis=1) / h
    with np.errstate(invalid="ignore"):
        tolerance = 1e-2 * (upper - lower)
        settled = (np.abs(slopes - lower) <= tolerance) | (np.abs(slopes - upper) <= tolerance)
    laminated = ~np.isnan(lower)
    record = _realized_checks(phi, (np.zeros((slices, nodes - 1)),), box, 1.0)
    record.update({"flips": int(flips), "closure_cells": 2, "final_lag": float(np.abs(phi[-1] - target).max()),
                   "settled_fraction": float(settled[laminated].mean()) if laminated.any() else 0.0})
    logger.debug("grid laminate on %s: %s", box.box_id, record)
    return LaminatePatch(box=box, phi=phi, psi=(np.zeros((slices, nodes - 1)),), audit=record)


@dataclass
class DivergenceInverse:
    g: tuple
    constant: float


def div_right_inverse(phi, box):
    """
    A face field g on the box with div g = phi and zero flux through the box boundary.

    phi has shape (slices, box nodes...) and must have zero quadrature mean on
    each slice and vanish on the box boundary. In 2D the column masses are
    swept in x and spread over rows with a fixed bump; the remainder is swept
    in y. The measured constant is ||g_t|| / ((|J_1| + ... + |J_n|) ||phi_t||).
    """
    phi = np.asarray(phi, dtype=float)
    norm = np.abs(phi).max()
    volumes = box.volumes()
    n = box.dimension
    spatial_axes = tuple(range(1, n + 1))
    if norm > 0:
        mean = np.abs(np.sum(phi * volumes, axis=spatial_axes)).max()
        if mean > 1e-12 * norm * volumes.sum():
            raise MeanNotZero(f"phi has slice mean {mean / volumes.sum():.3e}", mean=float(mean))
        edge = np.abs(phi[(slice(None),) + _boundary_mask(box)]).max()
        if edge > 1e-12 * norm:
            raise BoundaryNotClean(f"phi is {edge:.3e} on the box boundary", value=float(edge))

    mass = phi * volumes
    if n == 1:
        g = (np.cumsum(mass, axis=1)[:, :-1],)
    else:
        rows = box.node_counts[1]
        weights = np.sin(np.pi * np.arange(rows) / (rows - 1)) ** 2
        weights /= weights.sum()
        columns = mass.sum(axis=2)
        sweep = np.cumsum(columns, axis=1)[:, :-1]
        flux_x = sweep[:, :, None] * weights[None, None, :]
        remainder = mass - columns[:, :, None] * weights[None, None, :]
        flux_y = np.cumsum(remainder, axis=2)[:, :, :-1]
        g = (flux_x / box.dual_widths(1)[None, None, :], flux_y / box.dual_widths(0)[None, :, None])

    constant = 0.0
    if phi.shape[0] > 1:
        phi_t = np.abs(np.gradient(phi, box.grid.dt, axis=0)).max()
        if phi_t > 0:
            g_t = max(np.abs(np.gradient(component, box.grid.dt, axis=0)).max() for component in g)
            constant = float(g_t / (sum(box.side_lengths) * phi_t))
    return DivergenceInverse(g=g, constant=constant)


def apply_patch(u, v, patch, g, inplace=False):
    """u += phi and v += psi + g on the box; everything outside the box is left as it was."""
    if not inplace:
        u = u.copy()
        v = tuple(component.copy() for component in v)
    box = patch.box
    u[box.node_index()] += patch.phi
    for axis in range(box.dimension):
        v[axis][box.face_index(axis)] += patch.psi[axis] + g[axis]
    return u, v

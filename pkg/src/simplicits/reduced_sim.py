"""
Backward-Euler time stepping in the space of handle transforms.

All network evaluations happen once, in :func:`build_cubature`; the time
loop only touches the cached weights, weight gradients and the linear maps
built from them.  Each step minimizes

    1/2 |z - z_pred|_M^2 + h^2 (E_elastic + E_gravity + E_penalty + E_barrier)

with a projected Newton method and a backtracking line search.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from . import elastic
from .linalg import cholesky_solve, spd_project
from .occupancy import estimate_volume, sample_interior

__all__ = [
    'CubatureSet',
    'Collider',
    'PinRegion',
    'Script',
    'SimConfig',
    'SimState',
    'StepProblem',
    'NewtonResult',
    'SimulationError',
    'InfeasibleState',
    'RankDeficiencyWarning',
    'build_cubature',
    'build_mass_matrix',
    'select_pins',
    'apply_script',
    'barrier',
    'step_objective',
    'step_gradient',
    'step_hessian',
    'newton_solve',
    'Simulator',
    'linear_momentum',
    'elastic_energy',
]

log = logging.getLogger(__name__)

LINE_SEARCH_HALVINGS = 40
DECREMENT_TOL = 1e-13
ARMIJO_C = 1e-4


class SimulationError(RuntimeError):
    pass


class InfeasibleState(SimulationError):
    pass


class RankDeficiencyWarning(RuntimeWarning):
    pass


# --------------------------------------------------------------------------
# cubature
# --------------------------------------------------------------------------

@dataclass(eq=False)
class CubatureSet:
    """
    Fixed integration points with everything the stepper needs cached.

    ``basis`` has shape (p, 3, 12n) so that ``x_i - X_i = basis[i] @ z``;
    ``fmap`` has shape (p, 9, 12n) so that ``vec(F_i) = vec(I) + fmap[i] @ z``.
    """

    X: np.ndarray
    occupancy: np.ndarray
    mass: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    weights: np.ndarray
    weight_grads: np.ndarray
    volume: float
    basis: np.ndarray
    fmap: np.ndarray
    tikhonov: float = 0.0

    @property
    def count(self):
        return self.X.shape[0]

    @property
    def n_handles(self):
        return self.weights.shape[1]

    @property
    def dim(self):
        return 12 * self.n_handles

    @property
    def basis_matrix(self):
        """The (3p, 12n) matrix mapping z to flattened displacements."""
        return self.basis.reshape(-1, self.dim)

    @property
    def volume_weights(self):
        return self.volume / self.count * self.occupancy

    def positions(self, z):
        return self.X + self.basis @ z

    def deformation_gradients(self, z):
        return elastic.unvec(elastic.vec(np.eye(3)) + self.fmap @ z)


def _basis_rows(W, X):
    """(p, 3, n, 3, 4) tensor with entry [i, r, j, r, c] = W_ij [X_i; 1]_c."""
    p, n = W.shape
    Xh = np.concatenate([X, np.ones((p, 1))], axis=1)
    B = np.zeros((p, 3, n, 3, 4))
    block = W[:, :, None] * Xh[:, None, :]
    for r in range(3):
        B[:, r, :, r, :] = block
    return B


def _fmap_rows(W, dW, X):
    """(p, 9, n, 3, 4) tensor mapping z to vec(F - I)."""
    p, n = W.shape
    Xh = np.concatenate([X, np.ones((p, 1))], axis=1)
    G = np.zeros((p, 3, 3, n, 3, 4))  # [i, k, r, j, r', c]
    for k in range(3):
        # (Z_j [X;1])_r dW_jk  +  W_j A_j[r, k]
        block = Xh[:, None, :] * dW[:, :, k, None]
        block[:, :, k] += W
        for r in range(3):
            G[:, k, r, :, r, :] = block
    return G.reshape(p, 9, n, 3, 4)


def build_cubature(field_, net, count=2000, seed=0, fd_step=None):
    """
    Sample ``count`` rest-space points once and cache weights, FD weight
    gradients, the displacement basis and the deformation-gradient map.
    """
    n = net.n_handles
    if count < 4 * n:
        raise ValueError(f'need at least {4 * n} cubature points for {n} handles')
    pts = sample_interior(field_, count, seed)
    volume, _ = estimate_volume(field_, 200_000, rng_seed=[seed, 2 ** 31])
    h = 1e-4 * net.input_scale if fd_step is None else fd_step

    X = pts.X
    W = net.forward_batch(X)
    offsets = h * np.eye(3)
    Wp = net.forward_batch((X[:, None, :] + offsets[None]).reshape(-1, 3)).reshape(count, 3, n)
    Wm = net.forward_batch((X[:, None, :] - offsets[None]).reshape(-1, 3)).reshape(count, 3, n)
    dW = np.transpose((Wp - Wm) / (2.0 * h), (0, 2, 1))

    basis = _basis_rows(W, X).reshape(count, 3, 12 * n)
    fmap = _fmap_rows(W, dW, X).reshape(count, 9, 12 * n)
    mass = pts.rho * volume / count

    cub = CubatureSet(X, pts.occupancy, mass, pts.lam, pts.mu, W, dW, volume, basis, fmap)
    M = build_mass_matrix(cub)
    w = np.linalg.eigvalsh(M)
    trace = float(np.trace(M))
    if trace > 0 and w[0] <= 1e-12 * trace:
        warnings.warn(
            'reduced mass matrix is rank deficient; enabling Tikhonov regularization',
            RankDeficiencyWarning,
        )
        cub.tikhonov = 1e-8 * trace
    return cub


def build_mass_matrix(cub):
    """``B^T M_p B`` with lumped point masses (plus Tikhonov term if enabled)."""
    B = cub.basis
    M = np.einsum('i,irk,irl->kl', cub.mass, B, B)
    M = 0.5 * (M + M.T)
    if cub.tikhonov:
        M = M + cub.tikhonov * np.eye(cub.dim)
    return M


def linear_momentum(cub, zdot):
    """Total linear momentum sum_i m_i xdot_i of the cubature points."""
    return cub.mass @ (cub.basis @ zdot)


def elastic_energy(cub, z, kind='stable_neohookean'):
    F = cub.deformation_gradients(z)
    return float(cub.volume_weights @ elastic.psi(kind, F, cub.lam, cub.mu))


# --------------------------------------------------------------------------
# boundary conditions and colliders
# --------------------------------------------------------------------------

@dataclass
class Script:
    """
    Piecewise-linear keyframed rigid motion about ``pivot``.

    Rotations are rotation vectors, interpolated linearly between keyframes
    (exact for motions about a fixed axis, a small-angle blend otherwise).
    """

    times: tuple = (0.0,)
    translations: tuple = ((0.0, 0.0, 0.0),)
    rotations: tuple = ((0.0, 0.0, 0.0),)
    pivot: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size == 0:
            raise ValueError('script needs at least one keyframe time')
        if np.any(np.diff(t) <= 0):
            raise ValueError('script keyframe times must be strictly increasing')
        if np.asarray(self.translations).shape != (t.size, 3):
            raise ValueError('script needs one translation per keyframe')
        if np.asarray(self.rotations).shape != (t.size, 3):
            raise ValueError('script needs one rotation per keyframe')

    def pose(self, t):
        """Rotation matrix and translation at time ``t`` (clamped to range)."""
        times = np.asarray(self.times, dtype=float)
        T = np.asarray(self.translations, dtype=float)
        Rv = np.asarray(self.rotations, dtype=float)
        if t <= times[0]:
            trans, rotvec = T[0], Rv[0]
        elif t >= times[-1]:
            trans, rotvec = T[-1], Rv[-1]
        else:
            k = int(np.searchsorted(times, t, side='right')) - 1
            u = (t - times[k]) / (times[k + 1] - times[k])
            trans = (1.0 - u) * T[k] + u * T[k + 1]
            rotvec = (1.0 - u) * Rv[k] + u * Rv[k + 1]
        return Rotation.from_rotvec(rotvec).as_matrix(), trans

    def apply(self, t, X):
        R, trans = self.pose(t)
        pivot = np.asarray(self.pivot, dtype=float)
        return pivot + (np.asarray(X) - pivot) @ R.T + trans


@dataclass
class PinRegion:
    """Box region of rest-space cubature points held by penalty springs."""

    lo: tuple
    hi: tuple
    axes: str = 'xyz'
    script: int = None

    def __post_init__(self):
        if not self.axes or set(self.axes) - set('xyz'):
            raise ValueError(f'pin axes must be a subset of "xyz", got {self.axes!r}')

    def contains(self, X):
        return np.all((X >= np.asarray(self.lo)) & (X <= np.asarray(self.hi)), axis=-1)

    @property
    def mask(self):
        return np.array([a in self.axes for a in 'xyz'], dtype=float)


@dataclass
class Collider:
    """
    Static obstacle.  ``ground`` is the half-space z >= height; ``sphere``
    and ``box`` are solid analytic shapes.
    """

    kind: str = 'ground'
    height: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    half_size: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.kind not in ('ground', 'sphere', 'box'):
            raise ValueError(f'unknown collider kind {self.kind!r}')
        if self.kind == 'sphere' and not self.radius > 0:
            raise ValueError('sphere collider radius must be positive')

    def distance(self, x):
        """Signed distance, its gradient and Hessian at points (m, 3)."""
        m = x.shape[0]
        if self.kind == 'ground':
            d = x[:, 2] - self.height
            grad = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (m, 3))
            return d, grad, np.zeros((m, 3, 3))
        c = np.asarray(self.center, dtype=float)
        if self.kind == 'sphere':
            v = x - c
            r = np.maximum(np.linalg.norm(v, axis=1), 1e-300)
            n = v / r[:, None]
            hess = (np.eye(3) - n[:, :, None] * n[:, None, :]) / r[:, None, None]
            return r - self.radius, n, hess
        half = np.asarray(self.half_size, dtype=float)
        q = np.abs(x - c) - half
        sgn = np.where(x - c >= 0, 1.0, -1.0)
        outer = np.maximum(q, 0.0)
        norm_outer = np.linalg.norm(outer, axis=1)
        inside = norm_outer == 0.0
        d = np.where(inside, np.max(q, axis=1), norm_outer)
        grad = np.zeros((m, 3))
        out_idx = ~inside
        grad[out_idx] = sgn[out_idx] * outer[out_idx] / norm_outer[out_idx, None]
        axis = np.argmax(q[inside], axis=1)
        grad[np.flatnonzero(inside), axis] = sgn[inside, axis]
        # corner/edge regions of the box distance are curved
        hess = np.zeros((m, 3, 3))
        if out_idx.any():
            g = grad[out_idx]
            act = (outer[out_idx] > 0).astype(float)
            proj = act[:, :, None] * np.eye(3) - g[:, :, None] * g[:, None, :]
            hess[out_idx] = proj / norm_outer[out_idx, None, None]
        return d, grad, hess


def barrier(d, dhat):
    """
    Clamped log barrier ``-(d - dhat)^2 log(d / dhat)`` and its first two
    derivatives; +inf for d <= 0, zero for d >= dhat.
    """
    d = np.asarray(d, dtype=float)
    b = np.zeros_like(d)
    db = np.zeros_like(d)
    ddb = np.zeros_like(d)
    b[d <= 0] = np.inf
    act = (d > 0) & (d < dhat)
    if act.any():
        x = d[act]
        lg = np.log(x / dhat)
        diff = x - dhat
        b[act] = -diff * diff * lg
        db[act] = -2.0 * diff * lg - diff * diff / x
        ddb[act] = -2.0 * lg - 4.0 * diff / x + diff * diff / (x * x)
    return b, db, ddb


@dataclass
class SimConfig:
    timestep: float = 0.01
    gravity: tuple = (0.0, 0.0, -9.8)
    frames: int = 70
    newton_iters: int = 10
    newton_tol: float = 1e-6
    barrier_iters: int = 1
    barrier_kappa: float = 1e3
    barrier_growth: float = 10.0
    barrier_dhat: float = None
    penalty: float = None
    cubature: int = 2000
    seed: int = 0
    energy: str = 'stable_neohookean'
    pins: list = field(default_factory=list)
    scripts: list = field(default_factory=list)
    colliders: list = field(default_factory=list)

    def validate(self):
        if not self.timestep > 0:
            raise ValueError('sim.timestep must be positive')
        if not self.newton_tol > 0:
            raise ValueError('sim.newton_tol must be positive')
        if self.newton_iters < 1 or self.barrier_iters < 1:
            raise ValueError('iteration counts must be >= 1')
        if self.barrier_dhat is not None and not self.barrier_dhat > 0:
            raise ValueError('sim.barrier_dhat must be positive')
        if self.penalty is not None and self.penalty < 0:
            raise ValueError('sim.penalty must be non-negative')
        if not self.barrier_kappa > 0 or not self.barrier_growth >= 1:
            raise ValueError('barrier stiffness must be positive with growth >= 1')
        if self.frames < 0:
            raise ValueError('sim.frames must be >= 0')
        if self.energy not in elastic.ENERGY_KINDS:
            raise ValueError(f'unknown simulation energy {self.energy!r}')
        for pin in self.pins:
            if pin.script is not None and not 0 <= pin.script < len(self.scripts):
                raise ValueError(f'pin refers to missing script {pin.script}')
        return self


@dataclass
class SimState:
    z: np.ndarray
    zdot: np.ndarray
    t: float = 0.0
    kappa: float = 0.0
    frame: int = 0

    @classmethod
    def rest(cls, n_handles, kappa=0.0):
        return cls(np.zeros(12 * n_handles), np.zeros(12 * n_handles), 0.0, kappa, 0)


@dataclass
class PinSet:
    index: np.ndarray
    mask: np.ndarray
    script: object


def select_pins(cub, cfg):
    pins = []
    for pin in cfg.pins:
        idx = np.flatnonzero(pin.contains(cub.X))
        if idx.size == 0:
            log.warning('pin region %s-%s selects no cubature points', pin.lo, pin.hi)
        script = cfg.scripts[pin.script] if pin.script is not None else None
        pins.append(PinSet(idx, pin.mask, script))
    return pins


def apply_script(pins, t, X):
    """
    Penalty targets at time ``t``.

    Returns ``(index, targets, mask)`` stacked over all pins; points of
    unscripted pins are held at their rest positions.
    """
    idx, targets, masks = [], [], []
    for pin in pins:
        rest = X[pin.index]
        targets.append(rest if pin.script is None else pin.script.apply(t, rest))
        idx.append(pin.index)
        masks.append(np.broadcast_to(pin.mask, rest.shape))
    if not idx:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(idx), np.concatenate(targets), np.concatenate(masks)


# --------------------------------------------------------------------------
# per-step objective
# --------------------------------------------------------------------------

@dataclass(eq=False)
class StepProblem:
    """One backward-Euler minimization with everything held fixed but z."""

    cub: CubatureSet
    M: np.ndarray
    z_pred: np.ndarray
    h: float
    gravity: np.ndarray
    energy: str
    pin_index: np.ndarray
    pin_targets: np.ndarray
    pin_mask: np.ndarray
    penalty: float
    colliders: list
    kappa: float
    dhat: float

    def __post_init__(self):
        # gravity energy is linear in z: -sum_i m_i g.(X_i + B_i z)
        self._grav_grad = -np.einsum('i,irk,r->k', self.cub.mass, self.cub.basis, self.gravity)
        self._grav_const = -float(self.cub.mass @ (self.cub.X @ self.gravity))
        Bp = self.cub.basis[self.pin_index]
        self._pin_basis = Bp
        self._pin_rest = self.cub.X[self.pin_index]
        Bm = Bp * self.pin_mask[:, :, None]
        self._pin_hess = self.penalty * Bm.reshape(-1, self.cub.dim).T @ Bp.reshape(-1, self.cub.dim)

    # -- individual terms --------------------------------------------------

    def _barrier_terms(self, x, order):
        """Sum over colliders of barrier value (order 0), grad (1) or Hessian (2)."""
        dim = self.cub.dim
        total = 0.0 if order == 0 else np.zeros(dim) if order == 1 else np.zeros((dim, dim))
        for col in self.colliders:
            d, grad, hess = col.distance(x)
            if np.any(d <= 0):
                if order == 0:
                    return np.inf
                raise InfeasibleState('barrier derivative requested at an infeasible state')
            act = d < self.dhat
            if not act.any():
                continue
            b, db, ddb = barrier(d[act], self.dhat)
            if order == 0:
                total += self.kappa * float(np.sum(b))
                continue
            B = self.cub.basis[act]
            g = grad[act]
            if order == 1:
                total += self.kappa * np.einsum('i,ir,irk->k', db, g, B)
            else:
                local = ddb[:, None, None] * g[:, :, None] * g[:, None, :]
                local = local + db[:, None, None] * hess[act]
                LB = np.einsum('irs,isk->irk', local, B)
                total += self.kappa * B.reshape(-1, dim).T @ LB.reshape(-1, dim)
        return total

    def potential(self, z):
        cub = self.cub
        x = cub.positions(z)
        bar = self._barrier_terms(x, 0) if self.colliders else 0.0
        if not np.isfinite(bar):
            return np.inf
        F = cub.deformation_gradients(z)
        e_el = float(cub.volume_weights @ elastic.psi(self.energy, F, cub.lam, cub.mu))
        e_grav = self._grav_const + float(self._grav_grad @ z)
        r = (x[self.pin_index] - self.pin_targets) * self.pin_mask
        e_pen = 0.5 * self.penalty * float(np.sum(r * r))
        return e_el + e_grav + e_pen + bar

    def value(self, z):
        dz = z - self.z_pred
        pot = self.potential(z)
        if not np.isfinite(pot):
            return np.inf
        return 0.5 * float(dz @ self.M @ dz) + self.h ** 2 * pot

    def gradient(self, z):
        cub = self.cub
        F = cub.deformation_gradients(z)
        P = elastic.psi_gradient(self.energy, F, cub.lam, cub.mu)
        g = (cub.volume_weights[:, None] * elastic.vec(P)).ravel() @ cub.fmap.reshape(-1, cub.dim)
        g += self._grav_grad
        if self.pin_index.size:
            x = self._pin_rest + self._pin_basis @ z
            r = (x - self.pin_targets) * self.pin_mask
            g += self.penalty * np.einsum('ir,irk->k', r, self._pin_basis)
        if self.colliders:
            g += self._barrier_terms(cub.positions(z), 1)
        return self.M @ (z - self.z_pred) + self.h ** 2 * g

    def hessian(self, z):
        cub = self.cub
        F = cub.deformation_gradients(z)
        H = elastic.psi_hessian(self.energy, F, cub.lam, cub.mu)
        HG = (H @ cub.fmap) * cub.volume_weights[:, None, None]
        K = cub.fmap.reshape(-1, cub.dim).T @ HG.reshape(-1, cub.dim)
        K += self._pin_hess
        if self.colliders:
            K += self._barrier_terms(cub.positions(z), 2)
        K = 0.5 * (K + K.T)
        return self.M + self.h ** 2 * K

    def min_distance(self, z):
        if not self.colliders:
            return np.inf
        x = self.cub.positions(z)
        return min(float(np.min(c.distance(x)[0])) for c in self.colliders)


def _problem_from(z_prev, zdot_prev, cub, cfg, M=None, t_next=None, pins=None, kappa=None,
                  dhat=None, penalty=None):
    cfg.validate()
    if M is None:
        M = build_mass_matrix(cub)
    if pins is None:
        pins = select_pins(cub, cfg)
    if t_next is None:
        t_next = cfg.timestep
    idx, targets, mask = apply_script(pins, t_next, cub.X)
    return StepProblem(
        cub=cub,
        M=M,
        z_pred=np.asarray(z_prev, float) + cfg.timestep * np.asarray(zdot_prev, float),
        h=cfg.timestep,
        gravity=np.asarray(cfg.gravity, dtype=float),
        energy=cfg.energy,
        pin_index=idx,
        pin_targets=targets,
        pin_mask=mask,
        penalty=default_penalty(cub) if penalty is None and cfg.penalty is None
        else (cfg.penalty if penalty is None else penalty),
        colliders=list(cfg.colliders),
        kappa=cfg.barrier_kappa if kappa is None else kappa,
        dhat=default_dhat(cub) if dhat is None and cfg.barrier_dhat is None
        else (cfg.barrier_dhat if dhat is None else dhat),
    )


def default_penalty(cub):
    return 1e5 * float(np.mean(cub.mu)) * cub.volume ** (1.0 / 3.0)


def default_dhat(cub):
    extent = cub.X.max(axis=0) - cub.X.min(axis=0)
    return 1e-2 * float(np.linalg.norm(extent))


def step_objective(z, z_prev, zdot_prev, cub, cfg, **kw):
    return _problem_from(z_prev, zdot_prev, cub, cfg, **kw).value(np.asarray(z, float))


def step_gradient(z, z_prev, zdot_prev, cub, cfg, **kw):
    return _problem_from(z_prev, zdot_prev, cub, cfg, **kw).gradient(np.asarray(z, float))


def step_hessian(z, z_prev, zdot_prev, cub, cfg, **kw):
    return _problem_from(z_prev, zdot_prev, cub, cfg, **kw).hessian(np.asarray(z, float))


# --------------------------------------------------------------------------
# Newton
# --------------------------------------------------------------------------

@dataclass
class NewtonResult:
    z: np.ndarray
    iterations: int
    converged: bool
    stalled: bool
    objective: list
    grad_norm: float


def newton_solve(problem, z0, max_iters=10, tol=1e-6):
    """
    Projected Newton with Armijo backtracking.

    The Hessian's spectrum is clamped at ``1e-8 * trace / dim`` before the
    Cholesky solve; infeasible trial points evaluate to +inf and are
    rejected by the line search.  Converged when ``|g| <= tol * |M z_pred|``
    or when the Newton decrement falls to round-off level of the objective.
    """
    z = np.array(z0, dtype=float)
    f = problem.value(z)
    if not np.isfinite(f):
        raise InfeasibleState('Newton started from an infeasible state')
    history = [f]
    scale = max(1.0, float(np.linalg.norm(problem.M @ problem.z_pred)))
    converged = stalled = False
    gnorm = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        g = problem.gradient(z)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol * scale:
            converged = True
            it -= 1
            break
        H = problem.hessian(z)
        floor = 1e-8 * float(np.trace(H)) / H.shape[0]
        dz = cholesky_solve(spd_project(H, floor), -g)
        slope = float(g @ dz)
        if -slope <= DECREMENT_TOL * max(1.0, abs(f)):
            # the Newton decrement is below round-off of the objective
            converged = True
            break
        s = 1.0
        for _ in range(LINE_SEARCH_HALVINGS):
            z_try = z + s * dz
            f_try = problem.value(z_try)
            if f_try <= f + ARMIJO_C * s * slope:
                break
            s *= 0.5
        else:
            stalled = True
            log.warning('line search stalled after %d halvings (|g|=%.3e)',
                        LINE_SEARCH_HALVINGS, gnorm)
            break
        z, f = z_try, f_try
        history.append(f)
    else:
        gnorm = float(np.linalg.norm(problem.gradient(z)))
        converged = gnorm <= tol * scale
    return NewtonResult(z, it, converged, stalled, history, gnorm)


class Simulator:
    """
    Owns the constant simulation data (mass matrix, pins, stiffnesses) and
    advances :class:`SimState` one backward-Euler step at a time.
    """

    def __init__(self, cub, cfg):
        self.cub = cub
        self.cfg = cfg.validate()
        self.M = build_mass_matrix(cub)
        self.pins = select_pins(cub, cfg)
        self.penalty = default_penalty(cub) if cfg.penalty is None else cfg.penalty
        self.dhat = default_dhat(cub) if cfg.barrier_dhat is None else cfg.barrier_dhat
        self.last_solves = []

    def initial_state(self):
        state = SimState.rest(self.cub.n_handles, self.cfg.barrier_kappa)
        self.check_feasible(state.z)
        return state

    def check_feasible(self, z):
        x = self.cub.positions(z)
        for col in self.cfg.colliders:
            d = col.distance(x)[0]
            if np.any(d <= 0):
                raise InfeasibleState(
                    f'{int(np.sum(d <= 0))} cubature points start inside a {col.kind} collider'
                )

    def problem(self, state, kappa):
        return _problem_from(
            state.z, state.zdot, self.cub, self.cfg, M=self.M,
            t_next=state.t + self.cfg.timestep, pins=self.pins, kappa=kappa,
            dhat=self.dhat, penalty=self.penalty,
        )

    def step(self, state):
        cfg = self.cfg
        kappa = cfg.barrier_kappa
        z = state.z
        self.last_solves = []
        for _ in range(cfg.barrier_iters):
            problem = self.problem(state, kappa)
            result = newton_solve(problem, z, cfg.newton_iters, cfg.newton_tol)
            self.last_solves.append(result)
            if result.stalled:
                log.warning('frame %d: Newton stalled at |g|=%.3e (kappa=%.3g)',
                            state.frame + 1, result.grad_norm, kappa)
            z = result.z
            used_kappa = kappa
            kappa *= cfg.barrier_growth
        return replace(
            state,
            z=z,
            zdot=(z - state.z) / cfg.timestep,
            t=state.t + cfg.timestep,
            kappa=used_kappa,
            frame=state.frame + 1,
        )

    def run(self, frames=None, state=None, callback=None):
        state = self.initial_state() if state is None else state
        frames = self.cfg.frames if frames is None else frames
        for _ in range(frames):
            state = self.step(state)
            if callback is not None:
                callback(state)
        return state

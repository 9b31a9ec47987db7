"""
Fitting the skinning weight network.

Each step draws fresh cubature points and a batch of random handle
transforms, evaluates the elastic energy of the blended deformations plus
the orthogonality penalty on the weights, and takes one Adam step.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import elastic
from .mlp import (
    AdamState,
    DivergenceError,
    adam_step,
    backward,
    forward_batch,
    forward_cache,
    init_network,
)
from .occupancy import estimate_volume, sample_interior

__all__ = [
    'TrainConfig',
    'TrainReport',
    'TrainState',
    'TrainingError',
    'sample_transforms',
    'elastic_loss',
    'ortho_loss',
    'gram_matrix',
    'loss_and_gradient',
    'learning_rate',
    'energy_blend',
    'energy_scale',
    'init_train_state',
    'train_step',
    'train',
]

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_DIVERGENT = 5
VOLUME_SAMPLES = 200_000
GRAM_SAMPLES = 10_000


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_handles: int = 10
    depth: int = 9
    width: int = 64
    steps: int = 10000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    batch_transforms: int = 10
    cubature_per_step: int = 1000
    transform_sigma: float = 1.0
    elastic_weight: float = 1.0
    ortho_weight: float = 1.0
    seed: int = 0
    energy: str = 'scheduled'

    def validate(self):
        if self.steps < 1:
            raise ValueError('train.steps must be >= 1')
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError('learning rates need lr_start >= lr_end > 0')
        if self.batch_transforms < 1:
            raise ValueError('train.batch_transforms must be >= 1')
        if self.cubature_per_step < self.n_handles:
            raise ValueError('train.cubature_per_step must be at least n_handles')
        if not self.transform_sigma > 0:
            raise ValueError('train.transform_sigma must be positive')
        if self.n_handles < 1 or self.depth < 1 or self.width < 1:
            raise ValueError('handles, depth and width must be >= 1')
        if self.elastic_weight < 0 or self.ortho_weight < 0:
            raise ValueError('loss weights must be non-negative')
        if self.energy != 'scheduled' and self.energy not in elastic.ENERGY_KINDS:
            raise ValueError(f'unknown training energy {self.energy!r}')
        return self


@dataclass
class TrainReport:
    elastic_loss: np.ndarray
    ortho_loss: np.ndarray
    lr: np.ndarray
    alpha: np.ndarray
    gram: np.ndarray = None

    def write_csv(self, path):
        with open(path, 'w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(['step', 'elastic_loss', 'ortho_loss', 'lr', 'alpha'])
            for i in range(len(self.elastic_loss)):
                writer.writerow(
                    [i] + [repr(float(a[i])) for a in
                           (self.elastic_loss, self.ortho_loss, self.lr, self.alpha)]
                )


def sample_transforms(n, sigma, batch, rng):
    """Elementwise N(0, sigma^2) handle transforms, shape (batch, n, 3, 4)."""
    if not sigma > 0:
        raise ValueError('transform sigma must be positive')
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return rng.normal(0.0, sigma, size=(batch, n, 3, 4))


def learning_rate(config, step_index):
    if config.steps == 1:
        return config.lr_start
    frac = step_index / (config.steps - 1)
    return config.lr_start + (config.lr_end - config.lr_start) * frac


def energy_blend(config, step_index):
    return step_index / config.steps


def _energy_and_stress(kind, F, lam, mu, alpha):
    if kind == 'scheduled':
        psi = elastic.scheduled_energy(F, lam, mu, alpha)
        P = (1.0 - alpha) * elastic.psi_gradient('linear', F, lam, mu)
        P = P + alpha * elastic.psi_gradient('neohookean_paper', F, lam, mu)
        return psi, P
    return elastic.psi(kind, F, lam, mu), elastic.psi_gradient(kind, F, lam, mu)


def gram_matrix(W, occupancy):
    """Occupancy-weighted, volume-normalized Gram matrix of weight columns."""
    return (W * occupancy[:, None]).T @ W / W.shape[0]


def _probes(X, h):
    offsets = h * np.eye(3)
    plus = X[None, :, :] + offsets[:, None, :]
    minus = X[None, :, :] - offsets[:, None, :]
    return plus, minus


def loss_and_gradient(net, points, Z_batch, alpha, volume, config, energy_scale=1.0,
                      params=None, need_grad=True, fd_step=None):
    """
    Weighted training loss and its parameter gradient.

    The total is ``elastic_weight * elastic / energy_scale + ortho_weight *
    ortho``.  Returns ``(total, elastic, ortho, grad)``; ``grad`` is None
    when ``need_grad`` is false.
    """
    X = points.X
    N = X.shape[0]
    n = net.n_handles
    h = 1e-4 * net.input_scale if fd_step is None else fd_step
    plus, minus = _probes(X, h)
    probes = np.concatenate([plus.reshape(-1, 3), minus.reshape(-1, 3), X])
    Wall, cache = forward_cache(net, probes, params)
    Wp = Wall[:3 * N].reshape(3, N, n)
    Wm = Wall[3 * N:6 * N].reshape(3, N, n)
    W0 = Wall[6 * N:]

    Z = np.asarray(Z_batch, dtype=float)
    B = Z.shape[0]
    ones = np.ones((3, N, 1))
    # per-handle displacement Z_bj [Y;1] at each probe: (B, 3, N, n, 3)
    disp_p = np.einsum('bjrc,kic->bkijr', Z, np.concatenate([plus, ones], -1))
    disp_m = np.einsum('bjrc,kic->bkijr', Z, np.concatenate([minus, ones], -1))
    # only the displacement is differenced: the identity part is exact
    u_p = np.einsum('kij,bkijr->bkir', Wp, disp_p)
    u_m = np.einsum('kij,bkijr->bkir', Wm, disp_m)
    # F[b, i, r, k]
    F = np.eye(3) + np.transpose(u_p - u_m, (0, 2, 3, 1)) / (2.0 * h)

    psi, P = _energy_and_stress(config.energy, F, points.lam, points.mu, alpha)
    point_weight = volume / N * points.occupancy
    l_el = float(np.sum(psi * point_weight) / B)
    if not np.isfinite(l_el):
        raise DivergenceError('divergent sample')

    G = gram_matrix(W0, points.occupancy)
    R = G - np.eye(n)
    l_or = float(np.sum(R * R))

    w_el = config.elastic_weight / energy_scale
    total = w_el * l_el + config.ortho_weight * l_or
    if not need_grad:
        return total, l_el, l_or, None

    # dL/dphi_+-[b, k, i, r]
    dF = w_el * P * (point_weight[None, :, None, None] / B)
    dphi = np.transpose(dF, (0, 3, 1, 2)) / (2.0 * h)
    gWp = np.einsum('bkir,bkijr->kij', dphi, disp_p)
    gWm = -np.einsum('bkir,bkijr->kij', dphi, disp_m)
    gW0 = config.ortho_weight * 4.0 / N * (points.occupancy[:, None] * (W0 @ R))
    upstream = np.concatenate([gWp.reshape(-1, n), gWm.reshape(-1, n), gW0])
    grad = backward(net, probes, upstream, params, cache=cache)
    return total, l_el, l_or, grad


def elastic_loss(net, points, Z_batch, alpha, volume, energy='scheduled', fd_step=None):
    """
    Batch-mean Monte-Carlo elastic energy ``(V/N) sum_i occ_i Psi(F_i)``.
    """
    cfg = TrainConfig(n_handles=net.n_handles, energy=energy, elastic_weight=1.0,
                      ortho_weight=0.0)
    _, l_el, _, _ = loss_and_gradient(net, points, Z_batch, alpha, volume, cfg,
                                      need_grad=False, fd_step=fd_step)
    return l_el


def ortho_loss(net, points):
    """Squared Frobenius deviation of the weight Gram matrix from identity."""
    if len(points) < net.n_handles:
        raise ValueError('need at least as many points as handles')
    G = gram_matrix(forward_batch(net, points.X), points.occupancy)
    return float(np.sum((G - np.eye(net.n_handles)) ** 2))


@dataclass
class TrainState:
    net: object
    adam: AdamState
    field: object
    volume: float
    energy_scale: float = 1.0


def energy_scale(field_, volume, seed=0, samples=4096):
    """
    Volume times the mean P-wave modulus ``lam + 2 mu``; divides the elastic
    term so a unit strain costs O(1) whatever the object's size, stiffness
    or Poisson ratio, keeping it commensurate with the orthogonality term.
    """
    pts = sample_interior(field_, samples, [seed, 2 ** 31 + 2])
    return float(volume * np.mean(pts.lam + 2.0 * pts.mu))


def _step_rng(config, step_index):
    return np.random.default_rng([config.seed, step_index])


def init_train_state(field_, config):
    config.validate()
    center = field_.bbox_center
    scale = 0.5 * field_.bbox_diagonal
    net = init_network(config.n_handles, config.depth, config.width, seed=config.seed,
                       input_center=center, input_scale=scale)
    volume, _ = estimate_volume(field_, VOLUME_SAMPLES, rng_seed=[config.seed, 2 ** 31])
    return TrainState(net, AdamState(net.params.size), field_, volume,
                      energy_scale(field_, volume, config.seed))


def train_step(state, config, step_index):
    """
    One optimizer step.  Returns ``(state, elastic_loss, ortho_loss)``.
    """
    if not 0 <= step_index < config.steps:
        raise ValueError(f'step index {step_index} outside [0, {config.steps})')
    rng = _step_rng(config, step_index)
    points = sample_interior(state.field, config.cubature_per_step, rng)
    Z = sample_transforms(config.n_handles, config.transform_sigma,
                          config.batch_transforms, rng)
    alpha = energy_blend(config, step_index)
    _, l_el, l_or, grad = loss_and_gradient(state.net, points, Z, alpha, state.volume, config,
                                            state.energy_scale)
    theta, _ = adam_step(state.adam, state.net.params, grad, learning_rate(config, step_index))
    state.net.params = theta
    return state, l_el, l_or


def train(field_, config, progress=None):
    """
    Run ``config.steps`` optimizer steps; returns ``(net, TrainReport)``.
    """
    state = init_train_state(field_, config)
    steps = config.steps
    el = np.full(steps, np.nan)
    orth = np.full(steps, np.nan)
    lrs = np.array([learning_rate(config, k) for k in range(steps)])
    alphas = np.array([energy_blend(config, k) for k in range(steps)])
    divergent = 0
    for k in range(steps):
        try:
            _, el[k], orth[k] = train_step(state, config, k)
            divergent = 0
        except DivergenceError as exc:
            divergent += 1
            log.warning('step %d diverged: %s', k, exc)
            if divergent > MAX_CONSECUTIVE_DIVERGENT:
                raise TrainingError(
                    f'training aborted at step {k}: {divergent} consecutive divergent steps '
                    f'(lr={lrs[k]:.3g}, sigma={config.transform_sigma}); '
                    'reduce the learning rate or the transform sigma'
                ) from exc
        if progress is not None:
            progress(k, el[k], orth[k])
    pts = sample_interior(field_, GRAM_SAMPLES, [config.seed, 2 ** 31 + 1])
    gram = gram_matrix(forward_batch(state.net, pts.X), pts.occupancy)
    return state.net, TrainReport(el, orth, lrs, alphas, 0.5 * (gram + gram.T))

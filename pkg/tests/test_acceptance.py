"""
Acceptance suite.  Every test records one PASS/FAIL line that is printed in
the terminal summary; criterion 4 (a 10000-step training run) dominates the
runtime at roughly a quarter of an hour on one core.
"""

import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import constant_net
from simplicits import elastic as el, mlp, occupancy as oc, reduced_sim as rs, training as tr
from simplicits.export import GaussianSplatSet, transform_gaussians
from simplicits.scene import geometry_spec, parse_scene

SCENES = Path(__file__).resolve().parent.parent / 'scenes'


def load(name):
    scene = parse_scene(SCENES / name)
    return scene, oc.build_occupancy(geometry_spec(scene), scene.materials,
                                     base_dir=scene.base_dir)


def max_rel(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


# --------------------------------------------------------------------------
# 1. gradient oracles
# --------------------------------------------------------------------------

def _mlp_rel_err(seed):
    rng = np.random.default_rng(seed)
    n, depth, width = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 9))
    net = mlp.init_network(n, depth, width, seed=seed)
    net.params += 0.1 * rng.normal(size=net.params.size)
    X = rng.normal(size=(6, 3))
    U = rng.normal(size=(6, n))
    g = mlp.backward(net, X, U)
    fd = np.zeros_like(g)
    for k in range(g.size):
        p = net.params.copy()
        p[k] += 1e-5
        fp = np.sum(U * mlp.forward_batch(net, X, p))
        p[k] -= 2e-5
        fd[k] = (fp - np.sum(U * mlp.forward_batch(net, X, p))) / 2e-5
    return max_rel(g, fd)


def _step_rel_err(cub, cfg, rng):
    d = cub.dim
    while True:
        z, zp = rng.normal(0, 0.05, (2, d))
        zd = rng.normal(0, 0.1, d)
        if np.isfinite(rs.step_objective(z, zp, zd, cub, cfg)):
            break
    g = rs.step_gradient(z, zp, zd, cub, cfg)
    fd = np.zeros(d)
    for a in range(d):
        e = np.zeros(d)
        e[a] = 1e-6
        fd[a] = (rs.step_objective(z + e, zp, zd, cub, cfg)
                 - rs.step_objective(z - e, zp, zd, cub, cfg)) / 2e-6
    return max_rel(g, fd)


def _psi_rel_errs(kind, F, lam, mu):
    g = el.psi_gradient(kind, F, lam, mu)
    H = el.psi_hessian(kind, F, lam, mu)
    fd_g = np.zeros(9)
    fd_H = np.zeros((9, 9))
    eps = 1e-6
    for a in range(9):
        e = np.zeros(9)
        e[a] = eps
        dF = el.unvec(e)
        fd_g[a] = (el.psi(kind, F + dF, lam, mu) - el.psi(kind, F - dF, lam, mu)) / (2 * eps)
        fd_H[:, a] = (el.vec(el.psi_gradient(kind, F + dF, lam, mu))
                      - el.vec(el.psi_gradient(kind, F - dF, lam, mu))) / (2 * eps)
    return max_rel(el.vec(g), fd_g), max_rel(H, fd_H)


def test_criterion_01_gradient_oracles(criterion):
    t0 = time.perf_counter()
    mlp_err = max(_mlp_rel_err(seed) for seed in range(20))

    field = oc.build_occupancy({'type': 'beam', 'size': (2, 0.5, 0.5), 'center': (0, 0, 1)},
                               [oc.MaterialRegion(youngs=1e5, poisson=0.45)])
    cub = rs.build_cubature(field, constant_net(2, 'elu'), 50, 1)
    cfg = rs.SimConfig(colliders=[rs.Collider('ground', height=0.0)], barrier_dhat=0.8,
                       pins=[rs.PinRegion((-1.1, -1, 0), (-0.8, 1, 2))])
    rng = np.random.default_rng(0)
    step_err = max(_step_rel_err(cub, cfg, rng) for _ in range(20))

    rng = np.random.default_rng(1)
    psi_g = psi_h = 0.0
    for i in range(100):
        F = np.eye(3) + 0.3 * rng.normal(size=(3, 3))
        kind = el.ENERGY_KINDS[i % 3]
        eg, eh = _psi_rel_errs(kind, F, 1.7, 0.6)
        psi_g, psi_h = max(psi_g, eg), max(psi_h, eh)

    ok = mlp_err < 1e-5 and step_err < 1e-5 and psi_g < 1e-6 and psi_h < 1e-5
    criterion(1, ok, f'mlp {mlp_err:.1e} (<1e-5), step {step_err:.1e} (<1e-5), '
                     f'psi grad {psi_g:.1e} (<1e-6), hess {psi_h:.1e} (<1e-5), '
                     f'{time.perf_counter() - t0:.1f}s')
    assert ok


# --------------------------------------------------------------------------
# 2. Monte-Carlo volume
# --------------------------------------------------------------------------

def test_criterion_02_sphere_volume(criterion):
    t0 = time.perf_counter()
    field = oc.build_occupancy({'type': 'sphere', 'radius': 1.0})
    vol, se = oc.estimate_volume(field, 1_000_000, rng_seed=0)
    elapsed = time.perf_counter() - t0
    exact = 4.0 * np.pi / 3.0
    ok = abs(vol - exact) <= 3 * se and elapsed < 10
    criterion(2, ok, f'V = {vol:.5f} +/- {se:.5f} vs {exact:.5f} '
                     f'({abs(vol - exact) / se:.2f} sigma), {elapsed:.2f}s')
    assert ok


# --------------------------------------------------------------------------
# 3. energy identities
# --------------------------------------------------------------------------

def test_criterion_03_energy_identities(criterion):
    rng = np.random.default_rng(2)
    R = Rotation.random(100, random_state=3).as_matrix()
    F = np.eye(3) + 0.3 * rng.normal(size=(100, 3, 3))
    worst_rest = worst_rot = 0.0
    for kind in el.ENERGY_KINDS:
        worst_rest = max(worst_rest, abs(el.psi(kind, np.eye(3), 1.3, 0.7)))
        a = el.psi(kind, R @ F, 1.3, 0.7)
        b = el.psi(kind, F, 1.3, 0.7)
        worst_rot = max(worst_rot, float(np.max(np.abs(a - b) / np.abs(b))))
    D = np.diag([2.0, 1.0, 1.0])
    lin = el.psi_linear(D, 1.0, 1.0)
    neo = el.psi_neohookean_paper(D, 1.0, 1.0)
    ok = (worst_rest <= 1e-10 and worst_rot <= 1e-10
          and abs(lin - 3.375) <= 1e-12 and abs(neo - 2.0) <= 1e-12)
    criterion(3, ok, f'max Psi(I) {worst_rest:.1e}, max rel |Psi(RF)-Psi(F)| {worst_rot:.1e}, '
                     f'Psi_lin {float(lin)!r}, Psi_neo {float(neo)!r}')
    assert ok


# --------------------------------------------------------------------------
# 4. training sanity on the bar
# --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_04_bar_training(criterion):
    scene, field = load('bar.scene')
    cfg = scene.train
    assert (cfg.n_handles, cfg.depth, cfg.width, cfg.steps) == (4, 6, 64, 10000)
    assert (cfg.transform_sigma, cfg.cubature_per_step) == (0.1, 500)
    t0 = time.perf_counter()
    _, report = tr.train(field, cfg)
    elapsed = time.perf_counter() - t0
    dev = float(np.max(np.abs(report.gram - np.eye(cfg.n_handles))))
    tenth = cfg.steps // 10
    early = float(np.median(report.ortho_loss[:tenth]))
    late = float(np.median(report.ortho_loss[-tenth:]))
    ok = dev < 0.2 and late < early and elapsed <= 1800
    criterion(4, ok, f'|G - I|_max {dev:.3f} (<0.2), ortho median early {early:.3f} '
                     f'late {late:.3f}, {elapsed / 60:.1f} min')
    assert ok


# --------------------------------------------------------------------------
# 5. ballistic free fall
# --------------------------------------------------------------------------

def test_criterion_05_free_fall(criterion):
    field = oc.build_occupancy({'type': 'beam', 'size': (2, 0.5, 0.5), 'center': (0, 0, 1)})
    cub = rs.build_cubature(field, constant_net(1), 1000, 0)
    cfg = rs.SimConfig(gravity=(0, 0, -9.8), timestep=0.01, newton_tol=1e-12)
    sim = rs.Simulator(cub, cfg)
    t0 = time.perf_counter()
    state = sim.run(100)
    elapsed = time.perf_counter() - t0
    N, h = 100, 0.01
    expected = -9.8 * h * h * N * (N + 1) / 2
    rel = abs(state.z[11] - expected) / abs(expected)
    ok = rel <= 1e-8 and elapsed < 1.0
    criterion(5, ok, f'z-translation {state.z[11]:.12f} vs {expected:.12f} '
                     f'(rel {rel:.1e}), {elapsed:.2f}s')
    assert ok


# --------------------------------------------------------------------------
# 6. static uniaxial stretch
# --------------------------------------------------------------------------

def test_criterion_06_static_stretch(criterion):
    scene, field = load('stretch.scene')
    t0 = time.perf_counter()
    cub = rs.build_cubature(field, constant_net(1), scene.sim.cubature, scene.sim.seed)
    sim = rs.Simulator(cub, scene.sim)
    state = sim.run()
    energy = rs.elastic_energy(cub, state.z, scene.sim.energy)
    lam, mu = scene.materials[0].lame
    s = 1.2
    t = np.linspace(0.5, 1.2, 70_001)
    F = np.zeros((t.size, 3, 3))
    F[:, 0, 0], F[:, 1, 1], F[:, 2, 2] = s, t, t
    volume = 2.0 * 0.5 * 0.5
    oracle = volume * float(np.min(el.psi_stable_neohookean(F, lam, mu)))
    rel = abs(energy - oracle) / oracle
    ok = rel < 0.10 and time.perf_counter() - t0 < 60
    criterion(6, ok, f'E = {energy:.2f} J vs V min_t Psi = {oracle:.2f} J (rel {rel:.3f}), '
                     f'stretch {1 + state.z[0]:.4f}, {time.perf_counter() - t0:.1f}s')
    assert ok


# --------------------------------------------------------------------------
# 7. contact feasibility
# --------------------------------------------------------------------------

def test_criterion_07_drop_contact(criterion):
    scene, field = load('drop.scene')
    net, _ = tr.train(field, replace(scene.train, steps=300))
    cub = rs.build_cubature(field, net, scene.sim.cubature, scene.sim.seed)
    sim = rs.Simulator(cub, scene.sim)
    state = sim.initial_state()
    min_dist = np.inf
    monotone = True
    for _ in range(scene.sim.frames):
        state = sim.step(state)
        d = scene.sim.colliders[0].distance(cub.positions(state.z))[0]
        min_dist = min(min_dist, float(d.min()))
        for res in sim.last_solves:
            monotone &= bool(np.all(np.diff(res.objective) <= 0))
    ok = min_dist >= 0 and monotone and state.frame == 150
    criterion(7, ok, f'min signed distance over {state.frame} frames {min_dist:.2e} (>=0), '
                     f'Newton objectives non-increasing: {monotone}')
    assert ok


# --------------------------------------------------------------------------
# 8. momentum
# --------------------------------------------------------------------------

def test_criterion_08_momentum(criterion):
    field = oc.build_occupancy({'type': 'beam', 'size': (2, 0.5, 0.5)},
                               [oc.MaterialRegion(youngs=1e5, poisson=0.45)])
    cub = rs.build_cubature(field, constant_net(2, 'elu'), 500, 0)
    cfg = rs.SimConfig(gravity=(0, 0, 0), newton_tol=1e-10, newton_iters=20)
    sim = rs.Simulator(cub, cfg)
    zdot = np.random.default_rng(5).normal(0, 0.5, cub.dim)
    state = rs.SimState(np.zeros(cub.dim), zdot)
    p0 = rs.linear_momentum(cub, zdot)
    drift = 0.0
    for _ in range(100):
        state = sim.step(state)
        p = rs.linear_momentum(cub, state.zdot)
        drift = max(drift, float(np.linalg.norm(p - p0) / np.linalg.norm(p0)))
    ok = drift < 1e-6
    criterion(8, ok, f'max relative momentum drift over 100 steps {drift:.1e} (<1e-6)')
    assert ok


# --------------------------------------------------------------------------
# 9. splat transform
# --------------------------------------------------------------------------

def test_criterion_09_splats(criterion):
    rng = np.random.default_rng(6)
    A = rng.normal(size=(200, 3, 3))
    splats = GaussianSplatSet(rng.uniform(-0.5, 0.5, (200, 3)), A @ np.swapaxes(A, 1, 2),
                              np.ones(200), [b''] * 200)
    Z = np.zeros((1, 3, 4))
    Z[0, :, :3] = Rotation.from_rotvec([0.4, -1.1, 0.7]).as_matrix() - np.eye(3)
    rot = transform_gaussians(splats, constant_net(1), Z)
    before = np.linalg.eigvalsh(splats.covariances)
    eig_err = float(np.max(np.abs(np.linalg.eigvalsh(rot.covariances) - before)
                           / np.max(before, axis=1, keepdims=True)))
    Z[0, :, :3] = np.eye(3)
    scaled = transform_gaussians(splats, constant_net(1), Z)
    scale_err = max_rel(scaled.covariances, 4.0 * splats.covariances)
    ok = eig_err <= 1e-10 and scale_err <= 1e-12
    criterion(9, ok, f'rotation eigenvalue error {eig_err:.1e} (<=1e-10), '
                     f'F = 2I covariance error {scale_err:.1e}')
    assert ok


# --------------------------------------------------------------------------
# 10. determinism end to end
# --------------------------------------------------------------------------

DET_SCENE = """
geometry.type = beam
geometry.center = 0 0 0.6
geometry.size = 2 0.5 0.5
train.handles = 3
train.depth = 3
train.width = 16
train.steps = 50
train.cubature = 200
train.sigma = 0.1
sim.cubature = 300
sim.frames = 30
colliders.0.type = ground
export.stride = 10
"""


def _cli(*args):
    return subprocess.run([sys.executable, '-m', 'simplicits.cli', *args],
                          capture_output=True, text=True).returncode


def test_criterion_10_determinism(criterion, tmp_path):
    scene = tmp_path / 'det.scene'
    scene.write_text(DET_SCENE)
    outputs = []
    for run in ('a', 'b'):
        w = tmp_path / f'{run}.swgt'
        d = tmp_path / f'frames_{run}'
        assert _cli('train', '--scene', str(scene), '--out', str(w), '--seed', '7') == 0
        assert _cli('simulate', '--scene', str(scene), '--weights', str(w), '--out', str(d)) == 0
        outputs.append((w.read_bytes(), (d / 'transforms.csv').read_bytes(),
                        (d / 'points_00030.xyz').read_bytes()))
    same_w = outputs[0][0] == outputs[1][0]
    same_csv = outputs[0][1] == outputs[1][1]
    same_pts = outputs[0][2] == outputs[1][2]
    ok = same_w and same_csv and same_pts
    criterion(10, ok, f'checkpoint identical: {same_w}, transforms CSV identical: {same_csv}, '
                      f'points identical: {same_pts}')
    assert ok


# --------------------------------------------------------------------------
# 11. expressivity trend
# --------------------------------------------------------------------------

def _twist_energy(scene, field, n, seed, steps):
    cfg = replace(scene.train, n_handles=n, steps=steps, seed=seed)
    net, _ = tr.train(field, cfg)
    cub = rs.build_cubature(field, net, scene.sim.cubature, seed)
    sim = rs.Simulator(cub, scene.sim)
    state = sim.run()
    return rs.elastic_energy(cub, state.z, scene.sim.energy)


@pytest.mark.slow
def test_criterion_11_expressivity(criterion):
    scene, field = load('twist.scene')
    steps = 400
    one = [_twist_energy(scene, field, 1, seed, steps) for seed in range(3)]
    eight = [_twist_energy(scene, field, 8, seed, steps) for seed in range(3)]
    ok = np.median(eight) <= np.median(one)
    criterion(11, ok, f'median equilibrium elastic energy n=8 {np.median(eight):.1f} J '
                      f'<= n=1 {np.median(one):.1f} J ({steps} training steps per seed)')
    assert ok

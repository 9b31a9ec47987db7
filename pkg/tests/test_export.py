import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import constant_net
from simplicits import export as ex, mlp, occupancy as oc

CUBE_V = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
CUBE_F = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5]])


def random_psd(rng, m):
    A = rng.normal(size=(m, 3, 3))
    return A @ np.swapaxes(A, 1, 2)


def make_splats(rng, m=20):
    payloads = [bytes(rng.integers(0, 256, size=int(rng.integers(0, 12)), dtype=np.uint8))
                for _ in range(m)]
    return ex.GaussianSplatSet(rng.uniform(-0.5, 0.5, (m, 3)), random_psd(rng, m),
                               rng.uniform(0, 1, m), payloads)


def test_splt_round_trip(tmp_path):
    splats = make_splats(np.random.default_rng(0))
    path = tmp_path / 's.splt'
    ex.write_splt(path, splats)
    back = ex.read_splt(path)
    assert back.payloads == splats.payloads
    np.testing.assert_allclose(back.means, splats.means, rtol=1e-6)
    np.testing.assert_allclose(back.covariances, splats.covariances, rtol=1e-5, atol=1e-6)
    np.testing.assert_array_equal(back.covariances, np.swapaxes(back.covariances, 1, 2))


def test_splt_layout(tmp_path):
    splats = ex.GaussianSplatSet(np.zeros((1, 3)), np.eye(3)[None], np.ones(1), [b'abc'])
    path = tmp_path / 's.splt'
    ex.write_splt(path, splats)
    data = path.read_bytes()
    assert data[:4] == b'SPLT'
    assert len(data) == 4 + 4 + 10 * 4 + 4 + 3
    assert data.endswith(b'abc')


def test_splt_truncated(tmp_path):
    path = tmp_path / 's.splt'
    ex.write_splt(path, make_splats(np.random.default_rng(1)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ex.SplatError):
        ex.read_splt(path)


def test_splt_rejects_indefinite(tmp_path):
    C = np.diag([1.0, -1.0, 1.0])[None]
    path = tmp_path / 's.splt'
    ex.write_splt(path, ex.GaussianSplatSet(np.zeros((1, 3)), C, np.ones(1), [b'']))
    with pytest.raises(ex.SplatError, match='semidefinite'):
        ex.read_splt(path)


def test_transform_rest_unchanged():
    splats = make_splats(np.random.default_rng(2))
    out = ex.transform_gaussians(splats, constant_net(2, 'elu'), np.zeros((2, 3, 4)))
    np.testing.assert_array_equal(out.means, splats.means)
    np.testing.assert_allclose(out.covariances, splats.covariances, rtol=1e-12, atol=1e-14)
    assert out.payloads == splats.payloads


def test_transform_rigid_rotation_preserves_spectrum():
    splats = make_splats(np.random.default_rng(3), 50)
    R = Rotation.from_rotvec([0.3, -0.8, 0.5]).as_matrix()
    Z = np.zeros((1, 3, 4))
    Z[0, :, :3] = R - np.eye(3)
    out = ex.transform_gaussians(splats, constant_net(1), Z)
    np.testing.assert_allclose(out.means, splats.means @ R.T, atol=1e-14)
    before = np.linalg.eigvalsh(splats.covariances)
    after = np.linalg.eigvalsh(out.covariances)
    assert np.max(np.abs(after - before)) <= 1e-10 * np.max(np.abs(before))
    np.testing.assert_allclose(out.covariances, R @ splats.covariances @ R.T, atol=1e-10)


def test_transform_uniform_scale_quadruples():
    splats = make_splats(np.random.default_rng(4))
    Z = np.zeros((1, 3, 4))
    Z[0, :, :3] = np.eye(3)
    out = ex.transform_gaussians(splats, constant_net(1), Z)
    np.testing.assert_allclose(out.covariances, 4.0 * splats.covariances, rtol=1e-12, atol=1e-14)


def test_transform_preserves_psd():
    rng = np.random.default_rng(5)
    net = mlp.init_network(3, 2, 8, seed=1)
    splats = make_splats(rng, 1000)
    Z = rng.normal(0, 1.0, (3, 3, 4))
    out = ex.transform_gaussians(splats, net, Z)
    assert np.linalg.eigvalsh(out.covariances).min() >= -1e-10
    np.testing.assert_array_equal(out.covariances, np.swapaxes(out.covariances, 1, 2))


def test_points_round_trip(tmp_path):
    X = np.random.default_rng(6).normal(size=(50, 3)) * 1e3
    path = tmp_path / 'p.xyz'
    ex.export_points(path, X)
    np.testing.assert_array_equal(ex.read_points(path), X)
    first = path.read_text().splitlines()[0].split()
    assert len(first) == 3


def test_mesh_export(tmp_path):
    net = constant_net(1)
    path = tmp_path / 'm.obj'
    ex.export_mesh(path, CUBE_V, CUBE_F, net, np.zeros(12))
    V, F = oc.read_obj(path)
    np.testing.assert_array_equal(V, CUBE_V)
    np.testing.assert_array_equal(F, CUBE_F)
    Z = np.zeros((1, 3, 4))
    Z[0, :, 3] = [0.5, -1.0, 2.0]
    ex.export_mesh(path, CUBE_V, CUBE_F, net, Z)
    V, F = oc.read_obj(path)
    np.testing.assert_allclose(V, CUBE_V + Z[0, :, 3], atol=1e-15)
    assert len(F) == len(CUBE_F)


def test_weight_grid(tmp_path):
    net = mlp.init_network(2, 2, 4, seed=2)
    paths = ex.export_weight_grid(net, ((0, 0, 0), (1, 2, 3)), 2, tmp_path)
    assert len(paths) == 2
    corners = np.array([[x, y, z] for z in (0, 3) for y in (0, 2) for x in (0, 1)], float)
    W = mlp.forward_batch(net, corners)
    for j, p in enumerate(paths):
        values, origin, spacing = oc.read_svol(p)
        assert p.stat().st_size == oc._SVOL_HEADER.size + 8 * 4
        np.testing.assert_array_equal(origin, [0, 0, 0])
        np.testing.assert_array_equal(spacing, [1, 2, 3])
        np.testing.assert_allclose(values.ravel(order='F'), W[:, j].astype(np.float32), rtol=0)


def test_weight_grid_constant(tmp_path):
    paths = ex.export_weight_grid(constant_net(1), ((0, 0, 0), (1, 1, 1)), (3, 4, 5), tmp_path)
    values, _, _ = oc.read_svol(paths[0])
    assert values.shape == (3, 4, 5)
    np.testing.assert_array_equal(values, 1.0)


def test_weight_grid_resolution_guard(tmp_path):
    with pytest.raises(ValueError):
        ex.export_weight_grid(constant_net(1), ((0, 0, 0), (1, 1, 1)), 1, tmp_path)


def test_transform_csv(tmp_path):
    path = tmp_path / 't.csv'
    with ex.TransformWriter(path, 1) as w:
        w.write(1, 0.01, np.arange(12.0))
    lines = path.read_text().splitlines()
    assert lines[0].split(',')[:3] == ['frame', 'time', 'z0']
    assert len(lines[0].split(',')) == 14
    assert lines[1].split(',')[:3] == ['1', '0.01', '0.0']

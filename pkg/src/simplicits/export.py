"""
Writers for trained weights and simulated frames.
"""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .elastic import deformation_gradient_fd, deformation_map, unflatten_transforms
from .mlp import forward_batch
from .occupancy import write_obj, write_svol

__all__ = [
    'SplatError',
    'GaussianSplatSet',
    'read_splt',
    'write_splt',
    'transform_gaussians',
    'export_points',
    'read_points',
    'export_mesh',
    'export_weight_grid',
    'TransformWriter',
]

SPLT_MAGIC = b'SPLT'
_UPPER = (0, 1, 2, 4, 5, 8)  # xx xy xz yy yz zz in a flattened 3x3


class SplatError(ValueError):
    pass


@dataclass(eq=False)
class GaussianSplatSet:
    """Means (m, 3), covariances (m, 3, 3), opacities (m,) and opaque payloads."""

    means: np.ndarray
    covariances: np.ndarray
    opacity: np.ndarray
    payloads: list

    def __len__(self):
        return self.means.shape[0]

    def validate(self, tol=1e-6):
        C = self.covariances
        if C.shape != (len(self), 3, 3):
            raise SplatError('covariances must have shape (m, 3, 3)')
        scale = np.maximum(np.abs(C).max(axis=(1, 2)), 1e-300)
        if np.any(np.abs(C - np.swapaxes(C, 1, 2)).max(axis=(1, 2)) > tol * scale):
            raise SplatError('splat covariance is not symmetric')
        if len(self) and np.any(np.linalg.eigvalsh(C).min(axis=1) < -tol * scale):
            raise SplatError('splat covariance is not positive semidefinite')
        return self


def _upper_to_full(u):
    C = np.empty((u.shape[0], 9))
    C[:, _UPPER] = u
    C[:, 3], C[:, 6], C[:, 7] = u[:, 1], u[:, 2], u[:, 4]
    return C.reshape(-1, 3, 3)


def read_splt(path):
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != SPLT_MAGIC:
        raise SplatError(f'{path}: not an SPLT file')
    (count,) = struct.unpack_from('<I', data, 4)
    rec = struct.Struct('<10fI')
    off = 8
    vals = np.empty((count, 10))
    payloads = []
    try:
        for i in range(count):
            *vals[i], size = rec.unpack_from(data, off)
            off += rec.size
            if off + size > len(data):
                raise struct.error('payload runs past end of file')
            payloads.append(data[off:off + size])
            off += size
    except struct.error as exc:
        raise SplatError(f'{path}: truncated SPLT file ({exc})') from None
    if off != len(data):
        raise SplatError(f'{path}: {len(data) - off} trailing bytes')
    splats = GaussianSplatSet(vals[:, :3], _upper_to_full(vals[:, 3:9]), vals[:, 9], payloads)
    return splats.validate()


def write_splt(path, splats):
    C = splats.covariances.reshape(-1, 9)[:, _UPPER]
    rec = struct.Struct('<10fI')
    with open(path, 'wb') as fh:
        fh.write(SPLT_MAGIC + struct.pack('<I', len(splats)))
        for i in range(len(splats)):
            payload = bytes(splats.payloads[i])
            fh.write(rec.pack(*splats.means[i], *C[i], splats.opacity[i], len(payload)))
            fh.write(payload)


def transform_gaussians(splats, net, Z, h=None):
    """
    Move splat means through the deformation map and push covariances
    forward with the local deformation gradient, ``F S F^T``.
    """
    Z = _as_handles(Z, net.n_handles)
    mu = np.asarray(splats.means, dtype=float)
    means = deformation_map(forward_batch(net, mu), Z, mu)
    F = deformation_gradient_fd(net, Z, mu, h)
    S = F @ splats.covariances @ np.swapaxes(F, 1, 2)
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    return GaussianSplatSet(means, S, np.array(splats.opacity, copy=True), list(splats.payloads))


def _as_handles(Z, n):
    Z = np.asarray(Z, dtype=float)
    return unflatten_transforms(Z) if Z.ndim == 1 else Z.reshape(n, 3, 4)


def export_points(path, positions):
    """One ``x y z`` line per point, 17 significant digits."""
    np.savetxt(path, np.asarray(positions, dtype=float).reshape(-1, 3), fmt='%.17g')


def read_points(path):
    return np.loadtxt(path, dtype=float, ndmin=2).reshape(-1, 3)


def export_mesh(path, vertices, faces, net, Z):
    V = np.asarray(vertices, dtype=float)
    Z = _as_handles(Z, net.n_handles)
    write_obj(path, deformation_map(forward_batch(net, V), Z, V), faces)


def export_weight_grid(net, bbox, resolution, out_dir):
    """
    Sample each handle's weight on a regular grid spanning ``bbox`` and write
    one SVOL file per handle; returns the written paths.
    """
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 2):
        raise ValueError('weight grid resolution must be >= 2 per axis')
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)
    axes = [np.linspace(lo[a], hi[a], res[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing='ij')
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    W = forward_batch(net, pts).reshape(*res, net.n_handles)
    spacing = (hi - lo) / (res - 1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for j in range(net.n_handles):
        p = out_dir / f'weights_{j:02d}.svol'
        write_svol(p, W[..., j], lo, spacing)
        paths.append(p)
    return paths


class TransformWriter:
    """Streams the per-frame handle transforms CSV: frame, time, z_0..z_{12n-1}."""

    def __init__(self, path, n_handles):
        self._fh = open(path, 'w', newline='')
        self._csv = csv.writer(self._fh)
        self._csv.writerow(['frame', 'time'] + [f'z{k}' for k in range(12 * n_handles)])

    def write(self, frame, time, z):
        self._csv.writerow([frame, repr(float(time))] + [repr(float(v)) for v in z])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

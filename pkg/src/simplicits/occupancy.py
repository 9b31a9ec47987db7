"""
Occupancy fields: any input geometry as an inside/outside density with
spatially varying materials, plus Monte-Carlo sampling of its interior.

Supported sources
-----------------
* analytic primitives (sphere, box, beam, torus, capsule)
* triangle meshes (Wavefront OBJ, ray-parity inside test)
* point clouds (XYZ text, union of balls)
* density grids (SVOL binary, thresholded + trilinear)
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    'SAMPLE_THRESHOLD',
    'OccupancyError',
    'MaterialRegion',
    'OccupancyField',
    'SamplePoints',
    'build_occupancy',
    'eval_occupancy',
    'eval_material',
    'lame_from_young_poisson',
    'sample_interior',
    'estimate_volume',
    'read_obj',
    'write_obj',
    'read_xyz',
    'read_svol',
    'write_svol',
]

SAMPLE_THRESHOLD = 0.5
BBOX_PADDING = 0.05
REJECTION_BUDGET = 10 ** 6
SVOL_MAGIC = b'SVOL'
SVOL_VERSION = 1
_SVOL_HEADER = struct.Struct('<4sIIII3d3d')


class OccupancyError(ValueError):
    pass


def lame_from_young_poisson(E, nu):
    """Convert (Young's modulus, Poisson ratio) to Lame (lambda, mu)."""
    if not E > 0:
        raise ValueError(f"Young's modulus must be positive, got {E}")
    if not 0.0 <= nu < 0.5:
        raise ValueError(f'Poisson ratio must lie in [0, 0.5), got {nu}')
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return lam, mu


# --------------------------------------------------------------------------
# materials
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialRegion:
    """
    Material parameters applied on a region.

    ``region`` is ``'object'`` (everywhere), ``'box'`` (uses ``lo``/``hi``)
    or ``'sphere'`` (uses ``center``/``radius``).
    """

    density: float = 1000.0
    youngs: float = 1e5
    poisson: float = 0.45
    region: str = 'object'
    lo: tuple = None
    hi: tuple = None
    center: tuple = None
    radius: float = None

    def __post_init__(self):
        if not self.density > 0:
            raise ValueError(f'density must be positive, got {self.density}')
        # validates E and nu
        lame_from_young_poisson(self.youngs, self.poisson)
        if self.region == 'box':
            if self.lo is None or self.hi is None:
                raise ValueError('box material region needs lo and hi corners')
        elif self.region == 'sphere':
            if self.center is None or self.radius is None or not self.radius > 0:
                raise ValueError('sphere material region needs center and a positive radius')
        elif self.region != 'object':
            raise ValueError(f'unknown material region {self.region!r}')

    @property
    def lame(self):
        return lame_from_young_poisson(self.youngs, self.poisson)

    def contains(self, X):
        X = np.asarray(X, dtype=float)
        if self.region == 'object':
            return np.ones(X.shape[:-1], dtype=bool)
        if self.region == 'box':
            return np.all((X >= np.asarray(self.lo)) & (X <= np.asarray(self.hi)), axis=-1)
        d = np.linalg.norm(X - np.asarray(self.center), axis=-1)
        return d <= self.radius


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def read_obj(path):
    """Vertices and triangle faces of an OBJ file; other records ignored."""
    verts = []
    faces = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OccupancyError(f'cannot read mesh {path}: {exc}') from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == 'v':
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == 'f':
            idx = [int(p.split('/')[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    V = np.asarray(verts, dtype=float).reshape(-1, 3)
    F = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if F.size and (F.min() < 0 or F.max() >= len(V)):
        raise OccupancyError(f'{path}: face index out of range')
    return V, F


def write_obj(path, vertices, faces):
    lines = [f'v {x:.17g} {y:.17g} {z:.17g}' for x, y, z in np.asarray(vertices)]
    lines += [f'f {a + 1} {b + 1} {c + 1}' for a, b, c in np.asarray(faces)]
    Path(path).write_text('\n'.join(lines) + '\n')


def read_xyz(path):
    try:
        pts = np.loadtxt(path, dtype=float, ndmin=2)
    except (OSError, ValueError) as exc:
        raise OccupancyError(f'cannot read point cloud {path}: {exc}') from exc
    if pts.shape[1] < 3:
        raise OccupancyError(f'{path}: expected 3 columns per point')
    return pts[:, :3]


def read_svol(path):
    """Returns ``(values[nx, ny, nz], origin, spacing)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OccupancyError(f'cannot read grid {path}: {exc}') from exc
    if len(data) < _SVOL_HEADER.size:
        raise OccupancyError(f'{path}: truncated SVOL header')
    magic, version, nx, ny, nz, *rest = _SVOL_HEADER.unpack_from(data)
    if magic != SVOL_MAGIC:
        raise OccupancyError(f'{path}: bad magic {magic!r}')
    if version != SVOL_VERSION:
        raise OccupancyError(f'{path}: unsupported SVOL version {version}')
    count = nx * ny * nz
    body = data[_SVOL_HEADER.size:]
    if len(body) != 4 * count:
        raise OccupancyError(f'{path}: expected {count} values, got {len(body) // 4}')
    # x fastest -> Fortran order
    values = np.frombuffer(body, dtype='<f4').astype(float).reshape((nx, ny, nz), order='F')
    return values, np.array(rest[:3]), np.array(rest[3:])


def write_svol(path, values, origin, spacing):
    values = np.asarray(values, dtype=float)
    nx, ny, nz = values.shape
    header = _SVOL_HEADER.pack(SVOL_MAGIC, SVOL_VERSION, nx, ny, nz, *origin, *spacing)
    with open(path, 'wb') as fh:
        fh.write(header)
        fh.write(values.astype('<f4').tobytes(order='F'))


# --------------------------------------------------------------------------
# occupancy sources
# --------------------------------------------------------------------------

def _vec3(value, name):
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise OccupancyError(f'{name} must have 3 components')
    if not np.all(np.isfinite(arr)):
        raise OccupancyError(f'{name} is not finite')
    return arr


def _positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise OccupancyError(f'{name} must be a finite positive number, got {value}')
    return value


class _Analytic:
    def __init__(self, sdf, lo, hi):
        self.sdf = sdf
        self.lo = lo
        self.hi = hi

    def __call__(self, X):
        return (self.sdf(X) <= 0.0).astype(float)


def _sphere(spec):
    c = _vec3(spec.get('center', (0, 0, 0)), 'center')
    r = _positive(spec.get('radius', 1.0), 'radius')
    return _Analytic(lambda X: np.linalg.norm(X - c, axis=-1) - r, c - r, c + r)


def _box_sdf(lo, hi):
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)

    def sdf(X):
        q = np.abs(X - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(np.max(q, axis=-1), 0.0)

    return sdf


def _box(spec):
    lo = _vec3(spec.get('min', (0, 0, 0)), 'min')
    hi = _vec3(spec.get('max', (1, 1, 1)), 'max')
    if np.any(hi <= lo):
        raise OccupancyError('box max must exceed min on every axis')
    return _Analytic(_box_sdf(lo, hi), lo, hi)


def _beam(spec):
    c = _vec3(spec.get('center', (0, 0, 0)), 'center')
    size = _vec3(spec.get('size', (2.0, 0.5, 0.5)), 'size')
    for s in size:
        _positive(s, 'size')
    lo, hi = c - 0.5 * size, c + 0.5 * size
    return _Analytic(_box_sdf(lo, hi), lo, hi)


def _torus(spec):
    c = _vec3(spec.get('center', (0, 0, 0)), 'center')
    R = _positive(spec.get('major_radius', 1.0), 'major_radius')
    r = _positive(spec.get('minor_radius', 0.25), 'minor_radius')

    def sdf(X):
        d = X - c
        ring = np.hypot(d[..., 0], d[..., 1]) - R
        return np.hypot(ring, d[..., 2]) - r

    ext = np.array([R + r, R + r, r])
    return _Analytic(sdf, c - ext, c + ext)


def _capsule(spec):
    a = _vec3(spec.get('a', (-0.5, 0, 0)), 'a')
    b = _vec3(spec.get('b', (0.5, 0, 0)), 'b')
    r = _positive(spec.get('radius', 0.25), 'radius')
    ab = b - a
    denom = max(float(ab @ ab), 1e-300)

    def sdf(X):
        t = np.clip((X - a) @ ab / denom, 0.0, 1.0)
        return np.linalg.norm(X - (a + t[..., None] * ab), axis=-1) - r

    return _Analytic(sdf, np.minimum(a, b) - r, np.maximum(a, b) + r)


# near-axis ray directions; the small fixed tilt keeps rays off mesh edges
# and vertices of axis-aligned geometry
_RAY_DIRS = np.array(
    [
        [1.0, 0.0017320508, 0.0011180340],
        [0.0012247449, 1.0, 0.0019364917],
        [0.0014142136, 0.0010488088, 1.0],
    ]
)
_RAY_DIRS /= np.linalg.norm(_RAY_DIRS, axis=1, keepdims=True)


class _MeshInside:
    """Majority vote of ray-triangle crossing parity along three rays."""

    def __init__(self, V, F):
        self.v0 = V[F[:, 0]]
        self.e1 = V[F[:, 1]] - self.v0
        self.e2 = V[F[:, 2]] - self.v0
        self.lo = V.min(axis=0)
        self.hi = V.max(axis=0)
        # bound the (chunk, T, 3) temporaries to a few million entries
        self.chunk = max(16, 2_000_000 // len(F))

    def _crossings(self, X, d):
        pvec = np.cross(d, self.e2)  # (T, 3)
        det = np.einsum('tk,tk->t', self.e1, pvec)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = X[:, None, :] - self.v0[None, :, :]  # (N, T, 3)
        u = np.einsum('ntk,tk->nt', tvec, pvec) * inv
        qvec = np.cross(tvec, self.e1[None, :, :])
        v = np.einsum('ntk,k->nt', qvec, d) * inv
        t = np.einsum('ntk,tk->nt', qvec, self.e2) * inv
        hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
        return hit.sum(axis=1)

    def __call__(self, X):
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], self.chunk):
            Xc = X[s:s + self.chunk]
            votes = sum((self._crossings(Xc, d) % 2) for d in _RAY_DIRS)
            out[s:s + self.chunk] = (votes >= 2).astype(float)
        return out


class _PointCloud:
    """Union of balls around the points."""

    def __init__(self, P):
        if len(P) < 2:
            raise OccupancyError('point cloud needs at least two points')
        self.tree = cKDTree(P)
        dist, _ = self.tree.query(P, k=2)
        spacing = float(np.median(dist[:, 1]))
        if not spacing > 0:
            raise OccupancyError('point cloud has zero median spacing')
        self.radius = 1.5 * spacing
        self.lo = P.min(axis=0) - self.radius
        self.hi = P.max(axis=0) + self.radius

    def __call__(self, X):
        dist, _ = self.tree.query(X, k=1)
        return (dist <= self.radius).astype(float)


class _Grid:
    """Trilinear interpolation of the thresholded 0/1 indicator."""

    def __init__(self, values, origin, spacing, threshold):
        if np.any(np.asarray(spacing) <= 0):
            raise OccupancyError('grid spacing must be positive')
        self.indicator = (values > threshold).astype(float)
        if not self.indicator.any():
            raise OccupancyError('empty occupancy: no grid value above threshold')
        self.origin = np.asarray(origin, dtype=float)
        self.spacing = np.asarray(spacing, dtype=float)
        self.shape = np.array(values.shape)
        idx = np.argwhere(self.indicator > 0)
        lo_idx = np.maximum(idx.min(axis=0) - 1, 0)
        hi_idx = np.minimum(idx.max(axis=0) + 1, self.shape - 1)
        self.lo = self.origin + lo_idx * self.spacing
        self.hi = self.origin + hi_idx * self.spacing
        # single-node slabs still need positive extent
        flat = self.hi <= self.lo
        self.hi = np.where(flat, self.lo + self.spacing, self.hi)

    def __call__(self, X):
        g = (X - self.origin) / self.spacing
        inside = np.all((g >= 0.0) & (g <= self.shape - 1), axis=-1)
        g = np.clip(g, 0.0, self.shape - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), np.maximum(self.shape - 2, 0))
        f = g - i0
        out = np.zeros(X.shape[0])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    ix = np.minimum(i0[:, 0] + dx, self.shape[0] - 1)
                    iy = np.minimum(i0[:, 1] + dy, self.shape[1] - 1)
                    iz = np.minimum(i0[:, 2] + dz, self.shape[2] - 1)
                    wgt = (
                        (f[:, 0] if dx else 1.0 - f[:, 0])
                        * (f[:, 1] if dy else 1.0 - f[:, 1])
                        * (f[:, 2] if dz else 1.0 - f[:, 2])
                    )
                    out += wgt * self.indicator[ix, iy, iz]
        return np.where(inside, np.clip(out, 0.0, 1.0), 0.0)


_PRIMITIVES = {
    'sphere': _sphere,
    'box': _box,
    'beam': _beam,
    'torus': _torus,
    'capsule': _capsule,
}


# --------------------------------------------------------------------------
# the field
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OccupancyField:
    """
    Immutable occupancy function with materials and an evaluation box.

    ``materials[0]`` always covers the whole object; later regions override
    earlier ones where they overlap.
    """

    source: object
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    materials: tuple
    kind: str = 'analytic'
    density_threshold: float = None

    def __post_init__(self):
        lo = np.array(self.bbox_lo, dtype=float)
        hi = np.array(self.bbox_hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi - lo <= 0):
            raise OccupancyError('bounding box must have positive extent on every axis')
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, 'bbox_lo', lo)
        object.__setattr__(self, 'bbox_hi', hi)
        mats = tuple(self.materials) or (MaterialRegion(),)
        if mats[0].region != 'object':
            raise OccupancyError('material rule 0 must cover the whole object')
        object.__setattr__(self, 'materials', mats)

    @property
    def bbox_extent(self):
        return self.bbox_hi - self.bbox_lo

    @property
    def bbox_volume(self):
        return float(np.prod(self.bbox_extent))

    @property
    def bbox_diagonal(self):
        return float(np.linalg.norm(self.bbox_extent))

    @property
    def bbox_center(self):
        return 0.5 * (self.bbox_lo + self.bbox_hi)

    def eval(self, X):
        return eval_occupancy(self, X)

    def material(self, X):
        return eval_material(self, X)


def _resolve(path, base_dir):
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p


def build_occupancy(source_spec, materials=None, base_dir=None):
    """
    Build an :class:`OccupancyField` from a source description.

    Parameters
    ----------
    source_spec : mapping
        ``type`` is one of ``sphere, box, beam, torus, capsule, mesh,
        points, grid``; the remaining keys are type-specific (``center``,
        ``radius``, ``min``/``max``, ``size``, ``path``, ``threshold``...).
        An explicit ``bbox = (lo, hi)`` overrides the padded default box.
    materials : sequence of MaterialRegion, optional
    base_dir : path, optional
        Relative file paths are resolved against it.
    """
    spec = dict(source_spec)
    kind = spec.get('type')
    threshold = None
    if kind in _PRIMITIVES:
        source = _PRIMITIVES[kind](spec)
        family = 'analytic'
    elif kind == 'mesh':
        V, F = read_obj(_resolve(spec['path'], base_dir))
        if len(F) == 0:
            raise OccupancyError('degenerate mesh: zero triangles')
        source = _MeshInside(V, F)
        family = 'mesh'
    elif kind == 'points':
        source = _PointCloud(read_xyz(_resolve(spec['path'], base_dir)))
        family = 'points'
    elif kind == 'grid':
        threshold = float(spec.get('threshold', 0.5))
        values, origin, spacing = read_svol(_resolve(spec['path'], base_dir))
        source = _Grid(values, origin, spacing, threshold)
        family = 'grid'
    else:
        raise OccupancyError(f'unknown geometry type {kind!r}')

    if spec.get('bbox') is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in spec['bbox'])
    else:
        lo, hi = np.asarray(source.lo, float), np.asarray(source.hi, float)
        pad = BBOX_PADDING * (hi - lo)
        lo, hi = lo - pad, hi + pad
    return OccupancyField(
        source,
        lo,
        hi,
        tuple(materials or (MaterialRegion(),)),
        kind=family,
        density_threshold=threshold,
    )


def eval_occupancy(field, X):
    """Occupancy in [0, 1]; accepts a single point or an (N, 3) batch."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    Xb = X.reshape(-1, 3)
    inside = np.all((Xb >= field.bbox_lo) & (Xb <= field.bbox_hi), axis=-1)
    out = np.zeros(Xb.shape[0])
    if inside.any():
        out[inside] = np.clip(field.source(Xb[inside]), 0.0, 1.0)
    return out[0] if single else out


def eval_material(field, X):
    """
    Returns ``(rho, lam, mu)`` at the query point(s).

    Raises
    ------
    OccupancyError
        If any query point has zero occupancy.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    Xb = X.reshape(-1, 3)
    if np.any(eval_occupancy(field, Xb) <= 0.0):
        raise OccupancyError('material undefined outside object')
    rho = np.empty(len(Xb))
    lam = np.empty(len(Xb))
    mu = np.empty(len(Xb))
    for region in field.materials:
        mask = region.contains(Xb)
        r_lam, r_mu = region.lame
        rho[mask] = region.density
        lam[mask] = r_lam
        mu[mask] = r_mu
    if single:
        return rho[0], lam[0], mu[0]
    return rho, lam, mu


@dataclass(frozen=True)
class SamplePoints:
    """Interior samples as parallel arrays (one row per point)."""

    X: np.ndarray
    occupancy: np.ndarray
    rho: np.ndarray
    lam: np.ndarray
    mu: np.ndarray

    def __len__(self):
        return len(self.X)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_interior(field, count, rng_seed=0, threshold=SAMPLE_THRESHOLD):
    """Rejection-sample ``count`` points uniformly from {occupancy > threshold}."""
    if count < 1:
        raise ValueError('count must be >= 1')
    rng = _rng(rng_seed)
    budget = REJECTION_BUDGET * count
    proposed = 0
    chunks = []
    occ_chunks = []
    have = 0
    batch = max(1024, 2 * count)
    while have < count:
        if proposed >= budget:
            raise OccupancyError('occupancy too sparse')
        n = min(batch, budget - proposed)
        P = field.bbox_lo + rng.random((n, 3)) * field.bbox_extent
        proposed += n
        occ = eval_occupancy(field, P)
        keep = occ > threshold
        chunks.append(P[keep])
        occ_chunks.append(occ[keep])
        have += int(keep.sum())
        # grow proposal batches when acceptance is low
        batch = min(batch * 4, 1 << 22)
    X = np.concatenate(chunks)[:count]
    occ = np.concatenate(occ_chunks)[:count]
    rho, lam, mu = eval_material(field, X)
    return SamplePoints(X, occ, rho, lam, mu)


def estimate_volume(field, n_samples=100_000, rng_seed=0, threshold=SAMPLE_THRESHOLD):
    """Hit-or-miss Monte-Carlo volume and its binomial standard error."""
    if n_samples < 100:
        raise ValueError('n_samples must be >= 100')
    rng = _rng(rng_seed)
    accepted = 0
    remaining = n_samples
    while remaining:
        n = min(remaining, 1 << 20)
        P = field.bbox_lo + rng.random((n, 3)) * field.bbox_extent
        accepted += int(np.count_nonzero(eval_occupancy(field, P) > threshold))
        remaining -= n
    frac = accepted / n_samples
    volume = field.bbox_volume * frac
    std_error = field.bbox_volume * np.sqrt(frac * (1.0 - frac) / n_samples)
    return volume, std_error

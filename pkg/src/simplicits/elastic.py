"""
Deformation map, deformation gradients and hyperelastic energy densities.

Conventions
-----------
* A handle transform ``Z_j`` is a 3x4 matrix ``[A_j | t_j]``.  The flat DOF
  vector ``z`` is handle-major, row-major within each block, so
  ``z[12*j + 4*r + c] == Z[j, r, c]``.
* Energy derivatives use column-major flattening of ``F``:
  ``vec(F)[3*k + r] == F[r, k]``.
* Every energy routine accepts a batch of matrices with shape ``(..., 3, 3)``
  and broadcasts ``lam``/``mu`` against the batch shape.
"""

import numpy as np

__all__ = [
    'ENERGY_KINDS',
    'flatten_transforms',
    'unflatten_transforms',
    'deformation_map',
    'skinning_displacement',
    'deformation_gradient_analytic',
    'deformation_gradient_fd',
    'psi_linear',
    'psi_neohookean_paper',
    'psi_stable_neohookean',
    'scheduled_energy',
    'psi',
    'psi_gradient',
    'psi_hessian',
    'vec',
    'unvec',
]

ENERGY_KINDS = ('linear', 'neohookean_paper', 'stable_neohookean')


# --------------------------------------------------------------------------
# handle transforms
# --------------------------------------------------------------------------

def flatten_transforms(Z):
    Z = np.asarray(Z, dtype=float)
    if Z.shape[-2:] != (3, 4):
        raise ValueError(f'handle transforms must be (..., n, 3, 4), got {Z.shape}')
    return Z.reshape(Z.shape[:-3] + (-1,))


def unflatten_transforms(z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] % 12:
        raise ValueError(f'flat transform length {z.shape[-1]} is not a multiple of 12')
    return z.reshape(z.shape[:-1] + (-1, 3, 4))


def _homogeneous(X):
    X = np.asarray(X, dtype=float)
    return np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)


def skinning_displacement(w, Z, X):
    """``sum_j w_j Z_j [X; 1]``, the displacement part of the skinning map."""
    w = np.asarray(w, dtype=float)
    Z = np.asarray(Z, dtype=float)
    # per-handle displacement Z_j [X;1]: (..., n, 3)
    disp = np.einsum('jrc,...c->...jr', Z, _homogeneous(X))
    return np.einsum('...j,...jr->...r', w, disp)


def deformation_map(w, Z, X):
    """
    Linear blend skinning map ``x = X + sum_j w_j Z_j [X; 1]``.

    ``w`` has shape (..., n), ``Z`` shape (n, 3, 4), ``X`` shape (..., 3).
    """
    X = np.asarray(X, dtype=float)
    return X + skinning_displacement(w, Z, X)


def deformation_gradient_analytic(w, grad_w, Z, X):
    """
    ``F = I + sum_j (w_j A_j + (Z_j [X;1]) grad_w_j^T)``.

    ``grad_w`` has shape (..., n, 3): row j is the spatial gradient of w_j.
    """
    w = np.asarray(w, dtype=float)
    grad_w = np.asarray(grad_w, dtype=float)
    Z = np.asarray(Z, dtype=float)
    Xh = _homogeneous(X)
    disp = np.einsum('jrc,...c->...jr', Z, Xh)
    F = np.einsum('...j,jrk->...rk', w, Z[:, :, :3])
    F = F + np.einsum('...jr,...jk->...rk', disp, grad_w)
    return F + np.eye(3)


def deformation_gradient_fd(net, Z, X, h=None):
    """
    Central-difference Jacobian of ``X -> deformation_map(net(X), Z, X)``.

    ``h`` defaults to ``1e-4 * net.input_scale``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if h is None:
        h = 1e-4 * net.input_scale
    if not h > 0:
        raise ValueError('finite-difference step must be positive')
    n_pts = X.shape[0]
    offsets = h * np.eye(3)
    # rows: X + h e_k for k = 0..2, then X - h e_k
    probes = np.concatenate(
        [X[None, :, :] + offsets[:, None, :], X[None, :, :] - offsets[:, None, :]]
    ).reshape(-1, 3)
    # difference the displacement only, so Z = 0 gives F = I exactly
    u = skinning_displacement(net.forward_batch(probes), Z, probes).reshape(2, 3, n_pts, 3)
    # column k of F - I = (u(X + h e_k) - u(X - h e_k)) / 2h
    G = (u[0] - u[1]) / (2.0 * h)
    return np.eye(3) + np.transpose(G, (1, 2, 0))


# --------------------------------------------------------------------------
# energy densities
# --------------------------------------------------------------------------

def vec(F):
    """Column-major flattening of (..., 3, 3) into (..., 9)."""
    F = np.asarray(F)
    return np.swapaxes(F, -1, -2).reshape(F.shape[:-2] + (9,))


def unvec(v):
    v = np.asarray(v)
    return np.swapaxes(v.reshape(v.shape[:-1] + (3, 3)), -1, -2)


def _trace(A):
    return np.trace(A, axis1=-2, axis2=-1)


def _mT(A):
    return np.swapaxes(A, -1, -2)


def _cross(a, b):
    # np.cross spends most of its time moving axes around for small vectors
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def _cofactor(F):
    """dJ/dF, i.e. columns f1 x f2, f2 x f0, f0 x f1.  Defined for singular F."""
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    return np.stack([_cross(f1, f2), _cross(f2, f0), _cross(f0, f1)], axis=-1)


def _det(F, cof=None):
    cof = _cofactor(F) if cof is None else cof
    return np.sum(F[..., :, 0] * cof[..., :, 0], axis=-1)


def _cofactor_dir(F, dF):
    """Directional derivative of the cofactor matrix along dF."""
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    d0, d1, d2 = dF[..., :, 0], dF[..., :, 1], dF[..., :, 2]
    return np.stack(
        [
            _cross(d1, f2) + _cross(f1, d2),
            _cross(d2, f0) + _cross(f2, d0),
            _cross(d0, f1) + _cross(f0, d1),
        ],
        axis=-1,
    )


def _green_strain(F):
    return 0.5 * (_mT(F) @ F - np.eye(3))


def psi_linear(F, lam, mu):
    """``mu tr(E^T E) + lam/2 tr(E)^2`` with Green strain ``E = (F^T F - I)/2``."""
    F = np.asarray(F, dtype=float)
    E = _green_strain(F)
    return mu * np.sum(E * E, axis=(-2, -1)) + 0.5 * lam * _trace(E) ** 2


def psi_neohookean_paper(F, lam, mu):
    F = np.asarray(F, dtype=float)
    I1 = np.sum(F * F, axis=(-2, -1))
    J = _det(F)
    return 0.5 * mu * (I1 - 3.0) + 0.5 * lam * (J - 1.0) ** 2


def psi_stable_neohookean(F, lam, mu):
    F = np.asarray(F, dtype=float)
    Ic = np.sum(F * F, axis=(-2, -1))
    J = _det(F)
    return 0.5 * mu * (Ic - 3.0) - mu * (J - 1.0) + 0.5 * lam * (J - 1.0) ** 2


def scheduled_energy(F, lam, mu, alpha):
    """Blend from the linear energy (alpha=0) to the Neohookean one (alpha=1)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f'blend factor must lie in [0, 1], got {alpha}')
    return (1.0 - alpha) * psi_linear(F, lam, mu) + alpha * psi_neohookean_paper(F, lam, mu)


_PSI = {
    'linear': psi_linear,
    'neohookean_paper': psi_neohookean_paper,
    'stable_neohookean': psi_stable_neohookean,
}


def _check_kind(kind):
    if kind not in _PSI:
        raise ValueError(f'unknown energy kind {kind!r}; expected one of {ENERGY_KINDS}')


def psi(kind, F, lam, mu):
    _check_kind(kind)
    return _PSI[kind](F, lam, mu)


def _stress(kind, F, lam, mu):
    """First Piola-Kirchhoff stress dPsi/dF as (..., 3, 3)."""
    lam = np.asarray(lam, dtype=float)[..., None, None]
    mu = np.asarray(mu, dtype=float)[..., None, None]
    if kind == 'linear':
        E = _green_strain(F)
        S = 2.0 * mu * E + lam * _trace(E)[..., None, None] * np.eye(3)
        return F @ S
    cof = _cofactor(F)
    J = _det(F, cof)[..., None, None]
    if kind == 'neohookean_paper':
        return mu * F + lam * (J - 1.0) * cof
    return mu * F - mu * cof + lam * (J - 1.0) * cof


def _stress_dir(kind, F, dF, lam, mu):
    """Directional derivative of the stress along dF."""
    lam = np.asarray(lam, dtype=float)[..., None, None]
    mu = np.asarray(mu, dtype=float)[..., None, None]
    if kind == 'linear':
        E = _green_strain(F)
        S = 2.0 * mu * E + lam * _trace(E)[..., None, None] * np.eye(3)
        dE = 0.5 * (_mT(dF) @ F + _mT(F) @ dF)
        dS = 2.0 * mu * dE + lam * _trace(dE)[..., None, None] * np.eye(3)
        return dF @ S + F @ dS
    cof = _cofactor(F)
    J = _det(F, cof)[..., None, None]
    dJ = np.sum(cof * dF, axis=(-2, -1))[..., None, None]
    dcof = _cofactor_dir(F, dF)
    if kind == 'neohookean_paper':
        return mu * dF + lam * dJ * cof + lam * (J - 1.0) * dcof
    return mu * dF + lam * dJ * cof + (lam * (J - 1.0) - mu) * dcof


def psi_gradient(kind, F, lam, mu):
    """dPsi/dF as a (..., 3, 3) matrix; ``vec`` it for the 9-vector form."""
    _check_kind(kind)
    return _stress(kind, np.asarray(F, dtype=float), lam, mu)


def _hat(v):
    """Cross-product matrices of (..., 3) vectors."""
    H = np.zeros(v.shape + (3,))
    H[..., 0, 1], H[..., 0, 2] = -v[..., 2], v[..., 1]
    H[..., 1, 0], H[..., 1, 2] = v[..., 2], -v[..., 0]
    H[..., 2, 0], H[..., 2, 1] = -v[..., 1], v[..., 0]
    return H


def _det_hessian(F):
    """d2J/dF2 in vec ordering; block (a, b) is d2J/df_a df_b for columns f."""
    f = [_hat(F[..., :, k]) for k in range(3)]
    H = np.zeros(F.shape[:-2] + (9, 9))
    H[..., 0:3, 3:6], H[..., 0:3, 6:9] = -f[2], f[1]
    H[..., 3:6, 0:3], H[..., 3:6, 6:9] = f[2], -f[0]
    H[..., 6:9, 0:3], H[..., 6:9, 3:6] = -f[1], f[0]
    return H


_VEC_BASIS = unvec(np.eye(9))


def psi_hessian(kind, F, lam, mu):
    """d2Psi/dF2 as (..., 9, 9) in column-major ``vec(F)`` ordering."""
    _check_kind(kind)
    F = np.asarray(F, dtype=float)
    if kind == 'linear':
        # one directional derivative per basis direction, all at once
        lam_, mu_ = (np.asarray(v, dtype=float)[..., None] for v in (lam, mu))
        dP = _stress_dir(kind, F[..., None, :, :], _VEC_BASIS, lam_, mu_)
        H = _mT(vec(dP))
        return 0.5 * (H + _mT(H))
    lam = np.asarray(lam, dtype=float)[..., None, None]
    mu = np.asarray(mu, dtype=float)[..., None, None]
    cof = _cofactor(F)
    g = vec(cof)
    J = _det(F, cof)[..., None, None]
    coef = lam * (J - 1.0) if kind == 'neohookean_paper' else lam * (J - 1.0) - mu
    return mu * np.eye(9) + lam * g[..., :, None] * g[..., None, :] + coef * _det_hessian(F)

"""
Small from-scratch MLP used as the skinning weight field W: R^3 -> R^n.

ELU hidden layers, linear output, parameters kept in one flat float64 array
so the optimizer and the checkpoint format see a single vector.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    'SkinningField',
    'AdamState',
    'CheckpointError',
    'DivergenceError',
    'elu',
    'elu_grad',
    'init_network',
    'param_count',
    'forward',
    'forward_batch',
    'forward_cache',
    'backward',
    'input_jacobian',
    'adam_step',
    'save_checkpoint',
    'load_checkpoint',
]

CHECKPOINT_MAGIC = b'SWGT'
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct('<4sIIII3ddQ')


class CheckpointError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


def elu(u):
    return np.expm1(np.minimum(u, 0.0)) + np.maximum(u, 0.0)


def elu_grad(u):
    return np.exp(np.minimum(u, 0.0))


def _elu_grad_from_output(a):
    # e'(u) = e(u) + 1 for u < 0, and 1 otherwise
    return np.minimum(a, 0.0) + 1.0


def layer_shapes(n_handles, depth, width):
    dims = [3] + [width] * depth + [n_handles]
    return list(zip(dims[:-1], dims[1:]))


def param_count(n_handles, depth, width):
    return sum(i * o + o for i, o in layer_shapes(n_handles, depth, width))


@dataclass(eq=False)
class SkinningField:
    """
    Parameters of the weight network.

    ``params`` stores, per layer, the (fan_in, fan_out) weight matrix in
    row-major order followed by its bias vector.
    """

    n_handles: int
    depth: int
    width: int
    params: np.ndarray
    input_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    input_scale: float = 1.0

    def __post_init__(self):
        if self.n_handles < 1 or self.depth < 1 or self.width < 1:
            raise ValueError('n_handles, depth and width must all be >= 1')
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        self.input_center = np.asarray(self.input_center, dtype=np.float64).reshape(3)
        self.input_scale = float(self.input_scale)
        if not self.input_scale > 0:
            raise ValueError('input_scale must be positive')
        expected = param_count(self.n_handles, self.depth, self.width)
        if self.params.shape != (expected,):
            raise ValueError(
                f'expected {expected} parameters, got array of shape {self.params.shape}'
            )

    def layers(self, params=None):
        """(W, b) views into ``params`` (defaults to the net's own)."""
        theta = self.params if params is None else params
        out = []
        offset = 0
        for fan_in, fan_out in layer_shapes(self.n_handles, self.depth, self.width):
            W = theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = theta[offset:offset + fan_out]
            offset += fan_out
            out.append((W, b))
        return out

    def normalize(self, X):
        return (np.asarray(X, dtype=float) - self.input_center) / self.input_scale

    def forward(self, x):
        return forward(self, x)

    def forward_batch(self, X):
        return forward_batch(self, X)

    def copy(self, params=None):
        return SkinningField(
            self.n_handles,
            self.depth,
            self.width,
            (self.params if params is None else params).copy(),
            self.input_center.copy(),
            self.input_scale,
        )


def init_network(n_handles, depth, width, seed=0, input_center=(0.0, 0.0, 0.0), input_scale=1.0):
    """Uniform fan-in initialization of the weights, zero biases."""
    if n_handles < 1 or depth < 1 or width < 1:
        raise ValueError('n_handles, depth and width must all be >= 1')
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in layer_shapes(n_handles, depth, width):
        bound = np.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return SkinningField(
        n_handles, depth, width, np.concatenate(chunks), input_center, input_scale
    )


def forward_cache(net, X, params=None):
    """
    Run the net keeping each layer's input for a later :func:`backward`.

    Returns ``(output, cache)``.
    """
    a = net.normalize(np.asarray(X, dtype=float).reshape(-1, 3))
    inputs = []
    layers = net.layers(params)
    for W, b in layers[:-1]:
        inputs.append(a)
        a = elu(a @ W + b)
    W, b = layers[-1]
    inputs.append(a)
    return a @ W + b, inputs


def forward_batch(net, X, params=None):
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return np.zeros((0, net.n_handles))
    out, _ = forward_cache(net, X, params)
    return out


def forward(net, x):
    return forward_batch(net, np.asarray(x, dtype=float).reshape(1, 3))[0]


def backward(net, X, upstream, params=None, cache=None):
    """
    Gradient of ``sum_i upstream[i] . forward(net, X[i])`` w.r.t. the flat
    parameter vector.

    ``cache`` from :func:`forward_cache` on the same inputs and parameters
    skips the recomputation of the forward pass.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (X.shape[0], net.n_handles):
        raise ValueError(
            f'upstream shape {upstream.shape} does not match '
            f'forward output {(X.shape[0], net.n_handles)}'
        )
    grad = np.zeros_like(net.params)
    if X.shape[0] == 0:
        return grad
    if cache is None:
        _, cache = forward_cache(net, X, params)
    inputs = cache
    layers = net.layers(params)
    grad_layers = net.layers(grad)

    delta = upstream
    for ell in range(len(layers) - 1, -1, -1):
        gW, gb = grad_layers[ell]
        gW += inputs[ell].T @ delta
        gb += delta.sum(axis=0)
        if ell > 0:
            delta = (delta @ layers[ell][0].T) * _elu_grad_from_output(inputs[ell])
    return grad


def input_jacobian(net, X):
    """
    Analytic spatial Jacobian dW/dX, shape (N, n, 3), by forward-mode
    propagation through the layers.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    a = net.normalize(X)
    # da/dX, starts as I / scale
    J = np.broadcast_to(np.eye(3) / net.input_scale, (X.shape[0], 3, 3))
    layers = net.layers()
    for W, b in layers[:-1]:
        u = a @ W + b
        J = np.einsum('ik,nkd->nid', W.T, J) * elu_grad(u)[:, :, None]
        a = elu(u)
    W, _ = layers[-1]
    return np.einsum('ik,nkd->nid', W.T, J)


@dataclass
class AdamState:
    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(state, theta, grad, lr):
    """
    One bias-corrected Adam update.  Returns ``(theta_new, state)``; the
    state is updated in place.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError('parameter, gradient and moment shapes differ')
    if not np.all(np.isfinite(grad)):
        raise DivergenceError('divergent training step')
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def save_checkpoint(net, path):
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        net.n_handles,
        net.depth,
        net.width,
        *net.input_center.tolist(),
        net.input_scale,
        net.params.size,
    )
    with open(path, 'wb') as fh:
        fh.write(header)
        fh.write(net.params.astype('<f8').tobytes())


def load_checkpoint(path):
    with open(path, 'rb') as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise CheckpointError(f'{path}: truncated checkpoint header')
    magic, version, n, depth, width, cx, cy, cz, scale, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f'{path}: bad magic {magic!r}')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'{path}: unsupported checkpoint version {version}')
    body = data[_HEADER.size:]
    if len(body) != 8 * count:
        raise CheckpointError(
            f'{path}: truncated checkpoint, expected {8 * count} parameter bytes, got {len(body)}'
        )
    if count != param_count(n, depth, width):
        raise CheckpointError(f'{path}: parameter count does not match layer shapes')
    params = np.frombuffer(body, dtype='<f8').astype(np.float64)
    return SkinningField(n, depth, width, params, (cx, cy, cz), scale)

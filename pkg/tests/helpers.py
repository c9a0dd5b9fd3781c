"""Independent references for the tests: a plain numpy MLP and finite differences."""
import itertools

import numpy as np

from fpesc.fields import MlpField
from fpesc.jets import multi_indices

MU0 = np.array([-4.0, -4.0])
SIGMA0 = np.diag([0.7, 1.3])
MU_INF = np.array([4.0, 4.0])
SIGMA_INF = np.diag([1.1, 0.9])

# central O(h^2) stencils for the n-th derivative: (offsets, weights)
STENCILS = {
    0: ((0,), (1.0,)),
    1: ((-1, 1), (-0.5, 0.5)),
    2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
    3: ((-2, -1, 1, 2), (-0.5, 1.0, -1.0, 0.5)),
    4: ((-2, -1, 0, 1, 2), (1.0, -4.0, 6.0, -4.0, 1.0)),
}


def numpy_mlp(field: MlpField, t, x):
    """Reference forward pass written directly from the layer matrices."""
    x = np.asarray(x, dtype=float)
    if field.embedding is None:
        h = np.concatenate([x, [t]])
    else:
        w = 2 * np.pi * x / field.embedding
        h = np.concatenate([np.sin(w), np.cos(w), [t]])
    layers = field.layers()
    for W, b in layers[:-1]:
        h = np.tanh(W @ h + b)
    W, b = layers[-1]
    return W @ h + b


def fd_partial(fn, x, a, h):
    """Mixed partial ``d^a fn(x)`` by tensor-product central stencils."""
    x = np.asarray(x, dtype=float)
    axes = [STENCILS[k] for k in a]
    total = 0.0
    for combo in itertools.product(*[range(len(s[0])) for s in axes]):
        shift = np.array([axes[i][0][c] for i, c in enumerate(combo)], dtype=float)
        weight = np.prod([axes[i][1][c] for i, c in enumerate(combo)])
        total = total + weight * fn(x + h * shift)
    return total / h ** sum(a)


def fd_step(order):
    return {0: 1.0, 1: 1e-4, 2: 1e-3, 3: 2e-3, 4: 1e-2}[order]


def fd_richardson(fn, x, a):
    """``fd_partial`` at steps h and h/2 combined to cancel the O(h^2) term."""
    h = fd_step(sum(a))
    if sum(a) <= 1:
        return fd_partial(fn, x, a, h)
    return (4.0 * fd_partial(fn, x, a, h / 2) - fd_partial(fn, x, a, h)) / 3.0


def all_fd_partials(fn, x, K):
    """``{a: d^a fn(x)}`` for every multi-index up to order K (dim from x)."""
    return {a: fd_richardson(fn, x, a) for a in multi_indices(len(x), K)}


def random_field(sizes, seed, bias_scale=0.5, embedding=None):
    return MlpField.init(sizes, seed=seed, bias_scale=bias_scale, embedding=embedding)

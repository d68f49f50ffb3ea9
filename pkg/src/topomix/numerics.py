"""Small dense-numerics kit with hand-written backward passes.

Everything is float64. Layers are plain functions that return a cache on
the forward pass; the matching backward takes that cache plus the upstream
gradient and accumulates parameter gradients into a dict.
"""
from __future__ import annotations

import numpy as np


class TrainingFault(RuntimeError):
    """Non-finite loss or gradient encountered during an update."""


def make_rng(seed: int) -> np.random.Generator:
    """The one RNG constructor used throughout (PCG64, fixed by seed)."""
    return np.random.Generator(np.random.PCG64(seed))


class ParameterStore:
    """Ordered named float64 arrays. Gradients use plain dicts with the same keys."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}

    def add(self, name, array):
        if name in self.values:
            raise KeyError(f"duplicate parameter segment {name!r}")
        self.values[name] = np.array(array, dtype=np.float64)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def shapes(self):
        return {k: v.shape for k, v in self.values.items()}

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.values.items()}

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, v in self.values.items():
            out.values[k] = v.copy()
        return out

    def assign(self, other: "ParameterStore"):
        if other.shapes() != self.shapes():
            raise ValueError("parameter layouts differ")
        for k in self.values:
            self.values[k][...] = other.values[k]

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        k = 0
        for v in self.values.values():
            v[...] = vec[k:k + v.size].reshape(v.shape)
            k += v.size


def flatten_grads(grads: dict, names) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in names])


def xavier_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform matrix of shape (fan_out, fan_in)."""
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# -- activations ------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def elu(x):
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


# -- affine -----------------------------------------------------------------

def affine(x, W, b):
    """y = x W^T + b over the last axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"affine shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def affine_backward(dy, x, W):
    """Return (dx, dW, db) for y = x W^T + b."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W, dy2.T @ x2, dy2.sum(axis=0)


# -- gated recurrent cell ---------------------------------------------------
#
# Gate weights are stored fused in (r, z, n) row blocks:
#   W: (3H, in), U: (3H, H), b: (3H,) = [b_r, b_z, b_nx], b_nh: (H,)
#   r  = sigmoid(W_r x + U_r h + b_r)
#   z  = sigmoid(W_z x + U_z h + b_z)
#   n  = tanh(W_n x + r * (U_n h + b_nh) + b_nx)
#   h' = (1 - z) * n + z * h

def gru_init(store: ParameterStore, prefix: str, in_dim: int, hidden: int, rng):
    W = np.concatenate([xavier_init((hidden, in_dim), rng) for _ in range(3)])
    U = np.concatenate([xavier_init((hidden, hidden), rng) for _ in range(3)])
    store.add(prefix + "W", W)
    store.add(prefix + "U", U)
    store.add(prefix + "b", np.zeros(3 * hidden))
    store.add(prefix + "b_nh", np.zeros(hidden))


def gru_cell(params, prefix: str, x, h, keep_cache=True):
    W, U = params[prefix + "W"], params[prefix + "U"]
    b, b_nh = params[prefix + "b"], params[prefix + "b_nh"]
    H = U.shape[1]
    if x.shape[-1] != W.shape[1] or h.shape[-1] != H:
        raise ValueError(f"gru shape mismatch: x {x.shape}, h {h.shape}, W {W.shape}")
    gx = x @ W.T + b
    gh = h @ U.T
    r = sigmoid(gx[..., :H] + gh[..., :H])
    z = sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    hn = gh[..., 2 * H:] + b_nh
    n = np.tanh(gx[..., 2 * H:] + r * hn)
    h_new = (1.0 - z) * n + z * h
    cache = (x, h, r, z, n, hn) if keep_cache else None
    return h_new, cache


def gru_cell_backward(params, prefix: str, cache, dh_new, grads: dict):
    """Accumulate parameter grads; return (dx, dh)."""
    W, U = params[prefix + "W"], params[prefix + "U"]
    x, h, r, z, n, hn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    dhn = dan * r
    dar = dan * hn * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dgx = np.concatenate([dar, daz, dan], axis=-1)
    dgh = np.concatenate([dar, daz, dhn], axis=-1)
    dgx2 = dgx.reshape(-1, dgx.shape[-1])
    dgh2 = dgh.reshape(-1, dgh.shape[-1])
    grads[prefix + "W"] += dgx2.T @ x.reshape(-1, x.shape[-1])
    grads[prefix + "U"] += dgh2.T @ h.reshape(-1, h.shape[-1])
    grads[prefix + "b"] += dgx2.sum(axis=0)
    grads[prefix + "b_nh"] += dhn.reshape(-1, dhn.shape[-1]).sum(axis=0)
    dx = dgx @ W
    dh = dh + dgh @ U
    return dx, dh


# -- gradient utilities -----------------------------------------------------

def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: dict, max_norm: float = 10.0) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.

    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    """Bias-corrected Adam over a ParameterStore (in-place updates)."""

    def __init__(self, store: ParameterStore, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = store.zeros_like()
        self.v = store.zeros_like()
        self.t = 0

    def step(self, store: ParameterStore, grads: dict):
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingFault(f"non-finite gradient in segment {k!r}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            store.values[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

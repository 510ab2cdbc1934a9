"""Minimal feed-forward building blocks on flat parameter vectors.

Just enough machinery for the toy window scorer and the meta-router MLPs:
tanh MLP stacks (position-wise over any leading axes), mask-aware mean
pooling, Glorot initialization, and Adam. Parameters live in one flat
float64 vector described by a ParamSpec so the optimizer, checkpointing,
and finite-difference checks all see the same thing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ParamSpec:
    """Ordered (name, shape) layout of a flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.entries))

    def unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat)
        if flat.shape != (self.size,):
            raise ValueError(f"expected flat vector of {self.size}, got {flat.shape}")
        out = {}
        offset = 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = flat[offset : offset + n].reshape(shape)
            offset += n
        return out

    def pack(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        flat = np.zeros(self.size, dtype=np.float64)
        offset = 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            flat[offset : offset + n] = np.asarray(arrays[name], dtype=np.float64).ravel()
            offset += n
        return flat


def mlp_entries(prefix: str, sizes: list[int]) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter layout for a stack of Linear layers sizes[0] -> ... -> sizes[-1]."""
    entries = []
    for k, (d_in, d_out) in enumerate(zip(sizes, sizes[1:])):
        entries.append((f"{prefix}.w{k}", (d_in, d_out)))
        entries.append((f"{prefix}.b{k}", (d_out,)))
    return entries


def glorot_init(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, packed flat."""
    arrays = {}
    for name, shape in spec.entries:
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return spec.pack(arrays)


def mlp_forward(
    params: dict[str, np.ndarray],
    prefix: str,
    x: np.ndarray,
    n_layers: int,
    final_tanh: bool = True,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run a tanh MLP position-wise; returns output and the per-layer cache.

    x may have any leading shape (..., D); the cache holds each layer's
    input plus (for tanh layers) the activation output needed by backward.
    """
    cache: list[np.ndarray] = [x]
    h = x
    for k in range(n_layers):
        z = h @ params[f"{prefix}.w{k}"] + params[f"{prefix}.b{k}"]
        if final_tanh or k < n_layers - 1:
            h = np.tanh(z)
        else:
            h = z
        cache.append(h)
    return h, cache


def mlp_backward(
    params: dict[str, np.ndarray],
    prefix: str,
    cache: list[np.ndarray],
    d_out: np.ndarray,
    grads: dict[str, np.ndarray],
    final_tanh: bool = True,
) -> np.ndarray:
    """Backprop through mlp_forward; accumulates into grads, returns d_input."""
    n_layers = len(cache) - 1
    dh = d_out
    for k in reversed(range(n_layers)):
        h_in, h_out = cache[k], cache[k + 1]
        if final_tanh or k < n_layers - 1:
            dz = dh * (1.0 - h_out * h_out)
        else:
            dz = dh
        w_name, b_name = f"{prefix}.w{k}", f"{prefix}.b{k}"
        flat_in = h_in.reshape(-1, h_in.shape[-1])
        flat_dz = dz.reshape(-1, dz.shape[-1])
        grads[w_name] = grads.get(w_name, 0.0) + flat_in.T @ flat_dz
        grads[b_name] = grads.get(b_name, 0.0) + flat_dz.sum(axis=0)
        dh = dz @ params[w_name].T
    return dh


def masked_mean(
    h: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Mean of h (B, P, D) over valid positions (B, P); all-invalid rows pool to 0.

    Returns (pooled (B, D), counts (B,)) — counts are needed for backward.
    """
    m = mask.astype(np.float64)
    counts = m.sum(axis=1)
    safe = np.maximum(counts, 1.0)
    pooled = (h * m[:, :, None]).sum(axis=1) / safe[:, None]
    return pooled, counts


def masked_mean_backward(
    d_pooled: np.ndarray, mask: np.ndarray, counts: np.ndarray
) -> np.ndarray:
    """Gradient of masked_mean back to the per-position inputs."""
    safe = np.maximum(counts, 1.0)
    return (d_pooled / safe[:, None])[:, None, :] * mask.astype(np.float64)[:, :, None]


@dataclass
class Adam:
    """Standard Adam over one flat parameter vector (deterministic)."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    t: int = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

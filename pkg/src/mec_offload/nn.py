"""Dense ReLU network with hand-written backprop and Adam, in float64."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

CHECKPOINT_MAGIC = b"MLPQ"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    layer_sizes: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("weights/biases do not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: expected W{shape}, b({shape[0]},), "
                                 f"got W{w.shape}, b{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite entries")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_params(layer_sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """He-style uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(tuple(layer_sizes), weights, biases)


def zeros_like(params: MlpParams) -> MlpParams:
    return MlpParams(params.layer_sizes,
                     [np.zeros_like(w) for w in params.weights],
                     [np.zeros_like(b) for b in params.biases])


def copy_params(src: MlpParams) -> MlpParams:
    return MlpParams(src.layer_sizes,
                     [w.copy() for w in src.weights],
                     [b.copy() for b in src.biases])


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.layer_sizes[0]:
        raise ValueError(f"input length {x.shape[-1]} != {params.layer_sizes[0]}")
    return x


def _forward_cache(params: MlpParams, x: np.ndarray):
    # x: (N, in). Keeps pre-activations for the backward pass.
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def forward(params: MlpParams, observation) -> np.ndarray:
    """Q-values for one observation (1-D) or a batch (2-D, one row per sample)."""
    x = _check_input(params, observation)
    single = x.ndim == 1
    acts, _ = _forward_cache(params, x[None, :] if single else x)
    out = acts[-1]
    return out[0] if single else out


def mse_loss_and_grad(params: MlpParams, batch_obs, batch_action_idx, batch_targets,
                      error_clip: Optional[float] = None) -> Tuple[float, MlpParams]:
    """Mean squared TD error on the taken actions, and its exact gradient.

    With ``error_clip`` set, the squared error is replaced beyond the clip
    radius by its linear continuation (the loss whose gradient uses the
    clamped error).
    """
    x = _check_input(params, batch_obs)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch_obs must be a non-empty 2-D array")
    actions = np.asarray(batch_action_idx, dtype=np.int64)
    targets = np.asarray(batch_targets, dtype=np.float64)
    n = x.shape[0]
    if actions.shape != (n,) or targets.shape != (n,):
        raise ValueError("batch sizes disagree")
    if np.isnan(x).any() or not np.all(np.isfinite(targets)):
        raise FloatingPointError("NaN/Inf in training batch")

    acts, pre = _forward_cache(params, x)
    rows = np.arange(n)
    err = acts[-1][rows, actions] - targets
    if error_clip is None:
        loss = float(np.mean(err * err))
        g = err
    else:
        a = abs(err)
        loss = float(np.mean(np.where(a <= error_clip, err * err,
                                      2 * error_clip * a - error_clip**2)))
        g = np.clip(err, -error_clip, error_clip)

    delta = np.zeros_like(acts[-1])
    delta[rows, actions] = 2.0 * g / n
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * (pre[i - 1] > 0)
    return loss, MlpParams(params.layer_sizes, gw, gb)


@dataclass
class AdamState:
    first_moment: MlpParams
    second_moment: MlpParams
    timestep: int = 0
    lr: float = 5e-4
    beta_m: float = 0.9
    beta_v: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 5e-4, **kw) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), lr=lr, **kw)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState) -> MlpParams:
    """Bias-corrected Adam update. Returns new params; ``state`` is updated in place."""
    if grads.layer_sizes != params.layer_sizes or state.first_moment.layer_sizes != params.layer_sizes:
        raise ValueError("shape mismatch between params, grads and optimizer state")
    state.timestep += 1
    t = state.timestep
    bc1 = 1.0 - state.beta_m**t
    bc2 = 1.0 - state.beta_v**t
    new = []
    for p, g, m, v in zip(params.arrays(), grads.arrays(),
                          state.first_moment.arrays(), state.second_moment.arrays()):
        m *= state.beta_m
        m += (1.0 - state.beta_m) * g
        v *= state.beta_v
        v += (1.0 - state.beta_v) * (g * g)
        new.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
    return MlpParams(params.layer_sizes, new[0::2], new[1::2])


# -- checkpoint: magic, u32 version, u32 n_sizes, u32 sizes..., then per layer
#    W (row-major) and b as little-endian float64.

def params_to_bytes(params: MlpParams) -> bytes:
    sizes = params.layer_sizes
    head = CHECKPOINT_MAGIC + struct.pack(f"<II{len(sizes)}I", CHECKPOINT_VERSION,
                                          len(sizes), *sizes)
    body = b"".join(a.astype("<f8").tobytes(order="C") for a in params.arrays())
    return head + body


def params_from_bytes(data: bytes) -> MlpParams:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an MLP checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n}I", data, 12)
    off = 12 + 4 * n
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        for shape, dest in (((n_out, n_in), weights), ((n_out,), biases)):
            count = int(np.prod(shape))
            if off + 8 * count > len(data):
                raise ValueError("truncated checkpoint")
            dest.append(np.frombuffer(data, dtype="<f8", count=count, offset=off)
                        .astype(np.float64).reshape(shape))
            off += 8 * count
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return MlpParams(sizes, weights, biases)


def save_checkpoint(params: MlpParams, path) -> None:
    from .io import atomic_write_bytes
    atomic_write_bytes(path, params_to_bytes(params))


def load_checkpoint(path, expect_sizes: Optional[Sequence[int]] = None) -> MlpParams:
    with open(path, "rb") as fh:
        params = params_from_bytes(fh.read())
    if expect_sizes is not None and tuple(expect_sizes) != params.layer_sizes:
        raise ValueError(f"checkpoint layer sizes {params.layer_sizes} "
                         f"!= expected {tuple(expect_sizes)}")
    return params

"""Next-token model: embedding, additive self-attention, LSTM, dense softmax.

Written directly in numpy with exact analytic gradients. The single-window
``forward`` / ``loss_and_backward`` operations run through the same batched
kernels that training uses (batch of one), so there is one implementation
of the math to keep correct. ``grad_check`` verifies it against central
finite differences coordinate by coordinate.

Attention scores follow the additive form: ``e_ij = v · tanh(Wq x_i +
Wk x_j + b)``, rows softmax-normalized over the window with PAD columns
carrying exactly zero weight. The LSTM gate blocks are stacked in the
order input, forget, cell-candidate, output; checkpoints depend on it.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from opforge.errors import (
    ChecksumMismatch,
    DegenerateDistribution,
    IdOutOfRange,
    ShapeMismatch,
    VersionMismatch,
)
from opforge.smiles import PAD_ID

CHECKPOINT_MAGIC = b"OPF1"

ATTENTION_INIT_STD = 0.05


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    attention_dim: int = 64
    hidden_dim: int = 256
    window_len: int = 40
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "embed_dim", "attention_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")


@dataclass
class ModelParams:
    """All learned weights; field order is the checkpoint tensor order."""

    w_emb: np.ndarray  # (V, E)
    w_q: np.ndarray  # (A, E)
    w_k: np.ndarray  # (A, E)
    b_a: np.ndarray  # (A,)
    v_a: np.ndarray  # (A,)
    w_x: np.ndarray  # (4H, E)
    w_h: np.ndarray  # (4H, H)
    b_lstm: np.ndarray  # (4H,)
    w_out: np.ndarray  # (V, H)
    b_out: np.ndarray  # (V,)

    def items(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{name: np.zeros_like(arr) for name, arr in self.items()})


PARAM_FIELDS = tuple(f.name for f in fields(ModelParams))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    v, e, a, h = (
        config.vocab_size,
        config.embed_dim,
        config.attention_dim,
        config.hidden_dim,
    )
    return {
        "w_emb": (v, e),
        "w_q": (a, e),
        "w_k": (a, e),
        "b_a": (a,),
        "v_a": (a,),
        "w_x": (4 * h, e),
        "w_h": (4 * h, h),
        "b_lstm": (4 * h,),
        "w_out": (v, h),
        "b_out": (v,),
    }


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Draw fresh parameters: attention weights from a zero-mean normal,
    biases all zero, dense/recurrent matrices uniform at Glorot scale.
    Draw order is the field declaration order, so results are fully
    determined by the generator state.
    """

    def glorot(shape: tuple[int, int]) -> np.ndarray:
        fan_out, fan_in = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    shapes = param_shapes(config)
    return ModelParams(
        w_emb=glorot(shapes["w_emb"]),
        w_q=rng.normal(0.0, ATTENTION_INIT_STD, size=shapes["w_q"]),
        w_k=rng.normal(0.0, ATTENTION_INIT_STD, size=shapes["w_k"]),
        b_a=np.zeros(shapes["b_a"]),
        v_a=rng.normal(0.0, ATTENTION_INIT_STD, size=shapes["v_a"]),
        w_x=glorot(shapes["w_x"]),
        w_h=glorot(shapes["w_h"]),
        b_lstm=np.zeros(shapes["b_lstm"]),
        w_out=glorot(shapes["w_out"]),
        b_out=np.zeros(shapes["b_out"]),
    )


@dataclass
class ForwardTrace:
    """Cached intermediates of one forward pass (single window)."""

    ids: np.ndarray  # (L,)
    mask: np.ndarray  # (L,) bool, False at PAD
    x: np.ndarray  # (L, E) embeddings
    scores: np.ndarray  # (L, L) raw attention scores
    alpha: np.ndarray  # (L, L) attention weights, rows sum to 1
    attended: np.ndarray  # (L, E) mixed inputs
    gate_preact: np.ndarray  # (L, 4H)
    gate_i: np.ndarray  # (L, H)
    gate_f: np.ndarray
    gate_g: np.ndarray
    gate_o: np.ndarray
    cell: np.ndarray  # (L, H)
    hidden: np.ndarray  # (L, H)
    logits: np.ndarray  # (V,)
    probs: np.ndarray  # (V,)


class _BatchTrace:
    """Intermediates of a batched forward pass, kept for backward."""

    __slots__ = (
        "ids",
        "mask",
        "x",
        "tanh_pre",
        "scores",
        "alpha",
        "attended",
        "z",
        "i",
        "f",
        "g",
        "o",
        "c",
        "h",
        "logits",
        "probs",
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow saturates to the correct limit (0.0), so silence it
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _pad_window(window: np.ndarray, length: int) -> np.ndarray:
    if len(window) > length:
        raise ShapeMismatch(f"window of {len(window)} ids exceeds window_len {length}")
    if len(window) < length:
        pad = np.full(length - len(window), PAD_ID, dtype=np.int64)
        window = np.concatenate([pad, window])
    return window


def _forward_batch(ids: np.ndarray, params: ModelParams, config: ModelConfig) -> _BatchTrace:
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= config.vocab_size:
        raise IdOutOfRange("token id outside the vocabulary")
    batch, length = ids.shape
    hidden = config.hidden_dim
    dtype = params.w_emb.dtype

    tr = _BatchTrace()
    tr.ids = ids
    tr.mask = ids != PAD_ID  # (B, L)

    tr.x = params.w_emb[ids]  # (B, L, E)
    q = tr.x @ params.w_q.T + params.b_a  # (B, L, A), bias folded in once
    k = tr.x @ params.w_k.T  # (B, L, A)
    pre = q[:, :, None, :] + k[:, None, :, :]  # (B, L, L, A)
    tr.tanh_pre = np.tanh(pre, out=pre)
    tr.scores = tr.tanh_pre @ params.v_a  # (B, L, L)

    col_mask = tr.mask[:, None, :]
    shifted = np.where(col_mask, tr.scores, -1e30)  # finite fill keeps all-PAD rows NaN-free
    shifted -= shifted.max(axis=2, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted *= col_mask
    tr.alpha = shifted / np.maximum(shifted.sum(axis=2, keepdims=True), 1e-300)
    tr.attended = tr.alpha @ tr.x  # (B, L, E)

    tr.z = tr.attended @ params.w_x.T + params.b_lstm  # (B, L, 4H), input part
    tr.i = np.empty((batch, length, hidden), dtype=dtype)
    tr.f = np.empty((batch, length, hidden), dtype=dtype)
    tr.g = np.empty((batch, length, hidden), dtype=dtype)
    tr.o = np.empty((batch, length, hidden), dtype=dtype)
    tr.c = np.empty((batch, length, hidden), dtype=dtype)
    tr.h = np.empty((batch, length, hidden), dtype=dtype)

    h_prev = np.zeros((batch, hidden), dtype=dtype)
    c_prev = np.zeros((batch, hidden), dtype=dtype)
    for t in range(length):
        z = tr.z[:, t]
        z += h_prev @ params.w_h.T
        tr.i[:, t] = _sigmoid(z[:, :hidden])
        tr.f[:, t] = _sigmoid(z[:, hidden : 2 * hidden])
        tr.g[:, t] = np.tanh(z[:, 2 * hidden : 3 * hidden])
        tr.o[:, t] = _sigmoid(z[:, 3 * hidden :])
        c_prev = tr.f[:, t] * c_prev + tr.i[:, t] * tr.g[:, t]
        h_prev = tr.o[:, t] * np.tanh(c_prev)
        tr.c[:, t] = c_prev
        tr.h[:, t] = h_prev

    tr.logits = h_prev @ params.w_out.T + params.b_out  # (B, V)
    shifted = np.exp(tr.logits - tr.logits.max(axis=1, keepdims=True))
    tr.probs = shifted / shifted.sum(axis=1, keepdims=True)
    return tr


def _backward_batch(
    tr: _BatchTrace, targets: np.ndarray, params: ModelParams, config: ModelConfig
) -> ModelParams:
    """Mean-over-batch gradients of the cross-entropy at ``targets``."""
    batch, length = tr.ids.shape
    hidden = config.hidden_dim
    grads = params.zeros_like()

    dlogits = tr.probs.copy()
    dlogits[np.arange(batch), targets] -= 1.0
    dlogits /= batch

    grads.w_out += dlogits.T @ tr.h[:, -1]
    grads.b_out += dlogits.sum(axis=0)
    dh = dlogits @ params.w_out  # (B, H)
    dc = np.zeros_like(dh)
    dz_all = np.empty((batch, length, 4 * hidden))

    for t in range(length - 1, -1, -1):
        i, f, g, o = tr.i[:, t], tr.f[:, t], tr.g[:, t], tr.o[:, t]
        c = tr.c[:, t]
        c_prev = tr.c[:, t - 1] if t > 0 else np.zeros_like(c)
        tanh_c = np.tanh(c)
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c**2)
        dz = dz_all[:, t]
        dz[:, :hidden] = dc * g * i * (1.0 - i)
        dz[:, hidden : 2 * hidden] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * hidden : 3 * hidden] = dc * i * (1.0 - g**2)
        dz[:, 3 * hidden :] = do * o * (1.0 - o)
        dh = dz @ params.w_h
        dc = dc * f

    flat_dz = dz_all.reshape(-1, 4 * hidden)
    grads.w_x += flat_dz.T @ tr.attended.reshape(-1, config.embed_dim)
    h_shift = np.concatenate([np.zeros((batch, 1, hidden)), tr.h[:, :-1]], axis=1)
    grads.w_h += flat_dz.T @ h_shift.reshape(-1, hidden)
    grads.b_lstm += flat_dz.sum(axis=0)
    d_attended = dz_all @ params.w_x  # (B, L, E)

    # attention mixture: attended = alpha @ x
    dalpha = d_attended @ tr.x.transpose(0, 2, 1)  # (B, L, L)
    dx = tr.alpha.transpose(0, 2, 1) @ d_attended  # (B, L, E)

    # softmax rows (masked columns have alpha == 0, so their score grad is 0)
    row_dot = (dalpha * tr.alpha).sum(axis=2, keepdims=True)
    dscores = tr.alpha * (dalpha - row_dot)

    grads.v_a += np.einsum("blm,blma->a", dscores, tr.tanh_pre, optimize=True)
    dpre = tr.tanh_pre  # reuse the buffer: tanh values are not needed below
    np.multiply(dpre, dpre, out=dpre)
    np.subtract(1.0, dpre, out=dpre)
    dpre *= dscores[..., None]
    dpre *= params.v_a
    dq = dpre.sum(axis=2)  # (B, L, A)
    dk = dpre.sum(axis=1)
    grads.b_a += dq.sum(axis=(0, 1))
    grads.w_q += dq.reshape(-1, dq.shape[-1]).T @ tr.x.reshape(-1, config.embed_dim)
    grads.w_k += dk.reshape(-1, dk.shape[-1]).T @ tr.x.reshape(-1, config.embed_dim)
    dx += dq @ params.w_q + dk @ params.w_k

    np.add.at(grads.w_emb, tr.ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    return grads


def forward(
    window: np.ndarray | list[int], params: ModelParams, config: ModelConfig
) -> tuple[np.ndarray, ForwardTrace]:
    """Next-token distribution for one window (left-padded to window_len).

    Returns the probability vector over the vocabulary and the full trace
    of intermediates.

    Raises:
        IdOutOfRange: some id is not below vocab_size.
    """
    ids = _pad_window(np.asarray(window, dtype=np.int64), config.window_len)
    tr = _forward_batch(ids[None, :], params, config)
    trace = ForwardTrace(
        ids=ids,
        mask=tr.mask[0],
        x=tr.x[0],
        scores=tr.scores[0],
        alpha=tr.alpha[0],
        attended=tr.attended[0],
        gate_preact=tr.z[0],
        gate_i=tr.i[0],
        gate_f=tr.f[0],
        gate_g=tr.g[0],
        gate_o=tr.o[0],
        cell=tr.c[0],
        hidden=tr.h[0],
        logits=tr.logits[0],
        probs=tr.probs[0],
    )
    return trace.probs, trace


def loss_and_backward(
    window: np.ndarray | list[int],
    target: int,
    params: ModelParams,
    config: ModelConfig,
) -> tuple[float, ModelParams]:
    """Cross-entropy of the target token and exact gradients for every
    parameter, via backpropagation through the dense head, the LSTM steps,
    the attention mixture and the embedding rows.
    """
    if not 0 <= target < config.vocab_size:
        raise IdOutOfRange(f"target id {target} outside vocabulary")
    ids = _pad_window(np.asarray(window, dtype=np.int64), config.window_len)
    tr = _forward_batch(ids[None, :], params, config)
    targets = np.asarray([target])
    loss = -float(np.log(np.maximum(tr.probs[0, target], 1e-300)))
    grads = _backward_batch(tr, targets, params, config)
    return loss, grads


def batch_loss_and_grads(
    windows: np.ndarray, targets: np.ndarray, params: ModelParams, config: ModelConfig
) -> tuple[float, ModelParams, int]:
    """Mean loss, mean gradients and correct-argmax count over a batch."""
    tr = _forward_batch(windows, params, config)
    picked = tr.probs[np.arange(len(targets)), targets]
    loss = -float(np.mean(np.log(np.maximum(picked, 1e-300))))
    grads = _backward_batch(tr, targets, params, config)
    correct = int((tr.probs.argmax(axis=1) == targets).sum())
    return loss, grads, correct


def batch_probs(windows: np.ndarray, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Probability rows for a batch of windows (no trace kept)."""
    return _forward_batch(windows, params, config).probs


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), t=0)


def adam_step(
    params: ModelParams,
    grads: ModelParams,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = getattr(grads, name)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.shape} ({name})")
        m = beta1 * getattr(state.m, name) + (1.0 - beta1) * g
        v = beta2 * getattr(state.v, name) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return (
        ModelParams(**new_params),
        AdamState(m=ModelParams(**new_m), v=ModelParams(**new_v), t=t),
    )


# --- sampling ----------------------------------------------------------------


def sample_next(probs: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Draw a token id: argmax at temperature 0 (lowest id on ties), else a
    draw from the temperature-rescaled distribution.

    Raises:
        DegenerateDistribution: on negative probabilities.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if (probs < 0).any():
        raise DegenerateDistribution("negative probability")
    if temperature == 0.0:
        return int(np.argmax(probs))
    with np.errstate(divide="ignore"):
        logits = np.log(np.maximum(probs, 1e-300)) / temperature
    weights = np.exp(logits - logits.max())
    weights /= weights.sum()
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(weights), u, side="right"), len(probs) - 1))


# --- checkpointing -----------------------------------------------------------


def save_checkpoint(params: ModelParams, config: ModelConfig, path: str | Path) -> None:
    """Write the versioned container: magic, length-prefixed text header,
    tensors as little-endian float64 in field order, trailing CRC32.
    """
    header = "".join(f"{f.name}={getattr(config, f.name)}\n" for f in fields(config))
    header_bytes = header.encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for _name, arr in params.items():
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint back; bit-identical to what was saved.

    Raises:
        VersionMismatch: wrong magic/version marker.
        ChecksumMismatch: truncated or corrupted payload.
    """
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 8:
        raise ChecksumMismatch("checkpoint file truncated")
    if data[:4] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"unsupported checkpoint marker {data[:4]!r}")
    payload, crc_bytes = data[:-4], data[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumMismatch("checkpoint CRC32 does not match")
    (header_len,) = struct.unpack("<I", data[4:8])
    header_end = 8 + header_len
    header = data[8:header_end].decode("utf-8")
    values: dict[str, int] = {}
    for line in header.splitlines():
        key, _, value = line.partition("=")
        values[key] = int(value)
    config = ModelConfig(**values)

    arrays: dict[str, np.ndarray] = {}
    offset = header_end
    for name, shape in param_shapes(config).items():
        count = int(np.prod(shape))
        end = offset + count * 8
        if end > len(payload):
            raise ChecksumMismatch("checkpoint tensor data truncated")
        arrays[name] = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(payload):
        raise ChecksumMismatch("trailing bytes after checkpoint tensors")
    return ModelParams(**arrays), config


# --- gradient checking ---------------------------------------------------------


def grad_check(
    config: ModelConfig,
    trials: int = 20,
    rng: np.random.Generator | None = None,
    params: ModelParams | None = None,
    corrupt_field: str | None = None,
) -> float:
    """Worst relative error of analytic gradients vs central differences.

    Every parameter coordinate is perturbed by 1e-5 in both directions.
    Random trials draw unit-scale parameters (rather than the training
    initializer, whose near-zero attention weights leave differences below
    float64 cancellation noise); coordinates whose first comparison looks
    off are re-evaluated with extended-precision arithmetic before being
    believed. Intended for small configs only. ``params`` pins the
    parameters instead of redrawing per trial; ``corrupt_field``
    deliberately damages one analytic gradient block to prove the checker
    notices (returns a large error).
    """
    rng = rng or np.random.default_rng(config.rng_seed)
    eps = 1e-5
    worst = 0.0
    for _ in range(trials):
        if params is not None:
            p = params.copy()
        else:
            shapes = param_shapes(config)
            p = ModelParams(
                **{name: rng.uniform(-0.6, 0.6, size=shape) for name, shape in shapes.items()}
            )
        window = rng.integers(0, config.vocab_size, size=config.window_len)
        window[-1] = rng.integers(1, config.vocab_size)  # keep one real token
        target = int(rng.integers(0, config.vocab_size))
        _, grads = loss_and_backward(window, target, p, config)
        if corrupt_field is not None:
            arr = getattr(grads, corrupt_field)
            arr += 0.5 * np.abs(arr).max() + 0.1
        for name, arr in p.items():
            g = getattr(grads, name)
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                err = _fd_relative_error(flat, j, eps, gflat[j], window, target, p, config)
                if err > 1e-5:
                    err = _fd_relative_error(
                        flat, j, eps, gflat[j], window, target, p, config, np.longdouble
                    )
                worst = max(worst, err)
    return worst


def _fd_relative_error(
    flat: np.ndarray,
    j: int,
    eps: float,
    analytic: float,
    window: np.ndarray,
    target: int,
    params: ModelParams,
    config: ModelConfig,
    dtype: type = np.float64,
) -> float:
    orig = flat[j]
    flat[j] = orig + eps
    up = _loss_only(window, target, params, config, dtype)
    flat[j] = orig - eps
    down = _loss_only(window, target, params, config, dtype)
    flat[j] = orig
    fd = float((up - down) / (2.0 * eps))
    denom = max(1e-8, abs(analytic) + abs(fd))
    return abs(analytic - fd) / denom


def _loss_only(
    window: np.ndarray,
    target: int,
    params: ModelParams,
    config: ModelConfig,
    dtype: type = np.float64,
):
    if dtype is not np.float64:
        params = ModelParams(**{name: arr.astype(dtype) for name, arr in params.items()})
    ids = _pad_window(np.asarray(window, dtype=np.int64), config.window_len)
    tr = _forward_batch(ids[None, :], params, config)
    return -np.log(np.maximum(tr.probs[0, target], 1e-300))


__all__ = [
    "ModelConfig",
    "ModelParams",
    "ForwardTrace",
    "AdamState",
    "init_params",
    "forward",
    "loss_and_backward",
    "batch_loss_and_grads",
    "batch_probs",
    "adam_step",
    "sample_next",
    "save_checkpoint",
    "load_checkpoint",
    "grad_check",
    "param_shapes",
    "PARAM_FIELDS",
    "CHECKPOINT_MAGIC",
]

"""Neural network layers on top of the tensor core.

Everything a small transformer needs: linear, embedding, layer norm,
multi-head attention, feed-forward, learned positions, a temporal
Conv1d-BatchNorm-ReLU block, and pre-norm encoder/decoder stacks with a
final layer norm.

Masks are boolean numpy arrays with True marking *valid* positions
(matching the data module's padding masks); attention internally inverts
them when blanking scores. Layers draw initialization from the generator
passed to their constructor and dropout noise from the generator passed
to ``forward``, so a training run is reproducible from two seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

MASK_FILL = -1e9  # large negative, still finite so softmax stays NaN-free


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by the pretraining and downstream stacks."""

    frame_feature_dim: int
    vocab_size: int
    hidden_size: int = 512
    num_heads: int = 8
    ffn_dim: int = 2048
    num_encoder_layers: int = 3
    num_decoder_layers: int = 3
    dropout: float = 0.1
    frame_channels: int = 512  # width of the temporal conv block (per-frame backbone stand-in)
    max_positions: int = 512
    tie_decoder_embedding: bool = False

    def __post_init__(self):
        positives = {
            "frame_feature_dim": self.frame_feature_dim,
            "vocab_size": self.vocab_size,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "frame_channels": self.frame_channels,
            "max_positions": self.max_positions,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.num_encoder_layers < 0 or self.num_decoder_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


# -- parameter containers ---------------------------------------------------


def param(rng: np.random.Generator, shape, kind: str = "fan_uniform") -> Tensor:
    """Create a trainable tensor with the conventional init for its role."""
    if kind == "fan_uniform":
        fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
        if len(shape) == 3:  # temporal conv: (kernel, in, out)
            fan_in = shape[0] * shape[1]
        limit = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-limit, limit, size=shape)
    elif kind == "embedding":
        data = rng.normal(0.0, 0.02, size=shape)
    elif kind == "ones":
        data = np.ones(shape)
    elif kind == "zeros":
        data = np.zeros(shape)
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal parameter container: named parameters, buffers, train/eval mode."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float32)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def _children(self):
        for name, value in vars(self).items():
            if name in ("training", "_buffers"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            else:
                yield from value.named_parameters(prefix=f"{path}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_state(self, prefix: str = ""):
        """Parameters plus buffers, as numpy arrays, for checkpointing."""
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value.data
            else:
                yield from value.named_state(prefix=f"{path}.")
        for name, value in self._buffers.items():
            yield f"{prefix}{name}", value

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                incoming = arrays[path]
                if tuple(incoming.shape) != value.shape:
                    raise ValueError(
                        f"shape mismatch for {path}: checkpoint {incoming.shape}, "
                        f"model {value.shape}"
                    )
                value.data = np.asarray(incoming, dtype=value.dtype).copy()
            else:
                value.load_state(arrays, prefix=f"{path}.")
        for name in self._buffers:
            self._buffers[name] = np.asarray(arrays[f"{prefix}{name}"], dtype=np.float32).copy()

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


# -- basic layers -------------------------------------------------------------


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = param(rng, (in_dim, out_dim))
        self.bias = param(rng, (out_dim,), kind="zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        flat = x if x.ndim == 2 else T.reshape(x, (-1, x.shape[-1]))
        out = T.matmul(flat, self.weight)
        if self.bias is not None:
            out = out + self.bias
        if x.ndim != 2:
            out = T.reshape(out, x.shape[:-1] + (self.weight.shape[1],))
        return out

    __call__ = forward


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = param(rng, (num_embeddings, dim), kind="embedding")

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.scale = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = T.tmean(x, axis=-1, keepdims=True)
        centered = x - T.broadcast_to(mu, x.shape)
        var = T.tmean(centered * centered, axis=-1, keepdims=True)
        rstd = T.sqrt(var + self.eps)
        normed = centered / T.broadcast_to(rstd, x.shape)
        return normed * self.scale + self.shift

    __call__ = forward


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        return x * keep

    __call__ = forward


class PositionalEmbedding(Module):
    """Learned absolute positions, added after the token/sign embedding."""

    def __init__(self, max_positions: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = param(rng, (max_positions, dim), kind="embedding")

    def forward(self, x: Tensor) -> Tensor:
        length = x.shape[-2]
        if length > self.weight.shape[0]:
            raise ValueError(
                f"sequence length {length} exceeds max positions {self.weight.shape[0]}"
            )
        return x + self.weight[:length]

    __call__ = forward


# -- attention masks --------------------------------------------------------------


def padding_attn_mask(key_valid: np.ndarray) -> np.ndarray:
    """(N, Tk) validity -> (N, 1, 1, Tk) attention mask."""
    key_valid = np.asarray(key_valid, dtype=bool)
    return key_valid[:, None, None, :]

def causal_attn_mask(length: int) -> np.ndarray:
    """(1, 1, T, T) lower-triangular validity mask."""
    return np.tril(np.ones((length, length), dtype=bool))[None, None]


class MultiHeadAttention(Module):
    def __init__(self, hidden: int, heads: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        if hidden % heads != 0:
            raise ConfigError(f"hidden size {hidden} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = hidden // heads
        self.q_proj = Linear(hidden, hidden, rng)
        self.k_proj = Linear(hidden, hidden, rng)
        self.v_proj = Linear(hidden, hidden, rng)
        self.out_proj = Linear(hidden, hidden, rng)
        self.drop = Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        n, t, c = x.shape
        return T.transpose(T.reshape(x, (n, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, query, key, value, attn_valid=None, rng=None) -> Tensor:
        n, tq, c = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) / np.sqrt(self.head_dim)
        if attn_valid is not None:
            scores = T.masked_fill(scores, ~np.asarray(attn_valid, dtype=bool), MASK_FILL)
        weights = T.softmax(scores, axis=-1)
        weights = self.drop(weights, rng)
        mixed = T.matmul(weights, v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (n, tq, c))
        return self.out_proj(merged)

    __call__ = forward


class FeedForward(Module):
    def __init__(self, hidden: int, ffn_dim: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.up = Linear(hidden, ffn_dim, rng)
        self.down = Linear(ffn_dim, hidden, rng)
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        return self.down(self.drop(T.relu(self.up(x)), rng))

    __call__ = forward


class EncoderBlock(Module):
    """Pre-norm: attention and feed-forward sublayers with residuals."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(cfg.hidden_size)
        self.attn = MultiHeadAttention(cfg.hidden_size, cfg.num_heads, cfg.dropout, rng)
        self.norm2 = LayerNorm(cfg.hidden_size)
        self.ffn = FeedForward(cfg.hidden_size, cfg.ffn_dim, cfg.dropout, rng)
        self.drop = Dropout(cfg.dropout)

    def forward(self, x, attn_valid=None, rng=None):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, h, attn_valid, rng), rng)
        x = x + self.drop(self.ffn(self.norm2(x), rng), rng)
        return x

    __call__ = forward


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(cfg.hidden_size)
        self.self_attn = MultiHeadAttention(cfg.hidden_size, cfg.num_heads, cfg.dropout, rng)
        self.norm2 = LayerNorm(cfg.hidden_size)
        self.cross_attn = MultiHeadAttention(cfg.hidden_size, cfg.num_heads, cfg.dropout, rng)
        self.norm3 = LayerNorm(cfg.hidden_size)
        self.ffn = FeedForward(cfg.hidden_size, cfg.ffn_dim, cfg.dropout, rng)
        self.drop = Dropout(cfg.dropout)

    def forward(self, x, memory, self_valid, mem_valid=None, rng=None):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, self_valid, rng), rng)
        h = self.norm2(x)
        x = x + self.drop(self.cross_attn(h, memory, memory, mem_valid, rng), rng)
        x = x + self.drop(self.ffn(self.norm3(x), rng), rng)
        return x

    __call__ = forward


class TransformerEncoder(Module):
    """Stack of pre-norm blocks plus a final layer norm (applied even for 0 layers)."""

    def __init__(self, cfg: ModelConfig, num_layers: int, rng: np.random.Generator):
        super().__init__()
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(num_layers)]
        self.final_norm = LayerNorm(cfg.hidden_size)

    def forward(self, x: Tensor, key_valid: np.ndarray | None = None, rng=None) -> Tensor:
        attn_valid = padding_attn_mask(key_valid) if key_valid is not None else None
        for block in self.blocks:
            x = block(x, attn_valid, rng)
        return self.final_norm(x)

    __call__ = forward


class TransformerDecoder(Module):
    def __init__(self, cfg: ModelConfig, num_layers: int, rng: np.random.Generator):
        super().__init__()
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(num_layers)]
        self.final_norm = LayerNorm(cfg.hidden_size)

    def forward(self, tgt: Tensor, memory: Tensor, tgt_valid=None, mem_valid=None, rng=None):
        if memory.shape[-2] == 0:
            raise ValueError("decoder memory must contain at least one position")
        u = tgt.shape[-2]
        self_valid = causal_attn_mask(u)
        if tgt_valid is not None:
            self_valid = self_valid & padding_attn_mask(tgt_valid)
        mem_mask = padding_attn_mask(mem_valid) if mem_valid is not None else None
        for block in self.blocks:
            tgt = block(tgt, memory, self_valid, mem_mask, rng)
        return self.final_norm(tgt)

    __call__ = forward


class ConvBNReLU(Module):
    """Temporal Conv1d (kernel 3, stride 1, zero pad 1) + batch norm + ReLU.

    Preserves sequence length. Batch norm normalizes per channel over
    batch x time with batch statistics during training and running
    statistics (momentum 0.1) at inference.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.weight = param(rng, (3, channels, channels))
        self.bias = param(rng, (channels,), kind="zeros")
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        n, t, c = x.shape
        pad = Tensor(np.zeros((n, 1, c), dtype=x.dtype))
        padded = T.concat([pad, x, pad], axis=1)
        out = T.matmul(padded[:, 0:t, :], self.weight[0])
        out = out + T.matmul(padded[:, 1:t + 1, :], self.weight[1])
        out = out + T.matmul(padded[:, 2:t + 2, :], self.weight[2])
        out = out + self.bias

        if self.training:
            mu = T.tmean(out, axis=(0, 1))
            centered = out - mu
            var = T.tmean(centered * centered, axis=(0, 1))
            m = self.momentum
            self._buffers["running_mean"] = (
                (1 - m) * self.buffer("running_mean") + m * mu.data.astype(np.float32)
            )
            self._buffers["running_var"] = (
                (1 - m) * self.buffer("running_var") + m * var.data.astype(np.float32)
            )
            normed = centered / T.sqrt(var + self.eps)
        else:
            mean = self.buffer("running_mean").astype(out.dtype)
            var = self.buffer("running_var").astype(out.dtype)
            normed = (out - mean) / np.sqrt(var + self.eps)
        return T.relu(normed * self.gamma + self.beta)

    __call__ = forward

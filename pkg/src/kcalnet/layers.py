"""Parameterized layers: dense, dropout, batch norm, inverted residuals,
the text branch (vectorizer, embedding, pooling), and cross-modal attention.

Every layer keeps its parameters as ``Tensor`` objects with
``requires_grad=True`` and exposes them through ``params()`` (flat dict,
dotted names) so the optimizer and checkpoint code can treat all models
uniformly.  Mutable state (batch-norm running statistics, dropout RNG) is
confined to train-mode forwards.
"""

from __future__ import annotations

import string

import numpy as np

from .errors import DimensionError
from . import tensor as T
from .tensor import Tensor


def fanin_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    """Fan-in-scaled uniform init, limit sqrt(6 / fan_in)."""
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


class Dense:
    """Affine map x @ W + b with weights (in, out) and bias (out,)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weights = fanin_uniform(rng, (in_dim, out_dim), in_dim, dtype)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"dense layer expects trailing dim {self.in_dim}, got input shape {x.shape}")
        return T.add(T.matmul(x, self.weights), self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weights": self.weights, f"{prefix}.bias": self.bias}

    def signature(self):
        return ("dense", self.out_dim)


class Dropout:
    """Inverted dropout: train-mode forward zeros each element with
    probability ``rate`` and scales survivors by 1/(1-rate); eval-mode
    forward is the identity bitwise."""

    def __init__(self, rate: float, seed: int = 0):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.reseed(seed)

    def reseed(self, seed: int) -> None:
        self._rng = np.random.default_rng(seed)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        _check_mode(mode)
        if mode == "eval" or self.rate == 0.0:
            return x
        keep = self._rng.random(x.shape) >= self.rate
        mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.rate))
        return T.mul(x, Tensor(mask))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {}

    def signature(self):
        return ("dropout", self.rate)


class BatchNorm:
    """Per-channel normalization over all leading axes.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running statistics with the given momentum; eval mode normalizes by
    the running statistics, so eval outputs are batch-independent.
    """

    def __init__(self, channels: int, momentum: float = 0.99, epsilon: float = 1e-3,
                 dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        _check_mode(mode)
        if x.shape[-1] != self.channels:
            raise DimensionError(
                f"batch norm over {self.channels} channels got input shape {x.shape}")
        if mode == "train":
            axes = tuple(range(x.ndim - 1))
            mean = T.reduce_mean(x, axes)
            centered = T.sub(x, mean)
            var = T.reduce_mean(T.mul(centered, centered), axes)
            inv_std = T.rsqrt(T.add(var, Tensor(np.asarray(self.epsilon, dtype=x.dtype))))
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean.data).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var.data).astype(x.dtype)
            normalized = T.mul(centered, inv_std)
        else:
            inv = (1.0 / np.sqrt(self.running_var + self.epsilon)).astype(x.dtype)
            normalized = T.mul(T.sub(x, Tensor(self.running_mean)), Tensor(inv))
        return T.add(T.mul(normalized, self.gamma), self.beta)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean,
                f"{prefix}.running_var": self.running_var}

    def load_buffers(self, prefix: str, buffers: dict[str, np.ndarray]) -> None:
        self.running_mean = buffers[f"{prefix}.running_mean"].copy()
        self.running_var = buffers[f"{prefix}.running_var"].copy()

    def signature(self):
        return ("batchnorm", self.channels)


class Conv2d:
    """Conv wrapper holding a (kh, kw, cin, cout) kernel; no bias (batch
    norm always follows in these models)."""

    def __init__(self, kh: int, kw: int, cin: int, cout: int, stride: int,
                 padding: str, rng: np.random.Generator, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        self.kernel = fanin_uniform(rng, (kh, kw, cin, cout), kh * kw * cin, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.stride, self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.kernel": self.kernel}

    def signature(self):
        return ("conv", self.kernel.shape, self.stride)


class DepthwiseConv2d:
    """Depthwise conv wrapper holding a (kh, kw, c) kernel."""

    def __init__(self, kh: int, kw: int, channels: int, stride: int,
                 padding: str, rng: np.random.Generator, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        self.kernel = fanin_uniform(rng, (kh, kw, channels), kh * kw, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.kernel, self.stride, self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.kernel": self.kernel}

    def signature(self):
        return ("depthwise", self.kernel.shape, self.stride)


class InvertedResidual:
    """Expansion (1x1 conv, BN, relu6), depthwise 3x3 with stride (BN,
    relu6), linear projection (1x1 conv, BN); residual skip when stride is 1
    and channel counts match."""

    def __init__(self, cin: int, cout: int, stride: int, expansion: float,
                 rng: np.random.Generator, dtype=np.float32,
                 bn_momentum: float = 0.99, bn_epsilon: float = 1e-3):
        if stride not in (1, 2):
            raise ValueError(f"inverted residual stride must be 1 or 2, got {stride}")
        hidden = max(1, int(round(cin * expansion)))
        self.use_skip = stride == 1 and cin == cout
        self.expand = Conv2d(1, 1, cin, hidden, 1, "same", rng, dtype)
        self.expand_bn = BatchNorm(hidden, bn_momentum, bn_epsilon, dtype)
        self.depthwise = DepthwiseConv2d(3, 3, hidden, stride, "same", rng, dtype)
        self.depthwise_bn = BatchNorm(hidden, bn_momentum, bn_epsilon, dtype)
        self.project = Conv2d(1, 1, hidden, cout, 1, "same", rng, dtype)
        self.project_bn = BatchNorm(cout, bn_momentum, bn_epsilon, dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        h = T.relu6(self.expand_bn.forward(self.expand.forward(x), mode))
        h = T.relu6(self.depthwise_bn.forward(self.depthwise.forward(h), mode))
        h = self.project_bn.forward(self.project.forward(h), mode)
        return T.add(x, h) if self.use_skip else h

    def _stages(self):
        return [("expand", self.expand), ("expand_bn", self.expand_bn),
                ("depthwise", self.depthwise), ("depthwise_bn", self.depthwise_bn),
                ("project", self.project), ("project_bn", self.project_bn)]

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, layer in self._stages():
            out.update(layer.params(f"{prefix}.{name}"))
        return out

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, layer in self._stages():
            if isinstance(layer, BatchNorm):
                out.update(layer.buffers(f"{prefix}.{name}"))
        return out

    def load_buffers(self, prefix: str, buffers: dict[str, np.ndarray]) -> None:
        for name, layer in self._stages():
            if isinstance(layer, BatchNorm):
                layer.load_buffers(f"{prefix}.{name}", buffers)

    def signature(self):
        return ("inverted_residual", self.expand.kernel.shape[2],
                self.project.kernel.shape[3], self.depthwise.stride)


# ---------------------------------------------------------------------------
# Text branch
# ---------------------------------------------------------------------------

PAD_ID = 0
OOV_ID = 1

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


def tokenize(text: str) -> list[str]:
    """Lowercase, map punctuation to spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class Vectorizer:
    """Token-to-id map with reserved pad (0) and out-of-vocabulary (1) ids.

    Kept token ids are dense, starting at 2, assigned by descending corpus
    frequency with lexicographic tie-break.
    """

    def __init__(self, vocab: dict[str, int], max_tokens: int):
        self.vocab = dict(vocab)
        self.max_tokens = max_tokens

    @property
    def vocab_size(self) -> int:
        """Total id space including pad and OOV."""
        return len(self.vocab) + 2

    def vectorize(self, text: str) -> np.ndarray:
        """Fixed-length int64 id sequence: OOV-mapped, right-padded, truncated."""
        ids = [self.vocab.get(tok, OOV_ID) for tok in tokenize(text)][: self.max_tokens]
        ids.extend([PAD_ID] * (self.max_tokens - len(ids)))
        return np.asarray(ids, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "max_tokens": self.max_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "Vectorizer":
        return cls(d["vocab"], d["max_tokens"])


def fit_vocab(corpus: list[str], max_vocab: int, max_tokens: int) -> Vectorizer:
    """Build a Vectorizer from a corpus, keeping the max_vocab - 2 most
    frequent tokens (ties broken lexicographically)."""
    if not corpus:
        raise ValueError("fit_vocab needs a non-empty corpus")
    if max_vocab < 3:
        raise ValueError(f"max_vocab must leave room for at least one token, got {max_vocab}")
    counts: dict[str, int] = {}
    for text in corpus:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max_vocab - 2]
    vocab = {tok: i + 2 for i, (tok, _) in enumerate(ranked)}
    return Vectorizer(vocab, max_tokens)


class EmbeddingTable:
    """Trainable (vocab_size, embed_dim) lookup table; the pad row is
    trainable and participates in pooling."""

    def __init__(self, vocab_size: int, embed_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.table = Tensor(
            rng.normal(0.0, 0.05, size=(vocab_size, embed_dim)).astype(dtype),
            requires_grad=True)

    def embed_and_pool(self, ids: np.ndarray | Tensor) -> tuple[Tensor, Tensor]:
        """Return (sequence (B, L, E), pooled (B, E)); pooling averages over
        all positions including padding."""
        seq = T.gather_rows(self.table, ids)
        pooled = T.reduce_mean(seq, axes=(seq.ndim - 2,))
        return seq, pooled

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.table": self.table}

    def signature(self):
        return ("embedding", self.table.shape)


class MultiHeadAttention:
    """Scaled dot-product attention with separate query and key/value inputs.

    Projections are bias-free: Wq, Wk, Wv map model_dim to heads*key_dim and
    Wo maps heads*key_dim back to model_dim.
    """

    def __init__(self, model_dim: int, heads: int, key_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        if heads < 1 or key_dim < 1:
            raise ValueError(f"heads and key_dim must be positive, got {heads}, {key_dim}")
        self.model_dim = model_dim
        self.heads = heads
        self.key_dim = key_dim
        inner = heads * key_dim
        self.wq = fanin_uniform(rng, (model_dim, inner), model_dim, dtype)
        self.wk = fanin_uniform(rng, (model_dim, inner), model_dim, dtype)
        self.wv = fanin_uniform(rng, (model_dim, inner), model_dim, dtype)
        self.wo = fanin_uniform(rng, (inner, model_dim), inner, dtype)

    def forward(self, queries: Tensor, keys_values: Tensor, return_weights: bool = False):
        """Cross attention: queries (B, Nq, D) attend to keys_values (B, Nk, D).

        Returns (B, Nq, D), or a pair (output, weights (B, heads, Nq, Nk))
        when return_weights is set.
        """
        if queries.ndim != 3 or keys_values.ndim != 3:
            raise DimensionError(
                f"attention expects 3-D inputs, got {queries.shape} and {keys_values.shape}")
        if queries.shape[-1] != self.model_dim or keys_values.shape[-1] != self.model_dim:
            raise DimensionError(
                f"attention model_dim {self.model_dim} does not match inputs "
                f"{queries.shape} and {keys_values.shape}")
        if keys_values.shape[1] == 0:
            raise ValueError("attention requires a non-empty key/value sequence")
        b, nq, _ = queries.shape
        nk = keys_values.shape[1]

        def split_heads(x: Tensor, n: int) -> Tensor:
            x = T.reshape(x, (b, n, self.heads, self.key_dim))
            return T.transpose(x, (0, 2, 1, 3))

        q = split_heads(T.matmul(queries, self.wq), nq)
        k = split_heads(T.matmul(keys_values, self.wk), nk)
        v = split_heads(T.matmul(keys_values, self.wv), nk)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                         1.0 / np.sqrt(self.key_dim))
        weights = T.softmax(scores, axis=-1)
        context = T.matmul(weights, v)
        merged = T.reshape(T.transpose(context, (0, 2, 1, 3)),
                           (b, nq, self.heads * self.key_dim))
        out = T.matmul(merged, self.wo)
        if return_weights:
            return out, weights
        return out

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}

    def signature(self):
        return ("attention", self.heads, self.key_dim, self.model_dim)


def flatten(x: Tensor) -> Tensor:
    """Collapse all non-batch dims row-major: (B, ...) -> (B, prod(rest))."""
    if x.ndim < 2:
        raise DimensionError(f"flatten needs rank >= 2, got shape {x.shape}")
    size = 1
    for d in x.shape[1:]:
        size *= d
    return T.reshape(x, (x.shape[0], size))


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

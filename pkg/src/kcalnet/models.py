"""The two calorie regressors under comparison.

Both models share one configurable image branch (conv stem, inverted
residual stages, a 1x1 feature conv to the shared model dim, global average
pooling) and the same two-dense-layer regression head.  The multimodal
variant adds exactly three fusion steps on top of a text branch: a
cross-modal attention block where image spatial features attend to the
token embedding sequence, a flatten of the attention output, and a concat
of pooled image features, pooled text, and the flattened attention that
feeds the head.

Also defines the versioned binary checkpoint container used across the
package (model config, vocabulary, parameters, batch-norm buffers, and
optionally optimizer state).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, CheckpointError
from . import tensor as T
from .tensor import Tensor
from . import layers as L


@dataclass
class ArchConfig:
    """All architecture hyperparameters shared by both models.

    ``embed_dim`` doubles as the shared model dim: the image branch's final
    feature conv projects to it, so image queries and text embeddings agree
    for attention.
    """

    image_size: int = 32
    backbone_widths: tuple[int, ...] = (8, 16)
    backbone_blocks: tuple[int, ...] = (1, 1)
    backbone_strides: tuple[int, ...] | None = None
    expansion: float = 3.0
    dense_units: tuple[int, int] = (16, 8)
    dropout_rate: float = 0.1
    vocab_size: int = 32
    max_tokens: int = 6
    embed_dim: int = 16
    attention_heads: int = 2
    key_dim: int = 4
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3

    def __post_init__(self):
        self.backbone_widths = tuple(self.backbone_widths)
        self.backbone_blocks = tuple(self.backbone_blocks)
        if self.backbone_strides is None:
            self.backbone_strides = (1,) + (2,) * (len(self.backbone_widths) - 1)
        else:
            self.backbone_strides = tuple(self.backbone_strides)
        self.dense_units = tuple(self.dense_units)
        self.validate()

    def validate(self) -> None:
        if self.image_size < 4:
            raise ConfigError(f"image_size must be at least 4, got {self.image_size}")
        n = len(self.backbone_widths)
        if n == 0 or len(self.backbone_blocks) != n or len(self.backbone_strides) != n:
            raise ConfigError(
                "backbone_widths, backbone_blocks and backbone_strides must have "
                f"equal nonzero length, got {self.backbone_widths}, "
                f"{self.backbone_blocks}, {self.backbone_strides}")
        if any(w < 1 for w in self.backbone_widths) or any(b < 1 for b in self.backbone_blocks):
            raise ConfigError("backbone widths and block counts must be positive")
        if any(s not in (1, 2) for s in self.backbone_strides):
            raise ConfigError(f"stage strides must be 1 or 2, got {self.backbone_strides}")
        if len(self.dense_units) != 2 or any(u < 1 for u in self.dense_units):
            raise ConfigError(f"dense_units must be two positive ints, got {self.dense_units}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.expansion <= 0:
            raise ConfigError(f"expansion must be positive, got {self.expansion}")
        for name in ("vocab_size", "max_tokens", "embed_dim", "attention_heads", "key_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size < 3:
            raise ConfigError(f"vocab_size must be at least 3 (pad, oov, one token), "
                              f"got {self.vocab_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)

    def feature_grid(self) -> int:
        """Spatial side length of the final feature map (square input)."""
        side = -(-self.image_size // 2)  # stem stride 2, same padding
        for s in self.backbone_strides:
            if s == 2:
                side = -(-side // 2)
        return side


def micro_config() -> ArchConfig:
    """Desk-scale config used throughout the test suite."""
    return ArchConfig()


def nano_config() -> ArchConfig:
    """Smallest complete config; sized so full-sweep gradient checks of both
    models stay fast."""
    return ArchConfig(
        image_size=16, backbone_widths=(4, 8), backbone_blocks=(1, 1),
        expansion=2.0, dense_units=(8, 6), dropout_rate=0.0,
        vocab_size=12, max_tokens=4, embed_dim=8, attention_heads=2, key_dim=3)


def paper_scale_config() -> ArchConfig:
    """Full-size config for parameter-count parity; not meant for desk training."""
    return ArchConfig(
        image_size=224,
        backbone_widths=(16, 24, 32, 64, 96, 160, 320),
        backbone_blocks=(1, 2, 3, 4, 3, 3, 1),
        backbone_strides=(1, 2, 2, 2, 1, 2, 1),
        expansion=6.0, dense_units=(128, 64), dropout_rate=0.2,
        vocab_size=1000, max_tokens=8, embed_dim=1280,
        attention_heads=4, key_dim=64)


class Model:
    """A built regressor: unimodal (image only) or multimodal (image + text)."""

    def __init__(self, kind: str, cfg: ArchConfig, seed: int, dtype=np.float32):
        if kind not in ("unimodal", "multimodal"):
            raise ConfigError(f"model kind must be 'unimodal' or 'multimodal', got {kind!r}")
        cfg.validate()
        self.kind = kind
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.vectorizer: L.Vectorizer | None = None
        rng = np.random.default_rng(seed)

        bn = dict(bn_momentum=cfg.bn_momentum, bn_epsilon=cfg.bn_epsilon)
        self.stem = L.Conv2d(3, 3, 3, cfg.backbone_widths[0], 2, "same", rng, dtype)
        self.stem_bn = L.BatchNorm(cfg.backbone_widths[0], cfg.bn_momentum, cfg.bn_epsilon, dtype)
        self.blocks: list[L.InvertedResidual] = []
        cin = cfg.backbone_widths[0]
        for width, count, stride in zip(cfg.backbone_widths, cfg.backbone_blocks,
                                        cfg.backbone_strides):
            for j in range(count):
                self.blocks.append(L.InvertedResidual(
                    cin, width, stride if j == 0 else 1, cfg.expansion, rng, dtype, **bn))
                cin = width
        self.feature_conv = L.Conv2d(1, 1, cin, cfg.embed_dim, 1, "same", rng, dtype)
        self.feature_bn = L.BatchNorm(cfg.embed_dim, cfg.bn_momentum, cfg.bn_epsilon, dtype)

        if kind == "multimodal":
            self.embedding = L.EmbeddingTable(cfg.vocab_size, cfg.embed_dim, rng, dtype)
            self.attention = L.MultiHeadAttention(
                cfg.embed_dim, cfg.attention_heads, cfg.key_dim, rng, dtype)
            grid = cfg.feature_grid()
            head_in = cfg.embed_dim + cfg.embed_dim + grid * grid * cfg.embed_dim
        else:
            self.embedding = None
            self.attention = None
            head_in = cfg.embed_dim

        u1, u2 = cfg.dense_units
        self.dense1 = L.Dense(head_in, u1, rng, dtype)
        self.dropout1 = L.Dropout(cfg.dropout_rate, seed)
        self.dense2 = L.Dense(u1, u2, rng, dtype)
        self.dropout2 = L.Dropout(cfg.dropout_rate, seed + 1)
        self.out_dense = L.Dense(u2, 1, rng, dtype)

    # -- forward ------------------------------------------------------------

    def image_features(self, image: Tensor, mode: str) -> tuple[Tensor, Tensor]:
        """Run the image branch; returns (feature map (B, G, G, D), pooled (B, D))."""
        h = T.relu6(self.stem_bn.forward(self.stem.forward(image), mode))
        for block in self.blocks:
            h = block.forward(h, mode)
        fmap = T.relu6(self.feature_bn.forward(self.feature_conv.forward(h), mode))
        pooled = T.reduce_mean(fmap, axes=(1, 2))
        return fmap, pooled

    def head(self, features: Tensor, mode: str) -> Tensor:
        h = T.relu(self.dense1.forward(features))
        h = self.dropout1.forward(h, mode)
        h = T.relu(self.dense2.forward(h))
        h = self.dropout2.forward(h, mode)
        return self.out_dense.forward(h)

    def forward(self, image: Tensor | np.ndarray, text_ids=None, mode: str = "eval") -> Tensor:
        """Predict calories (kcal) per sample, shape (B, 1)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if self.kind == "multimodal" and text_ids is None:
            raise ValueError("multimodal model requires text_ids")
        if self.kind == "unimodal" and text_ids is not None:
            raise ValueError("unimodal model takes no text_ids")
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.dtype))
        if image.ndim != 4 or image.shape[3] != 3:
            raise ValueError(f"expected image batch (B, H, W, 3), got {image.shape}")

        fmap, pooled_image = self.image_features(image, mode)
        if self.kind == "unimodal":
            return self.head(pooled_image, mode)

        b, gh, gw, d = fmap.shape
        queries = T.reshape(fmap, (b, gh * gw, d))
        ids = text_ids.data if isinstance(text_ids, Tensor) else np.asarray(text_ids)
        if ids.ndim != 2 or ids.shape[0] != b:
            raise ValueError(f"expected text_ids (B, L) with B={b}, got {ids.shape}")
        seq, pooled_text = self.embedding.embed_and_pool(ids)
        attended = self.attention.forward(queries, seq)
        fused = T.concat([pooled_image, pooled_text, L.flatten(attended)], axis=-1)
        return self.head(fused, mode)

    # -- bookkeeping ---------------------------------------------------------

    def set_step_seed(self, seed: int) -> None:
        """Reseed the dropout streams; called once per training step so runs
        are resumable from any epoch boundary."""
        for i, drop in enumerate((self.dropout1, self.dropout2)):
            drop.reseed(int(np.random.SeedSequence((seed, i)).generate_state(1)[0]))

    def _named_layers(self):
        named = [("stem", self.stem), ("stem_bn", self.stem_bn)]
        named += [(f"block{i}", blk) for i, blk in enumerate(self.blocks)]
        named += [("feature_conv", self.feature_conv), ("feature_bn", self.feature_bn)]
        if self.kind == "multimodal":
            named += [("embedding", self.embedding), ("attention", self.attention)]
        named += [("dense1", self.dense1), ("dense2", self.dense2),
                  ("out_dense", self.out_dense)]
        return named

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, layer in self._named_layers():
            out.update(layer.params(name))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, layer in self._named_layers():
            if hasattr(layer, "buffers"):
                out.update(layer.buffers(name))
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, layer in self._named_layers():
            if hasattr(layer, "load_buffers"):
                layer.load_buffers(name, buffers)

    def signature(self) -> list[tuple]:
        """Layer type/shape signature of the full pipeline, in forward order.

        Dense entries carry only output width so the unimodal signature is a
        subsequence of the multimodal one (the fusion concat widens the first
        dense input but leaves the head structure unchanged).
        """
        sig = [self.stem.signature(), self.stem_bn.signature(), ("relu6",)]
        for blk in self.blocks:
            sig.append(blk.signature())
        sig += [self.feature_conv.signature(), self.feature_bn.signature(),
                ("relu6",), ("global_average_pool",)]
        if self.kind == "multimodal":
            sig += [self.embedding.signature(), self.attention.signature(),
                    ("flatten",), ("concat",)]
        sig += [self.dense1.signature(), ("relu",), self.dropout1.signature(),
                self.dense2.signature(), ("relu",), self.dropout2.signature(),
                self.out_dense.signature()]
        return sig


def build_unimodal(cfg: ArchConfig, seed: int, dtype=np.float32) -> Model:
    """Image-only regressor; parameters are deterministic under seed."""
    return Model("unimodal", cfg, seed, dtype)


def build_multimodal(cfg: ArchConfig, seed: int, dtype=np.float32) -> Model:
    """Image+text regressor with cross-modal attention fusion."""
    return Model("multimodal", cfg, seed, dtype)


def param_count(model: Model) -> int:
    """Total number of trainable scalars."""
    return sum(p.size for p in model.params().values())


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"KCNET\x00"
_FORMAT_VERSION = 1


def save_checkpoint(path: str, model: Model, opt_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write a self-contained checkpoint: config, vocab, parameters,
    batch-norm buffers, and optionally Adam state.  Written atomically via a
    temp file so a crashed save never leaves a partial checkpoint behind."""
    params = model.params()
    buffers = model.buffers()
    entries: list[tuple[str, np.ndarray]] = [(k, p.data) for k, p in params.items()]
    entries += [(f"buffer:{k}", v) for k, v in buffers.items()]
    opt_header = None
    if opt_state is not None:
        opt_header = {"t": int(opt_state["t"])}
        for slot in ("m", "v"):
            for k, arr in opt_state[slot].items():
                entries.append((f"opt:{slot}:{k}", arr))

    header = {
        "format_version": _FORMAT_VERSION,
        "kind": model.kind,
        "cfg": model.cfg.to_dict(),
        "seed": model.seed,
        "vectorizer": model.vectorizer.to_dict() if model.vectorizer else None,
        "opt": opt_header,
        "extra": extra or {},
        "tensors": [[name, list(arr.shape), arr.dtype.str] for name, arr in entries],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[Model, dict | None, dict]:
    """Read a checkpoint; returns (model, opt_state or None, extra dict).

    Parameters and buffers are restored bitwise.  Raises CheckpointError on
    bad magic, unknown version, or truncation.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(_MAGIC) + 4 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a kcalnet checkpoint")
    (header_len,) = struct.unpack_from("<I", raw, len(_MAGIC))
    body_start = len(_MAGIC) + 4 + header_len
    if len(raw) < body_start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(_MAGIC) + 4: body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    if header.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('format_version')}")

    expected = sum(int(np.prod(shape)) * np.dtype(dt).itemsize
                   for _, shape, dt in header["tensors"])
    if len(raw) - body_start != expected:
        raise CheckpointError(
            f"{path}: truncated data section, expected {expected} bytes, "
            f"got {len(raw) - body_start}")

    arrays: dict[str, np.ndarray] = {}
    offset = body_start
    for name, shape, dt in header["tensors"]:
        dtype = np.dtype(dt)
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        arrays[name] = arr
        offset += count * dtype.itemsize

    cfg = ArchConfig.from_dict(header["cfg"])
    model = Model(header["kind"], cfg, header["seed"])
    if header["vectorizer"]:
        model.vectorizer = L.Vectorizer.from_dict(header["vectorizer"])

    params = model.params()
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        p.data = arrays[name]
    model.load_buffers({k[len("buffer:"):]: v for k, v in arrays.items()
                        if k.startswith("buffer:")})

    opt_state = None
    if header["opt"] is not None:
        opt_state = {"t": header["opt"]["t"], "m": {}, "v": {}}
        for key, arr in arrays.items():
            if key.startswith("opt:"):
                _, slot, name = key.split(":", 2)
                opt_state[slot][name] = arr
    return model, opt_state, header["extra"]

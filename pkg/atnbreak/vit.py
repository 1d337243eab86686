#!/usr/bin/env python3
"""
Desk-scale Vision Transformer for atnbreak

Pre-LN blocks (LN -> attention -> residual, LN -> MLP -> residual), a CLS
token prepended to the patch tokens, learned positional embeddings and a
final LayerNorm. The image embedding is the final-LN CLS feature. Every
forward pass can return the full attention stack as differentiable arrays,
so attention losses need no special casing.

Default toy config: 32x32x1 image, patch 8, d=64, 4 heads, 4 layers, 17 tokens.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import ComputationRecord, DiffArray
from .utils import ConfigError, ShapeError, get_logger

logger = get_logger(__name__)

INIT_STD = 0.02
TRUNCATION = 2.0  # in units of INIT_STD
HEAD_PREFIX = "head."


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 4
    mlp_ratio: int = 4
    num_classes: Optional[int] = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim",
                     "num_heads", "num_layers", "mlp_ratio"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"model.image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"model.embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes is not None and (
            not isinstance(self.num_classes, int) or self.num_classes < 1
        ):
            raise ConfigError("model.num_classes must be a positive integer or null")
        if self.ln_eps <= 0:
            raise ConfigError(f"model.ln_eps must be > 0, got {self.ln_eps}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def mlp_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    @property
    def dense_classes(self) -> Optional[int]:
        """Background plus one class per shape"""
        return None if self.num_classes is None else self.num_classes + 1

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping, prefix: str = "model") -> "ViTConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown config key: {prefix}.{key}")
        return cls(**dict(data))


def resolve_layer(target: Union[str, int], num_layers: int) -> int:
    """1-based layer (or "last") -> 0-based index"""
    if isinstance(target, str):
        if target.strip().lower() == "last":
            return num_layers - 1
        try:
            target = int(target)
        except ValueError:
            raise ConfigError(f"Layer must be 'last' or an integer, got {target!r}")
    if not 1 <= int(target) <= num_layers:
        raise ConfigError(f"Layer {target} outside [1, {num_layers}]")
    return int(target) - 1


def parameter_shapes(cfg: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered inventory of every parameter tensor"""
    d = cfg.embed_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.num_tokens, d),
    }
    for i in range(cfg.num_layers):
        p = f"blocks.{i}"
        shapes[f"{p}.norm1.gain"] = (d,)
        shapes[f"{p}.norm1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.norm2.gain"] = (d,)
        shapes[f"{p}.norm2.bias"] = (d,)
        shapes[f"{p}.mlp.fc1.weight"] = (d, cfg.mlp_dim)
        shapes[f"{p}.mlp.fc1.bias"] = (cfg.mlp_dim,)
        shapes[f"{p}.mlp.fc2.weight"] = (cfg.mlp_dim, d)
        shapes[f"{p}.mlp.fc2.bias"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    if cfg.num_classes is not None:
        shapes["head.classifier.weight"] = (d, cfg.num_classes)
        shapes["head.classifier.bias"] = (cfg.num_classes,)
        shapes["head.dense.weight"] = (d, cfg.dense_classes)
        shapes["head.dense.bias"] = (cfg.dense_classes,)
    return shapes


def parameter_group(name: str) -> str:
    """blocks.0.attn.q.weight -> blocks.0.attn.q; head.dense.bias -> head"""
    if name.startswith(HEAD_PREFIX):
        return "head"
    if name in ("cls_token", "pos_embed"):
        return name
    return name.rsplit(".", 1)[0]


class ViTParams:
    """Immutable named parameter tensors of one model"""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        frozen = {}
        for name, value in tensors.items():
            arr = np.array(value, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"Parameter {name} contains non-finite values")
            arr.setflags(write=False)
            frozen[name] = arr
        self._tensors = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def groups(self) -> List[str]:
        seen: List[str] = []
        for name in self._tensors:
            group = parameter_group(name)
            if group not in seen:
                seen.append(group)
        return seen

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ViTParams":
        merged = dict(self._tensors)
        for name, value in updates.items():
            if name not in merged:
                raise KeyError(f"Unknown parameter {name}")
            merged[name] = value
        return ViTParams(merged)

    def constants(self) -> Dict[str, DiffArray]:
        return {name: DiffArray(value) for name, value in self._tensors.items()}

    def bind(self, record: ComputationRecord, names=None) -> Dict[str, DiffArray]:
        """Watch the selected parameters on a record; the rest stay constant"""
        selected = set(self._tensors) if names is None else set(names)
        bound = {}
        for name, value in self._tensors.items():
            bound[name] = record.watch(value, name) if name in selected else DiffArray(value)
        return bound

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self._tensors):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self._tensors[name]).astype("<f8").tobytes())
        return digest.hexdigest()

    def validate(self, cfg: ViTConfig) -> None:
        expected = parameter_shapes(cfg)
        missing = [n for n in expected if n not in self._tensors]
        extra = [n for n in self._tensors if n not in expected]
        if missing or extra:
            raise ShapeError(f"Parameter inventory mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self._tensors[name].shape != shape:
                raise ShapeError(
                    f"Parameter {name} has shape {self._tensors[name].shape}, expected {shape}"
                )


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    limit = TRUNCATION * std
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > limit
    return out


def init_params(cfg: ViTConfig, seed: int) -> ViTParams:
    """
    Reproducible initialisation

    Weights: truncated normal (std 0.02, cut at +-2 std); biases, CLS token and
    positional embeddings: zeros; LayerNorm gains: ones.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".weight"):
            tensors[name] = _truncated_normal(rng, shape, INIT_STD)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    logger.debug(f"Initialised {len(tensors)} parameter tensors with seed {seed}")
    return ViTParams(tensors)


class AttentionStack:
    """Attention of every layer of one forward pass, [N_h, N_t, N_t] per layer"""

    def __init__(self, layers: List[DiffArray]):
        self._layers = list(layers)

    def __len__(self) -> int:
        return len(self._layers)

    def __getitem__(self, layer: int) -> DiffArray:
        """0-based layer index (negative counts from the end)"""
        return self._layers[layer]

    def values(self, layer: int) -> np.ndarray:
        return self._layers[layer].values

    def last(self) -> DiffArray:
        return self._layers[-1]


@dataclass
class ForwardOutput:
    embedding: DiffArray
    token_features: DiffArray
    attention: Optional[AttentionStack] = None
    logits: Optional[DiffArray] = None
    dense_logits: Optional[DiffArray] = None


def patchify(image, cfg: ViTConfig) -> DiffArray:
    """
    [C, H, W] -> [(H/p)^2, C p^2] (or batched [B, C, H, W] -> [B, P, C p^2])

    Patches row-major over the grid, each flattened channel-major then
    row-major within the patch.
    """
    x = T.as_diff(image)
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ShapeError(f"Image must be [C, H, W] or [B, C, H, W], got {x.shape}")
    c, h, w = x.shape[-3:]
    p = cfg.patch_size
    if h % p or w % p:
        raise ShapeError(f"Image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    b = x.shape[0] if batched else 1
    x = T.reshape(x, (b, c, gh, p, gw, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, gh * gw, c * p * p))
    return x if batched else T.reshape(x, (gh * gw, c * p * p))


def attention_forward(
    x: DiffArray, params: Mapping[str, DiffArray], layer: int, cfg: ViTConfig
) -> Tuple[DiffArray, DiffArray]:
    """
    Multi-head self-attention of one block

    Args:
        x: Normalised tokens [B, N_t, d]
        params: Bound parameters
        layer: 0-based block index
        cfg: Model config

    Returns:
        Tuple of (projected output [B, N_t, d], attention [B, N_h, N_t, N_t])
    """
    b, n, d = x.shape
    if d != cfg.embed_dim:
        raise ShapeError(f"Token width {d} does not match embed_dim {cfg.embed_dim}")
    h, dk = cfg.num_heads, cfg.head_dim
    pre = f"blocks.{layer}.attn"

    def heads(proj: str) -> DiffArray:
        y = T.linear(x, params[f"{pre}.{proj}.weight"], params[f"{pre}.{proj}.bias"])
        return T.transpose(T.reshape(y, (b, n, h, dk)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = T.softmax_rows(logits)
    mixed = T.matmul(attn, v)
    mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
    out = T.linear(mixed, params[f"{pre}.o.weight"], params[f"{pre}.o.bias"])
    return out, attn


def _mlp(x: DiffArray, params: Mapping[str, DiffArray], layer: int) -> DiffArray:
    pre = f"blocks.{layer}.mlp"
    hidden = T.gelu(T.linear(x, params[f"{pre}.fc1.weight"], params[f"{pre}.fc1.bias"]))
    return T.linear(hidden, params[f"{pre}.fc2.weight"], params[f"{pre}.fc2.bias"])


def _as_bound(params) -> Mapping[str, DiffArray]:
    if isinstance(params, ViTParams):
        return params.constants()
    return params


def forward(
    image,
    params: Union[ViTParams, Mapping[str, DiffArray]],
    cfg: ViTConfig,
    want_attention: bool = True,
) -> ForwardOutput:
    """
    Full forward pass

    Args:
        image: [C, H, W] or [B, C, H, W] pixels in [0, 1] (ndarray or DiffArray)
        params: ViTParams (constants) or bound DiffArrays
        cfg: Model config
        want_attention: Return the attention stack

    Returns:
        ForwardOutput; the batch axis is dropped for a single image
    """
    x_img = T.as_diff(image)
    if x_img.shape[-3:] != cfg.image_shape:
        raise ShapeError(f"Image shape {x_img.shape} does not match config {cfg.image_shape}")
    single = x_img.ndim == 3
    p = _as_bound(params)

    tokens = patchify(x_img if not single else T.reshape(x_img, (1,) + cfg.image_shape), cfg)
    b = tokens.shape[0]
    d = cfg.embed_dim

    x = T.linear(tokens, p["patch_embed.weight"], p["patch_embed.bias"])
    cls = T.broadcast_leading(T.reshape(p["cls_token"], (1, d)), (b,))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, T.broadcast_leading(p["pos_embed"], (b,)))

    attention: List[DiffArray] = []
    for i in range(cfg.num_layers):
        normed = T.layer_norm(x, p[f"blocks.{i}.norm1.gain"], p[f"blocks.{i}.norm1.bias"], cfg.ln_eps)
        attn_out, attn = attention_forward(normed, p, i, cfg)
        x = T.add(x, attn_out)
        normed = T.layer_norm(x, p[f"blocks.{i}.norm2.gain"], p[f"blocks.{i}.norm2.bias"], cfg.ln_eps)
        x = T.add(x, _mlp(normed, p, i))
        attention.append(attn)

    features = T.layer_norm(x, p["final_norm.gain"], p["final_norm.bias"], cfg.ln_eps)
    embedding = T.index(features, (slice(None), 0))

    logits = dense_logits = None
    if "head.classifier.weight" in p:
        logits = T.linear(embedding, p["head.classifier.weight"], p["head.classifier.bias"])
        patch_features = T.index(features, (slice(None), slice(1, None)))
        dense_logits = T.linear(patch_features, p["head.dense.weight"], p["head.dense.bias"])

    if single:
        embedding = T.index(embedding, 0)
        features = T.index(features, 0)
        attention = [T.index(a, 0) for a in attention]
        if logits is not None:
            logits = T.index(logits, 0)
            dense_logits = T.index(dense_logits, 0)

    return ForwardOutput(
        embedding=embedding,
        token_features=features,
        attention=AttentionStack(attention) if want_attention else None,
        logits=logits,
        dense_logits=dense_logits,
    )


@dataclass
class ViTModel:
    """Configuration plus frozen parameters"""

    config: ViTConfig
    params: ViTParams

    def __post_init__(self):
        self.params.validate(self.config)

    @classmethod
    def initialise(cls, cfg: ViTConfig, seed: int) -> "ViTModel":
        return cls(cfg, init_params(cfg, seed))

    @property
    def has_heads(self) -> bool:
        return "head.classifier.weight" in self.params

    def forward(self, image, want_attention: bool = True) -> ForwardOutput:
        return forward(image, self.params, self.config, want_attention)

    def run_batched(self, images: np.ndarray, batch_size: int = 128) -> Dict[str, np.ndarray]:
        """Untracked forward over many images; returns stacked numpy outputs"""
        images = np.asarray(images, dtype=np.float64)
        bound = self.params.constants()
        chunks: Dict[str, List[np.ndarray]] = {"embedding": [], "logits": [], "dense_logits": []}
        for start in range(0, len(images), batch_size):
            out = forward(images[start:start + batch_size], bound, self.config, want_attention=False)
            chunks["embedding"].append(out.embedding.values)
            if out.logits is not None:
                chunks["logits"].append(out.logits.values)
                chunks["dense_logits"].append(out.dense_logits.values)
        return {key: np.concatenate(val) for key, val in chunks.items() if val}

    def embed(self, images: np.ndarray) -> np.ndarray:
        return self.run_batched(images)["embedding"]

    def predict(self, images: np.ndarray) -> np.ndarray:
        if not self.has_heads:
            raise ShapeError("Model has no classifier head")
        return self.run_batched(images)["logits"].argmax(axis=-1)

    def predict_dense(self, images: np.ndarray) -> np.ndarray:
        if not self.has_heads:
            raise ShapeError("Model has no dense head")
        return self.run_batched(images)["dense_logits"].argmax(axis=-1)

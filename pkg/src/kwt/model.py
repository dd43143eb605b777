"""The Keyword Transformer: patch tokens, class/distillation embeddings,
multi-head self-attention encoder with PostNorm or PreNorm blocks, and
linear heads. Includes parameter accounting and a binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, InputError
from .frontend import Spectrogram
from .tensor import Tensor

CHECKPOINT_MAGIC = b"KWTCKPT1"

POSTNORM = "postnorm"
PRENORM = "prenorm"


@dataclass
class KWTConfig:
    dim: int = 64
    mlp_dim: int = 256
    heads: int = 1
    layers: int = 12
    patch_time: int = 1
    patch_freq: int = 40
    num_classes: int = 12
    norm_mode: str = POSTNORM
    use_distill_token: bool = False
    input_t: int = 98
    input_f: int = 40

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.norm_mode not in (POSTNORM, PRENORM):
            raise ConfigurationError(f"unknown norm mode: {self.norm_mode}")
        if self.input_t % self.patch_time != 0 or self.input_f % self.patch_freq != 0:
            raise ConfigurationError(
                f"patch ({self.patch_time},{self.patch_freq}) does not divide "
                f"input ({self.input_t},{self.input_f})"
            )

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def patch_dim(self):
        return self.patch_time * self.patch_freq

    @property
    def n_patches(self):
        return (self.input_t // self.patch_time) * (self.input_f // self.patch_freq)

    @property
    def n_special_tokens(self):
        return 2 if self.use_distill_token else 1

    @property
    def n_tokens(self):
        return self.n_patches + self.n_special_tokens


# Presets from the three published sizes; "micro" is a desk-scale config for
# tests and smoke runs.
PRESETS = {
    "kwt1": dict(dim=64, mlp_dim=256, heads=1, layers=12),
    "kwt2": dict(dim=128, mlp_dim=512, heads=2, layers=12),
    "kwt3": dict(dim=192, mlp_dim=768, heads=3, layers=12),
    "micro": dict(dim=32, mlp_dim=64, heads=2, layers=2),
}


def make_config(preset: str, **overrides) -> KWTConfig:
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown model preset: {preset}")
    kwargs = dict(PRESETS[preset])
    kwargs.update(overrides)
    return KWTConfig(**kwargs)


@dataclass
class AttentionRecord:
    layer: int
    attention: np.ndarray  # (heads, N_tok, N_tok), rows sum to 1


def truncated_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled until within 2 std (ViT-style init)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(bad.sum())
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class KWTModel:
    """Holds the parameter dict and implements the forward pass."""

    def __init__(self, cfg: KWTConfig, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        p = {}

        def weight(name, shape):
            p[name] = Tensor(truncated_normal(rng, shape, dtype=dtype), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        d, dh, k = cfg.dim, cfg.head_dim, cfg.heads
        weight("embed.w", (cfg.patch_dim, d))
        zeros("embed.b", (d,))
        weight("token.class", (1, d))
        if cfg.use_distill_token:
            weight("token.distill", (1, d))
        weight("pos", (cfg.n_tokens, d))
        for l in range(cfg.layers):
            pre = f"block{l}."
            weight(pre + "wq", (d, k * dh))
            zeros(pre + "bq", (k * dh,))
            weight(pre + "wk", (d, k * dh))
            zeros(pre + "bk", (k * dh,))
            weight(pre + "wv", (d, k * dh))
            zeros(pre + "bv", (k * dh,))
            weight(pre + "wp", (k * dh, d))
            zeros(pre + "bp", (d,))
            ones(pre + "ln1.g", (d,))
            zeros(pre + "ln1.b", (d,))
            weight(pre + "mlp.w1", (d, cfg.mlp_dim))
            zeros(pre + "mlp.b1", (cfg.mlp_dim,))
            weight(pre + "mlp.w2", (cfg.mlp_dim, d))
            zeros(pre + "mlp.b2", (d,))
            ones(pre + "ln2.g", (d,))
            zeros(pre + "ln2.b", (d,))
        weight("head.w", (d, cfg.num_classes))
        zeros("head.b", (cfg.num_classes,))
        if cfg.use_distill_token:
            weight("head_distill.w", (d, cfg.num_classes))
            zeros("head_distill.b", (cfg.num_classes,))
        self.params = p

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_parameters(self):
        return sum(t.data.size for t in self.params.values())

    # -- forward -----------------------------------------------------------

    def embed(self, patches: Tensor) -> Tensor:
        """[class; (distill;) patches @ W0 + b] + positional embedding."""
        B = patches.shape[0]
        d = self.cfg.dim
        projected = patches @ self.params["embed.w"] + self.params["embed.b"]
        zeros = Tensor(np.zeros((B, 1, d), dtype=projected.dtype))
        specials = [zeros + self.params["token.class"]]
        if self.cfg.use_distill_token:
            specials.append(zeros + self.params["token.distill"])
        x = T.concat(specials + [projected], axis=1)
        return x + self.params["pos"]

    def attention(self, x: Tensor, layer: int, records=None) -> Tensor:
        cfg = self.cfg
        B, n, _ = x.shape
        k, dh = cfg.heads, cfg.head_dim
        pre = f"block{layer}."

        def split_heads(t):
            return t.reshape(B, n, k, dh).transpose(0, 2, 1, 3)

        q = split_heads(x @ self.params[pre + "wq"] + self.params[pre + "bq"])
        key = split_heads(x @ self.params[pre + "wk"] + self.params[pre + "bk"])
        v = split_heads(x @ self.params[pre + "wv"] + self.params[pre + "bv"])
        scores = (q @ T.swapaxes(key, -1, -2)) * (1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        if records is not None:
            records.append(AttentionRecord(layer=layer, attention=attn.data[0].copy()))
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n, k * dh)
        return out @ self.params[pre + "wp"] + self.params[pre + "bp"]

    def mlp(self, x: Tensor, layer: int) -> Tensor:
        pre = f"block{layer}."
        h = T.gelu(x @ self.params[pre + "mlp.w1"] + self.params[pre + "mlp.b1"])
        return h @ self.params[pre + "mlp.w2"] + self.params[pre + "mlp.b2"]

    def _ln(self, x, layer, which):
        pre = f"block{layer}.{which}."
        return T.layer_norm(x, self.params[pre + "g"], self.params[pre + "b"])

    def encoder_block(self, x: Tensor, layer: int, records=None) -> Tensor:
        if self.cfg.norm_mode == POSTNORM:
            h = self._ln(self.attention(x, layer, records) + x, layer, "ln1")
            return self._ln(self.mlp(h, layer) + h, layer, "ln2")
        h = x + self.attention(self._ln(x, layer, "ln1"), layer, records)
        return h + self.mlp(self._ln(h, layer, "ln2"), layer)

    def forward_tokens(self, patches: Tensor, collect_attention=False):
        """Full encoder pass from patch tokens.

        Returns (class_logits, distill_logits_or_None, attention_records).
        """
        records = [] if collect_attention else None
        x = self.embed(patches)
        for l in range(self.cfg.layers):
            x = self.encoder_block(x, l, records)
        class_logits = x[:, 0, :] @ self.params["head.w"] + self.params["head.b"]
        distill_logits = None
        if self.cfg.use_distill_token:
            distill_logits = x[:, 1, :] @ self.params["head_distill.w"] + self.params["head_distill.b"]
        return class_logits, distill_logits, records or []

    def forward(self, spec: Spectrogram, collect_attention=False):
        if spec.values.shape != (self.cfg.input_t, self.cfg.input_f):
            raise InputError(
                f"spectrogram {spec.values.shape} does not match model input "
                f"({self.cfg.input_t}, {self.cfg.input_f})"
            )
        patches = extract_patches(spec, self.cfg.patch_time, self.cfg.patch_freq)
        batch = Tensor(patches.data[None, :, :])
        return self.forward_tokens(batch, collect_attention)


# -- patches ----------------------------------------------------------------

def patch_array(values: np.ndarray, t_p: int, f_p: int) -> np.ndarray:
    """(T, F) -> (N, t_p * f_p), non-overlapping patches, time-major order."""
    Tn, F = values.shape
    if t_p > Tn or f_p > F:
        raise ConfigurationError(f"patch ({t_p},{f_p}) larger than spectrogram ({Tn},{F})")
    if Tn % t_p != 0 or F % f_p != 0:
        raise ConfigurationError(f"patch ({t_p},{f_p}) does not divide ({Tn},{F})")
    blocks = values.reshape(Tn // t_p, t_p, F // f_p, f_p)
    return blocks.transpose(0, 2, 1, 3).reshape((Tn // t_p) * (F // f_p), t_p * f_p)


def unpatch_array(patches: np.ndarray, t_p: int, f_p: int, Tn: int, F: int) -> np.ndarray:
    """Inverse of patch_array; bit-exact round trip."""
    blocks = patches.reshape(Tn // t_p, F // f_p, t_p, f_p)
    return blocks.transpose(0, 2, 1, 3).reshape(Tn, F)


def extract_patches(s: Spectrogram, t_p: int, f_p: int) -> Tensor:
    return Tensor(patch_array(s.values, t_p, f_p))


# -- parameter accounting ---------------------------------------------------

def count_parameters(cfg: KWTConfig) -> int:
    """Exact learnable-scalar count for the instantiated architecture."""
    d, k, dh = cfg.dim, cfg.heads, cfg.head_dim
    n = cfg.patch_dim * d + d  # patch embedding
    n += d  # class token
    if cfg.use_distill_token:
        n += d
    n += cfg.n_tokens * d  # positional embedding
    per_layer = (
        3 * (d * k * dh + k * dh)  # q, k, v
        + k * dh * d + d  # output projection
        + 2 * 2 * d  # two layer norms
        + d * cfg.mlp_dim + cfg.mlp_dim
        + cfg.mlp_dim * d + d
    )
    n += cfg.layers * per_layer
    n += d * cfg.num_classes + cfg.num_classes  # head
    if cfg.use_distill_token:
        n += d * cfg.num_classes + cfg.num_classes
    return n


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model: KWTModel, extra=None):
    """Flat binary container: magic, JSON header (config + tensor index),
    then raw row-major tensor data. Round-trips bit-exactly."""
    index = []
    offset = 0
    blobs = []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": asdict(model.cfg),
        "tensors": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Returns (model, extra)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a KWT checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        body = f.read()
    cfg = KWTConfig(**header["config"])
    model = KWTModel(cfg, seed=0)
    for entry in header["tensors"]:
        if entry["name"] not in model.params:
            raise ConfigurationError(f"checkpoint tensor '{entry['name']}' not in model")
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=start).reshape(shape)
        model.params[entry["name"]].data = arr.copy()
    return model, header.get("extra", {})

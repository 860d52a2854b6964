"""Weight-shared ViT encoder and cross-attention decoder.

The encoder processes every view (target or anchor) with the same weights.
The decoder rebuilds the full target sequence from visible-token outputs
plus a learned mask token, self-attends over that sequence, and
cross-attends to the concatenated anchor tokens. Each decoder layer carries
a feed-forward after both attention sublayers; backing out per-token and
fixed costs from the reference compute table identifies that structure, and
a single feed-forward cannot reproduce those totals (see flops module).

All forwards accept either a single sequence (tokens x dim) or a stacked
batch (batch x tokens x dim); batches share one mask-plan cardinality so
gathers stay rectangular.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, FileFormatError, ShapeError
from .fileio import load_tensor, save_tensor
from .patches import MaskPlan, batched_gather, patchify, restore_map
from .posembed import sincos_2d


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    enc_dim: int = 384
    enc_depth: int = 12
    enc_heads: int = 6
    dec_dim: int = 256
    dec_depth: int = 4
    dec_heads: int = 8
    mlp_ratio: int = 4
    num_anchors: int = 1
    target_mask_ratio: float = 0.9
    anchor_mask_ratio: float = 0.0
    norm_pix: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ContractError("embedding dims must be divisible by head counts")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


PRESETS = {
    "vit-s16": ModelConfig(),
    "vit-s8": ModelConfig(patch_size=8),
    "tiny": ModelConfig(
        image_size=16, patch_size=4, enc_dim=16, enc_depth=2, enc_heads=2,
        dec_dim=16, dec_depth=2, dec_heads=2,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


class ModelParams:
    """Named parameter tensors plus the fixed positional tables."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.enc_pos = Tensor(sincos_2d(config.enc_dim, config.grid, config.grid))
        self.dec_pos = Tensor(sincos_2d(config.dec_dim, config.grid, config.grid))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def replace_tensors(self, tensors: dict[str, Tensor]) -> "ModelParams":
        out = ModelParams.__new__(ModelParams)
        out.config = self.config
        out.tensors = tensors
        out.enc_pos = self.enc_pos
        out.dec_pos = self.dec_pos
        return out


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    # resample outside +-2 std, like standard ViT init
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Truncated-normal weights (std 0.02), zero biases, unit norm scales."""
    t: dict[str, Tensor] = {}

    def weight(name, shape):
        t[name] = Tensor(_trunc_normal(rng, shape), requires_grad=True)

    def zeros(name, shape):
        t[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(name, shape):
        t[name] = Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    d, dd = config.enc_dim, config.dec_dim
    hidden, dhidden = d * config.mlp_ratio, dd * config.mlp_ratio

    weight("patch_embed.w", (config.patch_dim, d))
    zeros("patch_embed.b", (d,))
    weight("cls_token", (1, d))
    for i in range(config.enc_depth):
        ones(f"enc.{i}.norm1.g", (d,)); zeros(f"enc.{i}.norm1.b", (d,))
        weight(f"enc.{i}.attn.qkv.w", (d, 3 * d)); zeros(f"enc.{i}.attn.qkv.b", (3 * d,))
        weight(f"enc.{i}.attn.proj.w", (d, d)); zeros(f"enc.{i}.attn.proj.b", (d,))
        ones(f"enc.{i}.norm2.g", (d,)); zeros(f"enc.{i}.norm2.b", (d,))
        weight(f"enc.{i}.mlp.fc1.w", (d, hidden)); zeros(f"enc.{i}.mlp.fc1.b", (hidden,))
        weight(f"enc.{i}.mlp.fc2.w", (hidden, d)); zeros(f"enc.{i}.mlp.fc2.b", (d,))
    ones("enc.norm.g", (d,)); zeros("enc.norm.b", (d,))

    weight("dec_embed.w", (d, dd))
    zeros("dec_embed.b", (dd,))
    weight("mask_token", (1, dd))
    for i in range(config.dec_depth):
        ones(f"dec.{i}.norm1.g", (dd,)); zeros(f"dec.{i}.norm1.b", (dd,))
        weight(f"dec.{i}.self.qkv.w", (dd, 3 * dd)); zeros(f"dec.{i}.self.qkv.b", (3 * dd,))
        weight(f"dec.{i}.self.proj.w", (dd, dd)); zeros(f"dec.{i}.self.proj.b", (dd,))
        ones(f"dec.{i}.norm2.g", (dd,)); zeros(f"dec.{i}.norm2.b", (dd,))
        weight(f"dec.{i}.mlp1.fc1.w", (dd, dhidden)); zeros(f"dec.{i}.mlp1.fc1.b", (dhidden,))
        weight(f"dec.{i}.mlp1.fc2.w", (dhidden, dd)); zeros(f"dec.{i}.mlp1.fc2.b", (dd,))
        ones(f"dec.{i}.norm3.g", (dd,)); zeros(f"dec.{i}.norm3.b", (dd,))
        weight(f"dec.{i}.cross.q.w", (dd, dd)); zeros(f"dec.{i}.cross.q.b", (dd,))
        weight(f"dec.{i}.cross.kv.w", (dd, 2 * dd)); zeros(f"dec.{i}.cross.kv.b", (2 * dd,))
        weight(f"dec.{i}.cross.proj.w", (dd, dd)); zeros(f"dec.{i}.cross.proj.b", (dd,))
        ones(f"dec.{i}.norm4.g", (dd,)); zeros(f"dec.{i}.norm4.b", (dd,))
        weight(f"dec.{i}.mlp2.fc1.w", (dd, dhidden)); zeros(f"dec.{i}.mlp2.fc1.b", (dhidden,))
        weight(f"dec.{i}.mlp2.fc2.w", (dhidden, dd)); zeros(f"dec.{i}.mlp2.fc2.b", (dd,))
    ones("dec.norm.g", (dd,)); zeros("dec.norm.b", (dd,))
    weight("head.w", (dd, config.patch_dim))
    zeros("head.b", (config.patch_dim,))

    return ModelParams(config, t)


# ---------------------------------------------------------------------------
# forward building blocks


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, d) -> (..., heads, n, d/heads)
    *lead, n, d = x.shape
    hd = d // heads
    x = ad.reshape(x, (*lead, n, heads, hd))
    perm = list(range(x.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return ad.transpose(x, perm)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., heads, n, hd) -> (..., n, heads*hd)
    perm = list(range(x.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    x = ad.transpose(x, perm)
    *lead, n, h, hd = x.shape
    return ad.reshape(x, (*lead, n, h * hd))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    hd = qh.shape[-1]
    kt_perm = list(range(kh.ndim))
    kt_perm[-1], kt_perm[-2] = kt_perm[-2], kt_perm[-1]
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, kt_perm)), 1.0 / np.sqrt(hd))
    weights = ad.softmax(scores, axis=-1)
    return _merge_heads(ad.matmul(weights, vh))


def _self_attention(params, prefix: str, x: Tensor, heads: int) -> Tensor:
    d = x.shape[-1]
    qkv = _linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    q = ad.narrow(qkv, qkv.ndim - 1, 0, d)
    k = ad.narrow(qkv, qkv.ndim - 1, d, d)
    v = ad.narrow(qkv, qkv.ndim - 1, 2 * d, d)
    out = _attend(q, k, v, heads)
    return _linear(out, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def _cross_attention(params, prefix: str, x: Tensor, memory: Tensor, heads: int) -> Tensor:
    d = x.shape[-1]
    q = _linear(x, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"])
    kv = _linear(memory, params[f"{prefix}.kv.w"], params[f"{prefix}.kv.b"])
    k = ad.narrow(kv, kv.ndim - 1, 0, d)
    v = ad.narrow(kv, kv.ndim - 1, d, d)
    out = _attend(q, k, v, heads)
    return _linear(out, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def _mlp(params, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(_linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return _linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def _norm(params, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _prepend_cls(params, x: Tensor) -> Tensor:
    cls = params["cls_token"]
    if x.ndim == 3:
        anchor = Tensor(np.zeros((x.shape[0], 1, cls.shape[-1]), dtype=np.float32))
        cls = ad.add(cls, anchor)
        return ad.concat([cls, x], axis=1)
    return ad.concat([cls, x], axis=0)


def encode(params: ModelParams, visible_tokens: Tensor, visible_positions: np.ndarray) -> Tensor:
    """Encoder forward over visible patch tokens.

    visible_tokens: (n_vis, patch_dim) or (B, n_vis, patch_dim) raw pixels.
    visible_positions: matching (n_vis,) or (B, n_vis) grid indices.
    Returns the class token first, then visible tokens in plan order.
    """
    cfg = params.config
    pos_idx = np.asarray(visible_positions, dtype=np.int64)
    if visible_tokens.shape[-1] != cfg.patch_dim:
        raise ShapeError(
            f"encode: token dim {visible_tokens.shape[-1]} != patch dim {cfg.patch_dim}"
        )
    if pos_idx.shape != visible_tokens.shape[:-1]:
        raise ContractError(
            f"encode: positions shape {pos_idx.shape} does not match tokens {visible_tokens.shape[:-1]}"
        )
    if pos_idx.size and (pos_idx.min() < 0 or pos_idx.max() >= cfg.num_patches):
        raise ContractError("encode: position index out of range")

    x = _linear(visible_tokens, params["patch_embed.w"], params["patch_embed.b"])
    x = ad.add(x, Tensor(params.enc_pos.data[pos_idx + 1]))
    x = _prepend_cls(params, x)
    for i in range(cfg.enc_depth):
        x = ad.add(x, _self_attention(params, f"enc.{i}.attn", _norm(params, f"enc.{i}.norm1", x), cfg.enc_heads))
        x = ad.add(x, _mlp(params, f"enc.{i}.mlp", _norm(params, f"enc.{i}.norm2", x)))
    return _norm(params, "enc.norm", x)


def concat_anchors(anchor_outputs: list[Tensor]) -> Tensor:
    """Join encoder outputs of all anchors along the token axis."""
    if not anchor_outputs:
        raise ContractError("concat_anchors: need at least one anchor")
    dim = anchor_outputs[0].shape[-1]
    for a in anchor_outputs[1:]:
        if a.shape[-1] != dim:
            raise ContractError(f"concat_anchors: dim mismatch {a.shape[-1]} vs {dim}")
    if len(anchor_outputs) == 1:
        return anchor_outputs[0]
    return ad.concat(anchor_outputs, axis=anchor_outputs[0].ndim - 2)


def build_decoder_input(params: ModelParams, enc_out: Tensor, plan: MaskPlan,
                        plans: list[MaskPlan] | None = None) -> Tensor:
    """Project encoder outputs to decoder width, restore the full-length
    sequence with mask tokens at masked positions, and add decoder position
    embeddings (mask tokens receive the embedding of their own location)."""
    cfg = params.config
    x = _linear(enc_out, params["dec_embed.w"], params["dec_embed.b"])
    if x.ndim == 2:
        cls = ad.narrow(x, 0, 0, 1)
        vis = ad.narrow(x, 0, 1, x.shape[0] - 1)
        pool = ad.concat([vis, params["mask_token"]], axis=0)
        full = ad.take(pool, restore_map(plan), axis=0)
        seq = ad.concat([cls, full], axis=0)
        return ad.add(seq, params.dec_pos)
    if plans is None or len(plans) != x.shape[0]:
        raise ContractError("build_decoder_input: batched input needs one plan per sample")
    b = x.shape[0]
    cls = ad.narrow(x, 1, 0, 1)
    vis = ad.narrow(x, 1, 1, x.shape[1] - 1)
    token = ad.add(params["mask_token"], Tensor(np.zeros((b, 1, cfg.dec_dim), dtype=np.float32)))
    pool = ad.concat([vis, token], axis=1)
    maps = np.stack([restore_map(p) for p in plans])
    full = batched_gather(pool, maps)
    seq = ad.concat([cls, full], axis=1)
    return ad.add(seq, params.dec_pos)


def project_anchor_memory(params: ModelParams, anchor_out: Tensor,
                          positions: np.ndarray) -> Tensor:
    """Project one anchor's encoder output to decoder width and bake in its
    decoder position embeddings (class token row uses the zero row)."""
    x = _linear(anchor_out, params["dec_embed.w"], params["dec_embed.b"])
    pos_idx = np.asarray(positions, dtype=np.int64)
    if pos_idx.ndim == 2:
        zeros = np.zeros((pos_idx.shape[0], 1), dtype=np.int64)
        rows = np.concatenate([zeros, pos_idx + 1], axis=1)
    else:
        rows = np.concatenate([[0], pos_idx + 1])
    return ad.add(x, Tensor(params.dec_pos.data[rows]))


def decode(params: ModelParams, restored_seq: Tensor, anchor_memory: Tensor,
           masked_idx: np.ndarray) -> Tensor:
    """Decoder forward; returns pixel predictions at masked positions only.

    restored_seq: output of build_decoder_input, (N+1, dec_dim) or batched.
    anchor_memory: concatenated anchor tokens with positions baked in.
    masked_idx: (n_masked,) or (B, n_masked) grid indices to predict.
    """
    cfg = params.config
    if anchor_memory.shape[-2] == 0:
        raise ContractError("decode: anchor memory is empty; at least one anchor required")
    if anchor_memory.shape[-1] != cfg.dec_dim or restored_seq.shape[-1] != cfg.dec_dim:
        raise ShapeError("decode: inputs must already be projected to decoder width")
    x = restored_seq
    for i in range(cfg.dec_depth):
        x = ad.add(x, _self_attention(params, f"dec.{i}.self", _norm(params, f"dec.{i}.norm1", x), cfg.dec_heads))
        x = ad.add(x, _mlp(params, f"dec.{i}.mlp1", _norm(params, f"dec.{i}.norm2", x)))
        x = ad.add(x, _cross_attention(params, f"dec.{i}.cross", _norm(params, f"dec.{i}.norm3", x),
                                       anchor_memory, cfg.dec_heads))
        x = ad.add(x, _mlp(params, f"dec.{i}.mlp2", _norm(params, f"dec.{i}.norm4", x)))
    x = _norm(params, "dec.norm", x)
    pixels = _linear(x, params["head.w"], params["head.b"])
    idx = np.asarray(masked_idx, dtype=np.int64)
    if pixels.ndim == 2:
        patches = ad.narrow(pixels, 0, 1, pixels.shape[0] - 1)
        return ad.take(patches, idx, axis=0)
    patches = ad.narrow(pixels, 1, 1, pixels.shape[1] - 1)
    return batched_gather(patches, idx)


def extract_features(params: ModelParams, image: Tensor) -> tuple[Tensor, Tensor]:
    """Full-image encoder pass (no masking): (class token, patch tokens)."""
    cfg = params.config
    seq = patchify(image, cfg.patch_size)
    if seq.num_tokens != cfg.num_patches:
        raise ContractError(
            f"extract_features: image yields {seq.num_tokens} patches, model expects {cfg.num_patches}"
        )
    out = encode(params, seq.tokens, np.arange(cfg.num_patches))
    cls = ad.reshape(ad.narrow(out, 0, 0, 1), (cfg.enc_dim,))
    patch_feats = ad.narrow(out, 0, 1, cfg.num_patches)
    return cls, patch_feats


# ---------------------------------------------------------------------------
# checkpoints: one tensor file per parameter plus a plain-text manifest


def save_checkpoint(directory, params: ModelParams, step: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"step = {step}"]
    for key, value in params.config.to_dict().items():
        lines.append(f"config.{key} = {value}")
    for name, tensor in params.named():
        fname = name.replace(".", "_") + ".cdgt"
        save_tensor(directory / fname, tensor)
        shape = "x".join(str(n) for n in tensor.shape)
        lines.append(f"param {name} {fname} {shape}")
    tmp = directory / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(directory / "manifest.txt")


def load_checkpoint(directory) -> tuple[ModelParams, int]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileFormatError(f"{directory}: missing manifest.txt")
    step = 0
    cfg_values: dict[str, str] = {}
    entries: list[tuple[str, str, str]] = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("step"):
            step = int(line.split("=", 1)[1])
        elif line.startswith("config."):
            key, _, value = line.partition("=")
            cfg_values[key.strip()[len("config."):]] = value.strip()
        elif line.startswith("param "):
            _, name, fname, shape = line.split()
            entries.append((name, fname, shape))
        else:
            raise FileFormatError(f"{manifest}: unrecognized line {line!r}")
    defaults = ModelConfig()
    kwargs = {}
    for key, raw in cfg_values.items():
        current = getattr(defaults, key)
        if isinstance(current, bool):
            kwargs[key] = raw == "True"
        elif isinstance(current, int):
            kwargs[key] = int(raw)
        elif isinstance(current, float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    config = ModelConfig(**kwargs)
    tensors = {}
    for name, fname, shape in entries:
        t = load_tensor(directory / fname)
        expect = tuple(int(s) for s in shape.split("x")) if shape else ()
        if t.shape != expect:
            raise FileFormatError(f"{name}: stored shape {t.shape} != manifest {expect}")
        tensors[name] = Tensor(t.data, requires_grad=True)
    return ModelParams(config, tensors), step

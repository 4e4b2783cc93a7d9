"""The model: a grouped conv backbone feeding grouped self-attention.

Every attention group owns a private slice of the convolutional kernels,
organized as an independent tower that reads the full input image.  Each
tower's final feature maps are flattened, one embedding row per kernel,
and the group runs its own attention stack over [CLS; rows].  Group CLS
outputs are averaged and a single linear head produces logits.

Nothing mixes information across groups before the final average, which
is what lets groups live on different workers with only CLS vectors on
the wire.  There are no positional embeddings; the flattened feature
maps carry location structure themselves.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .blocks import ConvBlock, Linear, MHSABlock
from .errors import ConfigError, FormatError, UsageError
from .tensor import (
    Tensor,
    concat,
    extract_patches,
    load_tensor,
    mean0,
    narrow,
    save_tensor,
)

# Published variant ladders: kernel counts double per block, attention
# depth matches the block count pattern, and per-block pool factors are
# chosen so every chain ends on an 8x8 map regardless of input size.
_VARIANT_KERNELS = {
    "c2a2": [64, 128],
    "c3a4": [64, 128, 256],
    "c4a8": [64, 128, 256, 512],
}
_VARIANT_DEPTH = {"c2a2": 2, "c3a4": 4, "c4a8": 8}
_VARIANT_POOLS = {
    ("c2a2", 32): [2, 2],
    ("c2a2", 64): [4, 2],
    ("c2a2", 128): [4, 4],
    ("c3a4", 32): [2, 1, 2],
    ("c3a4", 64): [2, 2, 2],
    ("c3a4", 128): [4, 2, 2],
    ("c4a8", 32): [2, 1, 2, 1],
    ("c4a8", 64): [2, 2, 2, 1],
    ("c4a8", 128): [2, 2, 2, 2],
}

CLS_INIT_STD = 0.02


@dataclass
class ModelConfig:
    input_size: tuple = (32, 32)
    num_classes: int = 10
    in_channels: int = 3
    kernels_per_block: list = field(default_factory=lambda: [64, 128])
    pool_factors: list = field(default_factory=lambda: [2, 2])
    num_attention_groups: int = 16
    embedding_dim: int = 64
    attn_depth: int = 2
    num_heads: int = 4
    ablate_conv: bool = False
    ablate_attn: bool = False
    shared_attention: bool = False
    patch_size: int = 8
    variant: str = "custom"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.kernels_per_block = [int(v) for v in self.kernels_per_block]
        self.pool_factors = [int(v) for v in self.pool_factors]
        self.validate()

    def validate(self) -> None:
        h, w = self.input_size
        if h < 1 or w < 1 or self.in_channels < 1:
            raise ConfigError(f"invalid input geometry {self.in_channels}x{h}x{w}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_attention_groups < 1:
            raise ConfigError(f"need >= 1 attention group, got {self.num_attention_groups}")
        if self.ablate_conv and self.ablate_attn:
            raise ConfigError("ablate_conv and ablate_attn cannot both be set")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if not self.ablate_attn:
            if self.attn_depth < 1:
                raise ConfigError(f"attn_depth must be >= 1, got {self.attn_depth}")
            if self.embedding_dim % self.num_heads:
                raise ConfigError(
                    f"embedding_dim {self.embedding_dim} not divisible by "
                    f"{self.num_heads} heads"
                )
        if self.ablate_conv:
            p = self.patch_size
            if p < 1 or h % p or w % p:
                raise ConfigError(f"input {h}x{w} not divisible into {p}x{p} patches")
            if self.num_embeddings % self.num_attention_groups:
                raise ConfigError(
                    f"patch count {self.num_embeddings} not divisible by "
                    f"{self.num_attention_groups} attention groups"
                )
            return
        if not self.kernels_per_block:
            raise ConfigError("kernels_per_block must not be empty")
        if len(self.pool_factors) != len(self.kernels_per_block):
            raise ConfigError(
                f"{len(self.pool_factors)} pool factors for "
                f"{len(self.kernels_per_block)} conv blocks"
            )
        for k in self.kernels_per_block:
            if k < 1 or k % self.num_attention_groups:
                raise ConfigError(
                    f"kernel count {k} not divisible by "
                    f"{self.num_attention_groups} attention groups"
                )
        extents = self.block_extents()
        fh, fw = extents[-1]
        if fh * fw != self.embedding_dim:
            raise ConfigError(
                f"final map {fh}x{fw} flattens to {fh * fw}, "
                f"not embedding_dim {self.embedding_dim}"
            )

    def block_extents(self) -> list:
        """Spatial extent after each conv block, validating divisibility."""
        h, w = self.input_size
        out = []
        for i, f in enumerate(self.pool_factors):
            if f < 1:
                raise ConfigError(f"pool factor {f} at block {i} must be >= 1")
            if h % f or w % f:
                raise ConfigError(
                    f"extent {h}x{w} entering block {i} not divisible by pool factor {f}"
                )
            h, w = h // f, w // f
            out.append((h, w))
        return out

    @property
    def num_embeddings(self) -> int:
        """Token rows produced by the backbone (M)."""
        if self.ablate_conv:
            h, w = self.input_size
            return (h // self.patch_size) * (w // self.patch_size)
        return self.kernels_per_block[-1]

    @property
    def tokens_per_group(self) -> int:
        return self.num_embeddings // self.num_attention_groups

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


def variant_config(name: str, input_size: int, num_classes: int = 10, **overrides) -> ModelConfig:
    """Config for a published variant (c2a2, c3a4, c4a8) at a square input size."""
    key = name.lower()
    if key not in _VARIANT_KERNELS:
        raise ConfigError(f"unknown variant '{name}', expected one of {sorted(_VARIANT_KERNELS)}")
    pools = _VARIANT_POOLS.get((key, int(input_size)))
    if pools is None:
        sizes = sorted({s for v, s in _VARIANT_POOLS if v == key})
        raise ConfigError(f"variant {name} supports input sizes {sizes}, got {input_size}")
    return ModelConfig(
        input_size=(input_size, input_size),
        num_classes=num_classes,
        kernels_per_block=list(_VARIANT_KERNELS[key]),
        pool_factors=list(pools),
        attn_depth=_VARIANT_DEPTH[key],
        variant=key,
        **overrides,
    )


@dataclass
class AttentionGroup:
    """One group's token rows plus its learnable CLS."""

    index: int
    tokens: Tensor  # [N, d]; N may be 0 for a degenerate CLS-only group
    cls: Tensor  # [1, d]


def partition_groups(embeddings: Tensor, cls_tokens: list) -> list:
    """Split embedding rows into contiguous, disjoint attention groups."""
    if not cls_tokens:
        raise UsageError("partition_groups needs at least one CLS token")
    k_g = len(cls_tokens)
    m = embeddings.shape[0]
    if m % k_g:
        raise ConfigError(f"{m} embeddings cannot split into {k_g} equal attention groups")
    n = m // k_g
    return [
        AttentionGroup(g, narrow(embeddings, 0, g * n, n), cls_tokens[g])
        for g in range(k_g)
    ]


def group_forward(group: AttentionGroup, attn_blocks: list) -> Tensor:
    """Run the attention stack over [CLS; tokens]; return the final CLS row."""
    if group.tokens is not None and group.tokens.shape[0] > 0:
        seq = concat([group.cls, group.tokens], axis=0)
    else:
        seq = group.cls  # degenerate group: CLS attends only to itself
    for block in attn_blocks:
        seq = block.forward(seq)
    return narrow(seq, 0, 0, 1).reshape(seq.shape[1])


def aggregate_predict(cls_outputs: list, head: Linear) -> Tensor:
    """Average CLS vectors over groups (fixed order) and apply the head."""
    if not cls_outputs:
        raise UsageError("aggregate_predict needs at least one CLS vector")
    if len(cls_outputs) == 1:
        pooled = cls_outputs[0]
    else:
        d = cls_outputs[0].shape[0]
        stacked = concat([c.reshape(1, d) for c in cls_outputs], axis=0)
        pooled = mean0(stacked)
    return head(pooled)


class HSViTModel:
    """Grouped conv towers, grouped attention, mean-CLS linear head."""

    def __init__(self, config: ModelConfig, towers, patch_embed, attn_stacks, cls_tokens, head):
        self.config = config
        self.towers = towers  # list[K_g] of list[ConvBlock], or None when ablated
        self.patch_embed = patch_embed  # Linear, only when ablate_conv
        self.attn_stacks = attn_stacks  # list[K_g] of list[MHSABlock]; shared mode aliases one stack
        self.cls_tokens = cls_tokens  # list[K_g] of Tensor [1, d]
        self.head = head

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "HSViTModel":
        rng = np.random.default_rng(seed)
        k_g = config.num_attention_groups
        d = config.embedding_dim

        towers = None
        patch_embed = None
        if config.ablate_conv:
            p = config.patch_size
            patch_embed = Linear.create(rng, config.in_channels * p * p, d)
        else:
            towers = []
            for _ in range(k_g):
                blocks = []
                in_ch = config.in_channels
                for kernels, pool in zip(config.kernels_per_block, config.pool_factors):
                    out_ch = kernels // k_g
                    blocks.append(ConvBlock.create(rng, in_ch, out_ch, pool))
                    in_ch = out_ch
                towers.append(blocks)

        attn_stacks = None
        cls_tokens = None
        if not config.ablate_attn:
            if config.shared_attention:
                stack = [
                    MHSABlock.create(rng, d, config.num_heads)
                    for _ in range(config.attn_depth)
                ]
                attn_stacks = [stack for _ in range(k_g)]
            else:
                attn_stacks = [
                    [
                        MHSABlock.create(rng, d, config.num_heads)
                        for _ in range(config.attn_depth)
                    ]
                    for _ in range(k_g)
                ]
            cls_tokens = [
                Tensor(rng.normal(0.0, CLS_INIT_STD, (1, d)), requires_grad=True)
                for _ in range(k_g)
            ]

        head = Linear.create(rng, d, config.num_classes)
        return cls(config, towers, patch_embed, attn_stacks, cls_tokens, head)

    # -- forward pieces ----------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        expected = (self.config.in_channels,) + self.config.input_size
        if x.shape != expected:
            raise ConfigError(f"input shape {x.shape} does not match configured {expected}")

    def embed_image(self, x: Tensor) -> Tensor:
        """All token rows [M, d]: row i is kernel i's flattened final map."""
        self._check_input(x)
        if self.config.ablate_conv:
            return self.patch_embed(extract_patches(x, self.config.patch_size))
        d = self.config.embedding_dim
        per_group = []
        for blocks in self.towers:
            z = x
            for block in blocks:
                z = block.forward(z)
            per_group.append(z.reshape(z.shape[0], d))
        return per_group[0] if len(per_group) == 1 else concat(per_group, axis=0)

    def embed_group(self, x: Tensor, g: int) -> Tensor:
        """Token rows for one group only; equals rows of embed_image(x)."""
        self._check_input(x)
        if self.config.ablate_conv:
            n = self.config.tokens_per_group
            return narrow(self.embed_image(x), 0, g * n, n)
        z = x
        for block in self.towers[g]:
            z = block.forward(z)
        return z.reshape(z.shape[0], self.config.embedding_dim)

    def partition(self, embeddings: Tensor) -> list:
        return partition_groups(embeddings, self.cls_tokens)

    def forward(self, x: Tensor) -> Tensor:
        embeddings = self.embed_image(x)
        if self.config.ablate_attn:
            return self.head(mean0(embeddings))
        groups = self.partition(embeddings)
        cls_outputs = [
            group_forward(group, self.attn_stacks[group.index]) for group in groups
        ]
        return aggregate_predict(cls_outputs, self.head)

    # -- parameter plumbing --------------------------------------------------

    def named_parameters(self) -> list:
        out = []
        if self.patch_embed is not None:
            out.extend((f"patch.{n}", p) for n, p in self.patch_embed.parameters())
        if self.towers is not None:
            for g, blocks in enumerate(self.towers):
                for b, block in enumerate(blocks):
                    out.extend(
                        (f"group.{g}.conv.{b}.{n}", p) for n, p in block.parameters()
                    )
        if self.attn_stacks is not None:
            if self.config.shared_attention:
                for j, block in enumerate(self.attn_stacks[0]):
                    out.extend((f"attn.{j}.{n}", p) for n, p in block.parameters())
            else:
                for g, stack in enumerate(self.attn_stacks):
                    for j, block in enumerate(stack):
                        out.extend(
                            (f"group.{g}.attn.{j}.{n}", p) for n, p in block.parameters()
                        )
            for g, cls_token in enumerate(self.cls_tokens):
                out.append((f"group.{g}.cls", cls_token))
        out.extend((f"head.{n}", p) for n, p in self.head.parameters())
        return out

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


# ---------------------------------------------------------------------------
# checkpoints: a manifest plus one binary blob per parameter

_MANIFEST = "manifest.json"
_PARAM_DIR = "params"


def save_checkpoint(model: HSViTModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    param_dir = os.path.join(directory, _PARAM_DIR)
    os.makedirs(param_dir, exist_ok=True)
    names = []
    for name, p in model.named_parameters():
        save_tensor(p, os.path.join(param_dir, name + ".bin"))
        names.append(name)
    manifest = {"format": 1, "config": model.config.to_dict(), "parameters": names}
    with open(os.path.join(directory, _MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(directory) -> HSViTModel:
    manifest_path = os.path.join(directory, _MANIFEST)
    if not os.path.isfile(manifest_path):
        raise FormatError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != 1:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    model = HSViTModel.build(config, seed=0)
    expected = [name for name, _ in model.named_parameters()]
    if manifest.get("parameters") != expected:
        raise FormatError("checkpoint parameter list does not match its config")
    for name, p in model.named_parameters():
        blob = load_tensor(os.path.join(directory, _PARAM_DIR, name + ".bin"))
        if blob.shape != p.shape:
            raise FormatError(
                f"checkpoint tensor '{name}' has shape {blob.shape}, expected {p.shape}"
            )
        p.data = blob.data
    return model


def checkpoint_digest(directory) -> str:
    """Stable content hash of a checkpoint, for determinism checks."""
    digest = hashlib.sha256()
    with open(os.path.join(directory, _MANIFEST), "rb") as fh:
        digest.update(fh.read())
    param_dir = os.path.join(directory, _PARAM_DIR)
    for name in sorted(os.listdir(param_dir)):
        digest.update(name.encode())
        with open(os.path.join(param_dir, name), "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()

"""Focus-guided decoder stack on top of the staged backbone.

The last stage map is tokenized by a hybrid embedding (conv patch projection
+ class token + positional encoding). Every stage map additionally passes
through a focus block that pools it down to the last-stage grid along two
parallel paths (max and average), projects each path to the token dimension,
and embeds both with the *same* shared class token and positional encoding.
The resulting (q, k) guidance pair steers the guided-attention sub-block of
one decoder. Decoders run pre-norm with residuals:

    z1 = MHSA(LN(z))  + z
    z2 = FFN(LN(z1))  + z1
    z3 = MHGA(LN(z2), q, k) + z2
    z4 = FFN(LN(z3))  + z3

Token 0 of the final sequence feeds the classification head.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, load_state_arrays, module_state_arrays, save_archive
from .attention import ATTENTION_VARIANTS, build_attention
from .backbone import BackboneConfig, StagedBackbone, full_backbone_config

VARIANT_NAMES = ("MSHT", "Hybrid1", "Hybrid3", "No_CLS_Token", "No_Pos_emb",
                 "No_ATT", "SE_ATT", "CBAM_ATT")

HYBRID1_DEPTH = 8  # plain encoder blocks in the stacked (unguided) variant

CHECKPOINT_FORMAT = "msht-checkpoint"


@dataclass(frozen=True)
class FgdConfig:
    token_dim: int = 768
    heads: int = 12
    patch_size: int = 1
    pool_windows: tuple[int, ...] = (8, 4, 2, 1)
    ffn_hidden: int | None = None       # defaults to 4 * token_dim
    num_classes: int = 2
    attention_variant: str = "simam"
    simam_lambda: float = 1e-4
    use_class_token: bool = True
    use_positional_encoding: bool = True
    stage_count: int = 4
    dropout: float = 0.0
    projection_scaled_attention: bool = False  # scale q/k/v projections by 1/sqrt(D) instead of per-head logit scaling

    def __post_init__(self):
        if self.token_dim % self.heads != 0:
            raise ValueError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.stage_count not in (3, 4):
            raise ValueError(f"stage_count must be 3 or 4, got {self.stage_count}")
        if len(self.pool_windows) != self.stage_count:
            raise ValueError(
                f"pool_windows must have one entry per active stage "
                f"({self.stage_count}), got {len(self.pool_windows)}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant {self.attention_variant!r}; "
                             f"valid: {', '.join(ATTENTION_VARIANTS)}")
        if self.simam_lambda <= 0:
            raise ValueError("simam_lambda must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 4 * self.token_dim


def derive_pool_windows(backbone_config: BackboneConfig, stage_count: int) -> tuple[int, ...]:
    """Windows that pool every active stage down to the last active edge."""
    edges = backbone_config.stage_edge_sizes[:stage_count]
    return tuple(edge // edges[-1] for edge in edges)


def check_config_compat(backbone_config: BackboneConfig, fgd_config: FgdConfig) -> int:
    """Validate the stage/pool/patch geometry; returns the patch count N."""
    edges = backbone_config.stage_edge_sizes[:fgd_config.stage_count]
    last_edge = edges[-1]
    for index, (edge, window) in enumerate(zip(edges, fgd_config.pool_windows)):
        if edge % window != 0 or edge // window != last_edge:
            raise ValueError(
                f"stage {index + 1}: pool window {window} maps edge {edge} to "
                f"{edge // window if edge % window == 0 else edge / window}, expected {last_edge}")
    if last_edge % fgd_config.patch_size != 0:
        raise ValueError(f"last-stage edge {last_edge} not divisible by patch size {fgd_config.patch_size}")
    grid = last_edge // fgd_config.patch_size
    return grid * grid


class GuidancePair(NamedTuple):
    """Guidance token sequences emitted by the focus block of one stage."""

    q: torch.Tensor
    k: torch.Tensor
    stage_index: int


class SharedEmbeddings(nn.Module):
    """The class token and positional encoding shared by every embedding site.

    The class token starts as a zero tensor and carries the classification
    state through the decoder stack; the positional encoding is a learnable
    (N+1) x D table added after concatenation.
    """

    def __init__(self, num_patches: int, token_dim: int,
                 use_class_token: bool = True, use_positional_encoding: bool = True):
        super().__init__()
        self.num_patches = num_patches
        if use_class_token:
            self.class_token = nn.Parameter(torch.zeros(1, 1, token_dim))
        else:
            self.register_parameter("class_token", None)
        if use_positional_encoding:
            pos = torch.empty(1, num_patches + (1 if use_class_token else 0), token_dim)
            nn.init.trunc_normal_(pos, std=0.02)
            self.pos_encoding = nn.Parameter(pos)
        else:
            self.register_parameter("pos_encoding", None)

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.class_token is not None else 0)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        # patches: batch x N x D
        if patches.shape[1] != self.num_patches:
            raise ValueError(f"expected {self.num_patches} patch tokens, got {patches.shape[1]}")
        x = patches
        if self.class_token is not None:
            cls = self.class_token.expand(x.shape[0], -1, -1)
            x = torch.cat((cls, x), dim=1)
        if self.pos_encoding is not None:
            x = x + self.pos_encoding
        return x


class HybridEmbed(nn.Module):
    """Tokenize the last stage map: conv patch projection, flatten/transpose,
    then the shared class-token + positional-encoding embedding."""

    def __init__(self, in_channels: int, edge: int, config: FgdConfig):
        super().__init__()
        if edge % config.patch_size != 0:
            raise ValueError(f"feature edge {edge} not divisible by patch size {config.patch_size}")
        self.edge = edge
        self.grid = edge // config.patch_size
        self.num_patches = self.grid * self.grid
        self.proj = nn.Conv2d(in_channels, config.token_dim,
                              kernel_size=config.patch_size, stride=config.patch_size)

    def forward(self, feature_map: torch.Tensor, shared: SharedEmbeddings) -> torch.Tensor:
        if feature_map.shape[-1] != self.edge or feature_map.shape[-2] != self.edge:
            raise ValueError(f"expected a {self.edge}x{self.edge} map, got "
                             f"{feature_map.shape[-2]}x{feature_map.shape[-1]}")
        x = self.proj(feature_map).flatten(2).transpose(1, 2)  # batch x N x D
        return shared(x)


class FocusBlock(nn.Module):
    """Turn one stage map into a guidance pair.

    attention -> parallel max/avg pooling down to the last-stage grid ->
    two separate conv projections to the token dim -> flatten/transpose ->
    shared embedding on each path. The max path becomes q, the avg path k.
    """

    def __init__(self, in_channels: int, edge: int, pool_window: int, target_edge: int,
                 config: FgdConfig, stage_index: int):
        super().__init__()
        if edge % pool_window != 0 or edge // pool_window != target_edge:
            raise ValueError(f"stage {stage_index}: pool window {pool_window} cannot map "
                             f"edge {edge} onto target edge {target_edge}")
        self.edge = edge
        self.stage_index = stage_index
        self.attention = build_attention(config.attention_variant, in_channels, config.simam_lambda)
        self.max_pool = nn.MaxPool2d(pool_window)
        self.avg_pool = nn.AvgPool2d(pool_window)
        self.q_proj = nn.Conv2d(in_channels, config.token_dim,
                                kernel_size=config.patch_size, stride=config.patch_size)
        self.k_proj = nn.Conv2d(in_channels, config.token_dim,
                                kernel_size=config.patch_size, stride=config.patch_size)

    def forward(self, feature_map: torch.Tensor, shared: SharedEmbeddings) -> GuidancePair:
        if feature_map.shape[-1] != self.edge or feature_map.shape[-2] != self.edge:
            raise ValueError(f"stage {self.stage_index}: expected a {self.edge}x{self.edge} map, got "
                             f"{feature_map.shape[-2]}x{feature_map.shape[-1]}")
        x = self.attention(feature_map)
        q = self.q_proj(self.max_pool(x)).flatten(2).transpose(1, 2)
        k = self.k_proj(self.avg_pool(x)).flatten(2).transpose(1, 2)
        return GuidancePair(shared(q), shared(k), self.stage_index)


def _resolve_scales(dim: int, heads: int, scale_projections: bool) -> tuple[float, float]:
    # (projection scale, logit scale); either q/k/v are each divided by
    # sqrt(D) or the logits by sqrt(per-head dim)
    if scale_projections:
        return dim ** -0.5, 1.0
    return 1.0, (dim // heads) ** -0.5


class MultiHeadSelfAttention(nn.Module):
    """q, k, v all projected from the token stream; per-head softmax rows sum to 1."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0, projection_scaled_attention: bool = False):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.num_heads = heads
        self.head_dim = dim // heads
        self.proj_scale, self.logit_scale = _resolve_scales(dim, heads, projection_scaled_attention)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.proj_drop = nn.Dropout(dropout)

    def forward(self, tokens: torch.Tensor, return_weights: bool = False):
        if not torch.isfinite(tokens).all():
            raise ValueError("self-attention received non-finite input")
        batch, length, dim = tokens.shape
        qkv = (self.qkv(tokens) * self.proj_scale).reshape(
            batch, length, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.logit_scale
        attn = attn.softmax(dim=-1)
        out = (self.attn_drop(attn) @ v).transpose(1, 2).reshape(batch, length, dim)
        out = self.proj_drop(self.proj(out))
        return (out, attn) if return_weights else out


class MultiHeadGuidedAttention(nn.Module):
    """Queries from guidance q, keys from guidance k, values from the stream.

    The three projections are independent learnable matrices; attention math
    matches the self-attention block.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0, projection_scaled_attention: bool = False):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.num_heads = heads
        self.head_dim = dim // heads
        self.proj_scale, self.logit_scale = _resolve_scales(dim, heads, projection_scaled_attention)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.proj_drop = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, stream: torch.Tensor, guidance: GuidancePair, return_weights: bool = False):
        if guidance.q.shape[1] != stream.shape[1] or guidance.k.shape[1] != stream.shape[1]:
            raise ValueError(
                f"guidance length {guidance.q.shape[1]}/{guidance.k.shape[1]} does not match "
                f"stream length {stream.shape[1]}")
        if not torch.isfinite(stream).all():
            raise ValueError("guided attention received non-finite input")
        batch, length, dim = stream.shape
        q = self._split(self.q_proj(guidance.q) * self.proj_scale)
        k = self._split(self.k_proj(guidance.k) * self.proj_scale)
        v = self._split(self.v_proj(stream) * self.proj_scale)
        attn = (q @ k.transpose(-2, -1)) * self.logit_scale
        attn = attn.softmax(dim=-1)
        out = (self.attn_drop(attn) @ v).transpose(1, 2).reshape(batch, length, dim)
        out = self.proj_drop(self.proj(out))
        return (out, attn) if return_weights else out


class FeedForward(nn.Module):
    """Two-layer MLP with GELU between."""

    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(self.act(self.fc1(x)))))


class DecoderBlock(nn.Module):
    """Pre-norm decoder: self-attention, FFN, guided attention, FFN, all residual."""

    def __init__(self, config: FgdConfig):
        super().__init__()
        dim = config.token_dim
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadSelfAttention(dim, config.heads, config.dropout,
                                                config.projection_scaled_attention)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn1 = FeedForward(dim, config.ffn_width, config.dropout)
        self.norm3 = nn.LayerNorm(dim)
        self.guided_attn = MultiHeadGuidedAttention(dim, config.heads, config.dropout,
                                                    config.projection_scaled_attention)
        self.norm4 = nn.LayerNorm(dim)
        self.ffn2 = FeedForward(dim, config.ffn_width, config.dropout)

    def forward(self, tokens: torch.Tensor, guidance: GuidancePair) -> torch.Tensor:
        x = tokens + self.self_attn(self.norm1(tokens))
        x = x + self.ffn1(self.norm2(x))
        x = x + self.guided_attn(self.norm3(x), guidance)
        x = x + self.ffn2(self.norm4(x))
        return x


class EncoderBlock(nn.Module):
    """Pre-norm encoder: self-attention then FFN, both residual."""

    def __init__(self, config: FgdConfig):
        super().__init__()
        dim = config.token_dim
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadSelfAttention(dim, config.heads, config.dropout,
                                                config.projection_scaled_attention)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, config.ffn_width, config.dropout)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens + self.self_attn(self.norm1(tokens))
        x = x + self.ffn(self.norm2(x))
        return x


class MultiStageHybridTransformer(nn.Module):
    """Backbone stages -> focus guidance -> stacked decoders -> class head.

    With a class token, token 0 of the final sequence feeds the head;
    without one, the head consumes the mean over all tokens.
    """

    variant = "MSHT"

    def __init__(self, backbone_config: BackboneConfig | None = None,
                 fgd_config: FgdConfig | None = None):
        super().__init__()
        self.backbone_config = backbone_config or full_backbone_config()
        self.fgd_config = fgd_config or FgdConfig()
        num_patches = check_config_compat(self.backbone_config, self.fgd_config)
        cfg = self.fgd_config
        channels = self.backbone_config.stage_channels
        edges = self.backbone_config.stage_edge_sizes
        last = cfg.stage_count - 1

        self.backbone = StagedBackbone(self.backbone_config)
        self.shared = SharedEmbeddings(num_patches, cfg.token_dim,
                                       cfg.use_class_token, cfg.use_positional_encoding)
        self.hybrid_embed = HybridEmbed(channels[last], edges[last], cfg)
        self.focus_blocks = nn.ModuleList(
            FocusBlock(channels[l], edges[l], cfg.pool_windows[l], edges[last], cfg, stage_index=l + 1)
            for l in range(cfg.stage_count))
        self.decoders = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.stage_count))
        self.norm = nn.LayerNorm(cfg.token_dim)
        self.head = nn.Linear(cfg.token_dim, cfg.num_classes)

    @property
    def num_classes(self) -> int:
        return self.fgd_config.num_classes

    def forward_features(self, images: torch.Tensor) -> torch.Tensor:
        features = self.backbone(images)
        tokens = self.hybrid_embed(features[self.fgd_config.stage_count - 1], self.shared)
        for focus, decoder in zip(self.focus_blocks, self.decoders):
            guidance = focus(features[focus.stage_index - 1], self.shared)
            tokens = decoder(tokens, guidance)
        return self.norm(tokens)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        tokens = self.forward_features(images)
        pooled = tokens[:, 0] if self.fgd_config.use_class_token else tokens.mean(dim=1)
        return self.head(pooled)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        """Per-class confidences; each row sums to 1."""
        return F.softmax(self.forward(images), dim=-1)


class StackedHybridTransformer(nn.Module):
    """Unguided counterpart: hybrid embedding feeding plain encoder blocks."""

    variant = "Hybrid1"

    def __init__(self, backbone_config: BackboneConfig | None = None,
                 fgd_config: FgdConfig | None = None, depth: int = HYBRID1_DEPTH):
        super().__init__()
        self.backbone_config = backbone_config or full_backbone_config()
        self.fgd_config = fgd_config or FgdConfig()
        num_patches = check_config_compat(self.backbone_config, self.fgd_config)
        cfg = self.fgd_config
        last = cfg.stage_count - 1

        self.backbone = StagedBackbone(self.backbone_config)
        self.shared = SharedEmbeddings(num_patches, cfg.token_dim,
                                       cfg.use_class_token, cfg.use_positional_encoding)
        self.hybrid_embed = HybridEmbed(self.backbone_config.stage_channels[last],
                                        self.backbone_config.stage_edge_sizes[last], cfg)
        self.encoders = nn.ModuleList(EncoderBlock(cfg) for _ in range(depth))
        self.norm = nn.LayerNorm(cfg.token_dim)
        self.head = nn.Linear(cfg.token_dim, cfg.num_classes)

    @property
    def num_classes(self) -> int:
        return self.fgd_config.num_classes

    def forward_features(self, images: torch.Tensor) -> torch.Tensor:
        features = self.backbone(images)
        tokens = self.hybrid_embed(features[self.fgd_config.stage_count - 1], self.shared)
        for encoder in self.encoders:
            tokens = encoder(tokens)
        return self.norm(tokens)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        tokens = self.forward_features(images)
        pooled = tokens[:, 0] if self.fgd_config.use_class_token else tokens.mean(dim=1)
        return self.head(pooled)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward(images), dim=-1)


def resolve_variant(name: str) -> str:
    """Map a (case-insensitive) variant name to its canonical spelling."""
    by_lower = {v.lower(): v for v in VARIANT_NAMES}
    canonical = by_lower.get(str(name).lower())
    if canonical is None:
        raise ValueError(f"unknown variant {name!r}; valid variants: {', '.join(VARIANT_NAMES)}")
    return canonical


def build_variant(variant: str, backbone_config: BackboneConfig | None = None,
                  fgd_config: FgdConfig | None = None, init_seed: int = 0) -> nn.Module:
    """Build one of the ablation variants with deterministic seeded init.

    The flagship settings (energy attention, class token, positional encoding,
    4 active stages) are the baseline; each named variant flips exactly the
    switch it is named after.
    """
    canonical = resolve_variant(variant)
    backbone_config = backbone_config or full_backbone_config()
    base = fgd_config or FgdConfig()
    windows4 = base.pool_windows if base.stage_count == 4 else derive_pool_windows(backbone_config, 4)
    base = dataclasses.replace(base, attention_variant="simam", use_class_token=True,
                               use_positional_encoding=True, stage_count=4, pool_windows=windows4)

    overrides = {
        "MSHT": {},
        "Hybrid3": {"stage_count": 3, "pool_windows": derive_pool_windows(backbone_config, 3)},
        "No_CLS_Token": {"use_class_token": False},
        "No_Pos_emb": {"use_positional_encoding": False},
        "No_ATT": {"attention_variant": "none"},
        "SE_ATT": {"attention_variant": "se"},
        "CBAM_ATT": {"attention_variant": "cbam"},
    }

    torch.manual_seed(init_seed)
    if canonical == "Hybrid1":
        model = StackedHybridTransformer(backbone_config, base)
    else:
        model = MultiStageHybridTransformer(backbone_config,
                                            dataclasses.replace(base, **overrides[canonical]))
    model.variant = canonical
    return model


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    params = (p for p in model.parameters() if p.requires_grad or not trainable_only)
    return sum(p.numel() for p in params)


def save_checkpoint(path, model: nn.Module, extra_meta: dict | None = None) -> None:
    """Archive the model state together with its variant tag and configs."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "variant": getattr(model, "variant", "MSHT"),
        "backbone_config": dataclasses.asdict(model.backbone_config),
        "fgd_config": dataclasses.asdict(model.fgd_config),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_archive(path, module_state_arrays(model), meta)


def _configs_from_meta(meta: dict) -> tuple[BackboneConfig, FgdConfig]:
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("archive is not a model checkpoint")
    backbone_kwargs = dict(meta["backbone_config"])
    for key in ("stage_channels", "stage_edge_sizes", "block_counts"):
        backbone_kwargs[key] = tuple(backbone_kwargs[key])
    fgd_kwargs = dict(meta["fgd_config"])
    fgd_kwargs["pool_windows"] = tuple(fgd_kwargs["pool_windows"])
    return BackboneConfig(**backbone_kwargs), FgdConfig(**fgd_kwargs)


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    """Rebuild the archived model and restore its exact parameters."""
    arrays, meta = load_archive(path)
    backbone_config, fgd_config = _configs_from_meta(meta)
    model = build_variant(meta["variant"], backbone_config, fgd_config, init_seed=0)
    report = load_state_arrays(model, arrays)
    if report.missing or report.unexpected:
        raise ValueError(f"checkpoint does not match the rebuilt model: "
                         f"missing={list(report.missing)}, unexpected={list(report.unexpected)}")
    return model, meta


def load_checkpoint_into(model: nn.Module, path) -> dict:
    """Restore parameters into an existing model after verifying that the
    archived variant and configs match the model's own."""
    arrays, meta = load_archive(path)
    backbone_config, fgd_config = _configs_from_meta(meta)
    if meta.get("variant") != getattr(model, "variant", "MSHT"):
        raise ValueError(f"checkpoint variant {meta.get('variant')!r} does not match "
                         f"model variant {getattr(model, 'variant', 'MSHT')!r}")
    if backbone_config != model.backbone_config or fgd_config != model.fgd_config:
        raise ValueError("checkpoint configuration does not match the model configuration")
    report = load_state_arrays(model, arrays)
    if report.missing or report.unexpected:
        raise ValueError(f"checkpoint does not match the model state: "
                         f"missing={list(report.missing)}, unexpected={list(report.unexpected)}")
    return meta

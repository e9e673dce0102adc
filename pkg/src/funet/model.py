"""The FUnet architecture.

A clip (B,T,C,H,W) is merged into a frame batch (B*T,C,H,W) and pushed
through a plain conv encoder. At the bottleneck, inter-frame attention
(IFA) restacks the T frames of each clip into the channel axis, compresses
them through a pyramid of attention-down blocks, and gates each frame with
a scalar weight. The decoder mirrors the encoder with skip connections;
each decoder level whose feature map still covers the attention grid gets
a channel self-attention (CSA) gate computing
sigmoid(LN(softmax(Q K^T / sqrt(d)) V)) over flattened patch tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as ops
from .tensor import ShapeError, Tensor

VARIANTS = ("B", "BI", "BIC")


def normalize_variant(tag: str) -> str:
    cleaned = tag.upper().replace("+", "").replace("*", "")
    if cleaned not in VARIANTS:
        raise ValueError(f"unknown variant {tag!r}; expected one of B, B+I, B+I+C")
    return cleaned


@dataclass
class FUnetConfig:
    """Architecture hyperparameters, all pinned in one place.

    `csa_embed_dim` is derived from the channel width at each gate's
    insertion level when left as None; setting it asserts that width.
    """

    t_frames: int = 5
    in_channels: int = 3
    base_channels: int = 16
    depth: int = 4
    adb_stages: int = 4
    csa_grid: int = 32
    csa_heads: int = 4
    csa_embed_dim: Optional[int] = None
    ifa_application: str = "residual"  # or "multiply"
    ifa_fusion: str = "sum"  # or "concat"
    csa_per_channel_gate: bool = False
    csa_scale_full_d: bool = False
    input_h: int = 256
    input_w: int = 448

    def validate(self):
        if self.t_frames < 2:
            raise ValueError(f"t_frames must be >= 2 (frame attention is meaningless at T=1), got {self.t_frames}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.ifa_application not in ("residual", "multiply"):
            raise ValueError(f"ifa_application must be 'residual' or 'multiply', got {self.ifa_application!r}")
        if self.ifa_fusion not in ("sum", "concat"):
            raise ValueError(f"ifa_fusion must be 'sum' or 'concat', got {self.ifa_fusion!r}")
        step = 2**self.depth
        if self.input_h % step or self.input_w % step:
            raise ValueError(
                f"input size {self.input_h}x{self.input_w} must be divisible by 2^depth = {step}"
            )
        ct = self.base_channels * (2**self.depth) * self.t_frames
        if ct % (2**self.adb_stages):
            raise ValueError(
                f"bottleneck channels x frames = {ct} must be divisible by 2^{self.adb_stages} "
                f"for the {self.adb_stages}-stage channel pyramid; adjust base_channels or t_frames"
            )
        c = ct
        for stage in range(self.adb_stages):
            if c % 2 or c // 4 < 1:
                raise ValueError(
                    f"pyramid stage {stage + 1} input channels {c} must be even and >= 4; "
                    f"increase base_channels or t_frames"
                )
            c //= 2
        return self

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2**level)

    def level_size(self, level: int) -> tuple[int, int]:
        return self.input_h // (2**level), self.input_w // (2**level)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "FUnetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# frame/channel bookkeeping


def merge_frames(clip: Tensor) -> Tensor:
    """(B,T,C,H,W) -> (B*T,C,H,W); frame t of clip b lands at index b*T + t."""
    if clip.ndim != 5:
        raise ShapeError(f"merge_frames expects rank 5, got {clip.shape}")
    b, t, c, h, w = clip.shape
    return clip.reshape(b * t, c, h, w)


def split_frames(feat: Tensor, t: int) -> Tensor:
    """(B*T,C,H,W) -> (B,T,C,H,W); inverse of merge_frames."""
    if feat.ndim != 4:
        raise ShapeError(f"split_frames expects rank 4, got {feat.shape}")
    bt, c, h, w = feat.shape
    if bt % t:
        raise ShapeError(f"leading extent {bt} not divisible by T={t}")
    return feat.reshape(bt // t, t, c, h, w)


def frames_to_channel_stack(feat: Tensor, t: int) -> Tensor:
    """(B*T,C,H,W) -> (B, T*C, H, W); frame t's channels occupy stack slots
    [t*C, (t+1)*C). A pure index map (row-major reshape)."""
    if feat.ndim != 4:
        raise ShapeError(f"frames_to_channel_stack expects rank 4, got {feat.shape}")
    bt, c, h, w = feat.shape
    if bt % t:
        raise ShapeError(f"leading extent {bt} not divisible by T={t}")
    return feat.reshape(bt // t, t * c, h, w)


def channel_stack_to_frames(stack: Tensor, t: int) -> Tensor:
    """Inverse of frames_to_channel_stack."""
    b, tc, h, w = stack.shape
    if tc % t:
        raise ShapeError(f"channel extent {tc} not divisible by T={t}")
    return stack.reshape(b * t, tc // t, h, w)


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Lightweight parameter container; children discovered from attributes."""

    def named_parameters(self):
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend((f"{name}.{sub}", t) for sub, t in value.named_parameters())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend((f"{name}.{i}.{sub}", t) for sub, t in item.named_parameters())
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _fan_in_uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1, bias=True, dtype=np.float32):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.weight = _fan_in_uniform(rng, cin * kh * kw, (cout, cin, kh, kw), dtype)
        self.bias = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True, dtype=np.float32):
        self.weight = _fan_in_uniform(rng, din, (dout, din), dtype)
        self.bias = Tensor(np.zeros(dout), requires_grad=True, dtype=dtype) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


def _norm_groups(channels: int) -> int:
    # largest divisor of `channels` not exceeding 8, so odd widths (e.g. the
    # pyramid's halved channel counts) still normalize cleanly
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels, dtype=np.float32, eps=1e-5):
        self.groups = _norm_groups(channels)
        self.eps = eps
        self.weight = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)

    def forward(self, x):
        return ops.group_norm(x, self.weight, self.bias, self.groups, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.eps = eps
        self.weight = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class ConvBlock(Module):
    """Two 3x3 convs, each followed by group norm and relu; spatial size kept."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.conv1 = Conv2d(cin, cout, 3, rng, padding=1, dtype=dtype)
        self.norm1 = GroupNorm(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1, dtype=dtype)
        self.norm2 = GroupNorm(cout, dtype=dtype)

    def forward(self, x):
        x = ops.relu(self.norm1(self.conv1(x)))
        return ops.relu(self.norm2(self.conv2(x)))


# ---------------------------------------------------------------------------
# inter-frame attention


class AttentionDownBlock(Module):
    """One pyramid stage: halve channels (spatial size untouched) and emit a
    raw per-frame score vector (B,T,1,1).

    The channel reducer runs three parallel 3x3 branches at dilation 1/2/3
    (padding matched, so H,W never change), concatenates them and fuses with
    a 1x1 conv; the score head is global-average-pool followed by two 1x1
    convs ending at T channels.
    """

    def __init__(self, cin, t_frames, rng, dtype=np.float32):
        if cin % 2 or cin // 4 < 1:
            raise ValueError(f"pyramid stage needs even input channels >= 4, got {cin}")
        half = cin // 2
        per = cin // 6
        widths = [half - 2 * per, per, per]
        self.branches = [
            Conv2d(cin, widths[i], 3, rng, padding=i + 1, dilation=i + 1, dtype=dtype) for i in range(3)
        ]
        self.fuse = Conv2d(half, half, 1, rng, dtype=dtype)
        self.norm = GroupNorm(half, dtype=dtype)
        self.score1 = Conv2d(half, cin // 4, 1, rng, dtype=dtype)
        self.score2 = Conv2d(cin // 4, t_frames, 1, rng, dtype=dtype)

    def forward(self, x):
        reduced = ops.concat([b(x) for b in self.branches], axis=1)
        reduced = ops.relu(self.norm(self.fuse(reduced)))
        pooled = ops.adaptive_global_avg_pool(reduced)
        score = self.score2(ops.relu(self.score1(pooled)))
        return reduced, score


class InterFrameAttention(Module):
    """Per-frame scalar gates from a channel pyramid over the stacked clip.

    Frames are restacked into channels, pushed through `stages` halving
    blocks, and each stage's (B,T,1,1) score is fused (sum by default,
    concat + 1x1 conv optionally) then squashed with a sigmoid. Gates are
    applied per frame: multiply mode scales features by the gate, residual
    mode (default) by 1 + gate.
    """

    def __init__(self, feat_channels, t_frames, rng, stages=4, fusion="sum", application="residual", dtype=np.float32):
        self.t_frames = t_frames
        self.application = application
        self.fusion = fusion
        c = feat_channels * t_frames
        self.blocks = []
        for _ in range(stages):
            self.blocks.append(AttentionDownBlock(c, t_frames, rng, dtype=dtype))
            c //= 2
        if fusion == "concat":
            self.fuse_conv = Conv2d(len(self.blocks) * t_frames, t_frames, 1, rng, dtype=dtype)

    def forward(self, feat: Tensor, force_weights: Optional[Tensor] = None):
        """feat: (B*T, C, H, W) bottleneck features.

        Returns (gated features, gate weights (B,T,1,1)). `force_weights`
        bypasses the learned gate (used by equivalence tests)."""
        t = self.t_frames
        bt = feat.shape[0]
        if bt % t:
            raise ShapeError(f"feature batch {bt} not divisible by T={t}")
        b = bt // t
        if force_weights is None:
            stack = frames_to_channel_stack(feat, t)
            scores = []
            cur = stack
            for block in self.blocks:
                cur, s = block(cur)
                scores.append(s)
            if self.fusion == "concat":
                raw = self.fuse_conv(ops.concat(scores, axis=1))
            else:
                raw = scores[0]
                for s in scores[1:]:
                    raw = raw + s
            weights = ops.sigmoid(raw)
        else:
            if force_weights.shape != (b, t, 1, 1):
                raise ShapeError(f"force_weights must have shape ({b},{t},1,1), got {force_weights.shape}")
            weights = force_weights
        per_frame = weights.reshape(bt, 1, 1, 1)
        if self.application == "multiply":
            gated = feat * per_frame
        else:
            gated = feat * (per_frame + 1.0)
        return gated, weights


# ---------------------------------------------------------------------------
# channel self-attention


def _patch_geometry(size: int, grid: int) -> tuple[int, int, int]:
    """Stride/kernel/padding along one axis so a strided conv lands exactly
    on `grid` output positions. Requires size >= grid."""
    if size < grid:
        raise ValueError(f"spatial extent {size} smaller than attention grid {grid}")
    stride = -(-size // grid)  # ceil
    pad = max(0, -(-(grid * stride - size) // 2))
    out = (size + 2 * pad - stride) // stride + 1
    if out != grid:
        raise ValueError(f"cannot tile extent {size} into a {grid}-patch grid")
    return stride, stride, pad


class ChannelSelfAttention(Module):
    """Token attention over a strided-conv patch grid, producing a sigmoid
    gate map that multiplies the incoming features.

    Token layout is (B, grid^2, d) with d = the channel width at this
    level. Heads are split off the embedding axis; scores are scaled by
    1/sqrt(d/heads) (1/sqrt(d) with `scale_full_d`). The attended tokens
    pass through layer norm, then either a d->1 projection + sigmoid
    (per-pixel gate, default) or a plain sigmoid (per-pixel-per-channel),
    and the gate grid is bilinearly upsampled back to (H, W).
    """

    def __init__(self, channels, h, w, grid, heads, rng, per_channel=False, scale_full_d=False, dtype=np.float32):
        if channels % heads:
            raise ValueError(f"embedding width {channels} not divisible by {heads} heads")
        sh, kh, ph = _patch_geometry(h, grid)
        sw, kw, pw = _patch_geometry(w, grid)
        self.h, self.w = h, w
        self.grid = grid
        self.heads = heads
        self.dim = channels
        self.per_channel = per_channel
        self.scale = 1.0 / math.sqrt(channels if scale_full_d else channels // heads)
        self.patch_conv = Conv2d(channels, channels, (kh, kw), rng, stride=(sh, sw), padding=(ph, pw), dtype=dtype)
        self.pos_embedding = Tensor(np.zeros((grid * grid, channels)), requires_grad=True, dtype=dtype)
        self.lq = Linear(channels, channels, rng, dtype=dtype)
        self.lk = Linear(channels, channels, rng, dtype=dtype)
        self.lv = Linear(channels, channels, rng, dtype=dtype)
        self.out_norm = LayerNorm(channels, dtype=dtype)
        if not per_channel:
            self.gate_proj = Linear(channels, 1, rng, dtype=dtype)

    def tokens(self, x: Tensor) -> Tensor:
        """Flatten the patch grid into position-embedded tokens (B, grid^2, d)."""
        b = x.shape[0]
        g, d = self.grid, self.dim
        p = self.patch_conv(x)
        if p.shape[2] != g or p.shape[3] != g:
            raise ShapeError(f"patch conv produced {p.shape[2]}x{p.shape[3]}, expected {g}x{g}")
        tok = p.reshape(b, d, g * g).permute(0, 2, 1)
        return tok + self.pos_embedding.reshape(1, g * g, d)

    def attend(self, tok: Tensor) -> tuple[Tensor, Tensor]:
        """Multi-head scaled dot-product attention over tokens.

        Returns (attended tokens (B,N,d), attention probabilities
        (B*heads, N, N))."""
        b, n, d = tok.shape
        hd = d // self.heads

        def split_heads(t):
            return t.reshape(b, n, self.heads, hd).permute(0, 2, 1, 3).reshape(b * self.heads, n, hd)

        q = split_heads(self.lq(tok))
        k = split_heads(self.lk(tok))
        v = split_heads(self.lv(tok))
        scores = ops.matmul_batched(q, k.permute(0, 2, 1)) * self.scale
        probs = ops.softmax(scores, axis=2)
        att = ops.matmul_batched(probs, v)
        att = att.reshape(b, self.heads, n, hd).permute(0, 2, 1, 3).reshape(b, n, d)
        return att, probs

    def gate_map(self, x: Tensor) -> Tensor:
        """Sigmoid gate upsampled to (H, W): (B,1,H,W), or (B,C,H,W) in
        per-channel mode."""
        b = x.shape[0]
        g = self.grid
        att, _ = self.attend(self.tokens(x))
        normed = self.out_norm(att)
        if self.per_channel:
            gate_tok = ops.sigmoid(normed)
            gmap = gate_tok.permute(0, 2, 1).reshape(b, self.dim, g, g)
        else:
            gate_tok = ops.sigmoid(self.gate_proj(normed))
            gmap = gate_tok.permute(0, 2, 1).reshape(b, 1, g, g)
        return ops.resize_bilinear(gmap, self.h, self.w)

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate_map(x)


# ---------------------------------------------------------------------------
# the full network


class FUnet(Module):
    """Encoder/decoder segmentation network over T-frame clips.

    `variant` selects the ablation stage: "B" (plain encoder/decoder),
    "BI" (+ inter-frame attention), "BIC" (+ channel self-attention,
    the full model). Absent modules contribute no parameters.
    """

    def __init__(self, config: FUnetConfig, variant: str = "BIC", seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.variant = normalize_variant(variant)
        self.dtype = dtype
        rng = np.random.default_rng(seed)

        self.encoder = [ConvBlock(config.in_channels, config.base_channels, rng, dtype=dtype)]
        for level in range(1, config.depth + 1):
            self.encoder.append(ConvBlock(config.level_channels(level - 1), config.level_channels(level), rng, dtype=dtype))

        if "I" in self.variant:
            self.ifa = InterFrameAttention(
                config.level_channels(config.depth),
                config.t_frames,
                rng,
                stages=config.adb_stages,
                fusion=config.ifa_fusion,
                application=config.ifa_application,
                dtype=dtype,
            )

        self.decoder = []
        self.csa_gates = []
        self._csa_levels = []
        for level in range(config.depth - 1, -1, -1):
            cin = config.level_channels(level + 1) + config.level_channels(level)
            self.decoder.append(ConvBlock(cin, config.level_channels(level), rng, dtype=dtype))
            h, w = config.level_size(level)
            if "C" in self.variant and min(h, w) >= config.csa_grid:
                d = config.level_channels(level)
                if config.csa_embed_dim is not None and config.csa_embed_dim != d:
                    raise ValueError(
                        f"csa_embed_dim={config.csa_embed_dim} conflicts with channel width {d} at level {level}"
                    )
                self.csa_gates.append(
                    ChannelSelfAttention(
                        d,
                        h,
                        w,
                        config.csa_grid,
                        config.csa_heads,
                        rng,
                        per_channel=config.csa_per_channel_gate,
                        scale_full_d=config.csa_scale_full_d,
                        dtype=dtype,
                    )
                )
                self._csa_levels.append(level)
        self.head = Conv2d(config.base_channels, 1, 1, rng, dtype=dtype)

    def forward(self, clip: Tensor, force_ifa_weights: Optional[Tensor] = None) -> Tensor:
        """clip (B,T,C,H,W) in [0,1] -> segmentation logits (B,T,1,H,W)."""
        cfg = self.config
        if clip.ndim != 5:
            raise ShapeError(f"expected rank-5 clip, got {clip.shape}")
        b, t, c, h, w = clip.shape
        if t != cfg.t_frames or c != cfg.in_channels or h != cfg.input_h or w != cfg.input_w:
            raise ShapeError(
                f"clip shape {clip.shape} does not match config "
                f"(T={cfg.t_frames}, C={cfg.in_channels}, {cfg.input_h}x{cfg.input_w})"
            )
        x = merge_frames(clip)
        skips = []
        x = self.encoder[0](x)
        skips.append(x)
        for level in range(1, cfg.depth + 1):
            x = ops.avg_pool2x2(x)
            x = self.encoder[level](x)
            skips.append(x)

        if "I" in self.variant:
            x, _ = self.ifa(x, force_weights=force_ifa_weights)

        gate_idx = 0
        for i, level in enumerate(range(cfg.depth - 1, -1, -1)):
            x = ops.upsample2x(x)
            x = ops.concat([x, skips[level]], axis=1)
            x = self.decoder[i](x)
            if gate_idx < len(self._csa_levels) and self._csa_levels[gate_idx] == level:
                x = self.csa_gates[gate_idx](x)
                gate_idx += 1
        logits = self.head(x)
        return split_frames(logits, t)

    def ifa_weights(self, clip: Tensor) -> Tensor:
        """Run the encoder + IFA only; returns the (B,T,1,1) gate weights."""
        if "I" not in self.variant:
            raise ValueError(f"variant {self.variant} has no inter-frame attention")
        cfg = self.config
        x = merge_frames(clip)
        x = self.encoder[0](x)
        for level in range(1, cfg.depth + 1):
            x = self.encoder[level](ops.avg_pool2x2(x))
        _, weights = self.ifa(x)
        return weights

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=t.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != expected {t.shape}")
            t.data = np.ascontiguousarray(arr)


def ablation_variant(config: FUnetConfig, variant: str, seed: int = 0, dtype=np.float32) -> FUnet:
    """Build the requested ablation stage of the network."""
    return FUnet(config, variant=variant, seed=seed, dtype=dtype)

"""CST-former: conv encoder, channel/spectral/temporal attention blocks, multi-ACCDOA head."""
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .nn import (
    BatchNorm2d, Conv2d, DepthwiseConv2d, Dropout, LayerNorm, Linear, Module,
    MultiheadSelfAttention,
)
from .tensor import Tensor, gelu, mean, no_grad, permute, relu, reshape, tanh

VARIANTS = ("DST", "DCA", "ULE")
POOL_SCHEDULES = {
    "front": [(5, 2), (1, 2), (1, 1)],
    "middle": [(1, 1), (1, 2), (5, 2)],
}


@dataclass
class ModelConfig:
    variant: str = "ULE"
    use_cmt: bool = True
    pooling: str = "middle"
    pool_mode: str = "max"
    in_channels: int = 7
    conv_filters: int = 64
    n_cst_blocks: int = 2
    heads: int = 8
    patch: tuple = (10, 4)
    n_classes: int = 13
    n_tracks: int = 3
    fc_hidden: int = 128
    dropout: float = 0.05
    attention_order: tuple = ("C", "S", "T")
    n_frames: int = 250
    n_mels: int = 64

    def __post_init__(self):
        self.variant = self.variant.upper()
        self.patch = tuple(self.patch)
        self.attention_order = tuple(self.attention_order)

    @property
    def time_pool(self):
        return int(np.prod([k[0] for k in POOL_SCHEDULES[self.pooling]]))

    @property
    def freq_pool(self):
        return int(np.prod([k[1] for k in POOL_SCHEDULES[self.pooling]]))

    @property
    def out_dim(self):
        return self.n_tracks * 3 * self.n_classes

    def validate(self, n_frames=None, n_mels=None):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pooling not in POOL_SCHEDULES:
            raise ConfigError(f"pooling must be 'front' or 'middle', got {self.pooling!r}")
        if self.pool_mode not in ("max", "avg"):
            raise ConfigError(f"pool_mode must be 'max' or 'avg', got {self.pool_mode!r}")
        if self.attention_order != ("C", "S", "T"):
            raise ConfigError("attention order is fixed to C -> S -> T")
        if self.conv_filters % self.heads:
            raise ConfigError(f"conv_filters {self.conv_filters} not divisible by {self.heads} heads")
        T = self.n_frames if n_frames is None else n_frames
        Fm = self.n_mels if n_mels is None else n_mels
        if T % self.time_pool or Fm % self.freq_pool:
            raise ConfigError(
                f"input (T={T}, F={Fm}) must be divisible by the pooling factors "
                f"({self.time_pool}, {self.freq_pool})"
            )
        if self.variant == "ULE":
            pt, pf = self.patch
            if (pt * pf) % self.heads:
                raise ConfigError(f"patch embedding {pt * pf} not divisible by {self.heads} heads")
            tp, fp = T // self.time_pool, Fm // self.freq_pool
            if tp % pt or fp % pf:
                raise ConfigError(f"patch {self.patch} must divide the encoded map ({tp}, {fp})")
        return self

    def to_dict(self):
        d = asdict(self)
        d["patch"] = list(self.patch)
        d["attention_order"] = list(self.attention_order)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ patches
def unfold_patches(x, pt, pf):
    """(B, C, T', F') -> (B * T'F' / (pt*pf), C, pt*pf).

    Patch (i, j) of batch item b goes to row ``b * nT * nF + i * nF + j`` and
    element (t, f) inside the patch goes to column ``(t % pt) * pf + (f % pf)``,
    with ``i = t // pt``, ``j = f // pf``, ``nT = T'/pt``, ``nF = F'/pf``.
    """
    B, C, T, Fq = x.shape
    if T % pt or Fq % pf:
        raise ConfigError(f"patch ({pt}, {pf}) does not tile the ({T}, {Fq}) map")
    nt, nf = T // pt, Fq // pf
    y = reshape(x, (B, C, nt, pt, nf, pf))
    y = permute(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (B * nt * nf, C, pt * pf))


def fold_patches(y, B, C, T, Fq, pt, pf):
    """Exact inverse of :func:`unfold_patches`."""
    if T % pt or Fq % pf:
        raise ConfigError(f"patch ({pt}, {pf}) does not tile the ({T}, {Fq}) map")
    nt, nf = T // pt, Fq // pf
    if y.shape != (B * nt * nf, C, pt * pf):
        raise ShapeError(f"fold_patches expected {(B * nt * nf, C, pt * pf)}, got {y.shape}")
    x = reshape(y, (B, nt, nf, C, pt, pf))
    x = permute(x, (0, 3, 1, 4, 2, 5))
    return reshape(x, (B, C, T, Fq))


def patch_index(b, c, t, f, T, Fq, pt, pf):
    """Published index map of :func:`unfold_patches` for one element."""
    nt, nf = T // pt, Fq // pf
    return b * nt * nf + (t // pt) * nf + (f // pf), c, (t % pt) * pf + (f % pf)


# ------------------------------------------------------------------ layers
class ConvBlock(Module):
    def __init__(self, cin, cout, pool, pool_mode):
        self.conv = Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn = BatchNorm2d(cout)
        self.pool = tuple(pool)
        self.pool_mode = pool_mode

    def forward(self, x):
        return F.pool2d(relu(self.bn(self.conv(x))), self.pool, self.pool_mode)


def build_encoder(cfg):
    """Three conv blocks with the configured T-F pooling schedule."""
    cin = 1 if cfg.variant == "DCA" else cfg.in_channels
    blocks = []
    for pool in POOL_SCHEDULES[cfg.pooling]:
        blocks.append(ConvBlock(cin, cfg.conv_filters, pool, cfg.pool_mode))
        cin = cfg.conv_filters
    return blocks


class LPU(Module):
    """Local perception unit: x + depthwise 3x3 conv(x)."""

    def __init__(self, channels):
        self.dw = DepthwiseConv2d(channels, 3, padding=1)

    def forward(self, x):
        return x + self.dw(x)


class IRFFN(Module):
    """Inverted residual feed-forward network with expansion ratio 4."""

    def __init__(self, channels, ratio=4, dropout=0.0):
        hidden = channels * ratio
        self.expand = Conv2d(channels, hidden, 1)
        self.bn1 = BatchNorm2d(hidden)
        self.dw = DepthwiseConv2d(hidden, 3, padding=1)
        self.bn2 = BatchNorm2d(hidden)
        self.project = Conv2d(hidden, channels, 1)
        self.bn3 = BatchNorm2d(channels)
        self.drop = Dropout(dropout)

    def forward(self, x):
        h = gelu(self.bn1(self.expand(x)))
        h = h + gelu(self.bn2(self.dw(h)))
        h = self.bn3(self.project(h))
        return x + self.drop(h)


class CSTBlock(Module):
    """LPU -> channel/spectral/temporal attention -> IRFFN (LPU and IRFFN only with CMT)."""

    def __init__(self, cfg):
        C = cfg.conv_filters
        self.variant = cfg.variant
        self.use_cmt = cfg.use_cmt
        self.patch = cfg.patch
        if cfg.use_cmt:
            self.lpu = LPU(C)
        if cfg.variant == "ULE":
            embed = cfg.patch[0] * cfg.patch[1]
            self.c_norm = LayerNorm(embed)
            self.c_mhsa = MultiheadSelfAttention(embed, cfg.heads, cfg.dropout)
        elif cfg.variant == "DCA":
            self.c_norm = LayerNorm(C)
            self.c_mhsa = MultiheadSelfAttention(C, cfg.heads, cfg.dropout)
        self.s_norm = LayerNorm(C)
        self.s_mhsa = MultiheadSelfAttention(C, cfg.heads, cfg.dropout)
        self.t_norm = LayerNorm(C)
        self.t_mhsa = MultiheadSelfAttention(C, cfg.heads, cfg.dropout)
        self.drop = Dropout(cfg.dropout)
        if cfg.use_cmt:
            self.irffn = IRFFN(C, dropout=cfg.dropout)
        self.n_channels = cfg.in_channels
        self.last_shapes = {}

    def _sublayer(self, seq, norm, attn, domain):
        self.last_shapes[domain] = seq.shape
        return seq + self.drop(attn(norm(seq)))

    def channel_attention(self, x):
        if self.variant == "ULE":
            B, C, T, Fq = x.shape
            pt, pf = self.patch
            u = self._sublayer(unfold_patches(x, pt, pf), self.c_norm, self.c_mhsa, "channel")
            return fold_patches(u, B, C, T, Fq, pt, pf)
        if self.variant == "DCA":
            BM, C, T, Fq = x.shape
            M = self.n_channels
            B = BM // M
            s = permute(reshape(x, (B, M, C, T, Fq)), (0, 3, 4, 1, 2))
            s = self._sublayer(reshape(s, (B * T * Fq, M, C)), self.c_norm, self.c_mhsa, "channel")
            s = permute(reshape(s, (B, T, Fq, M, C)), (0, 3, 4, 1, 2))
            return reshape(s, (BM, C, T, Fq))
        return x

    def spectral_attention(self, x):
        B, C, T, Fq = x.shape
        s = reshape(permute(x, (0, 2, 3, 1)), (B * T, Fq, C))
        s = self._sublayer(s, self.s_norm, self.s_mhsa, "spectral")
        return permute(reshape(s, (B, T, Fq, C)), (0, 3, 1, 2))

    def temporal_attention(self, x):
        B, C, T, Fq = x.shape
        s = reshape(permute(x, (0, 3, 2, 1)), (B * Fq, T, C))
        s = self._sublayer(s, self.t_norm, self.t_mhsa, "temporal")
        return permute(reshape(s, (B, Fq, T, C)), (0, 3, 2, 1))

    def attention(self, x):
        return self.temporal_attention(self.spectral_attention(self.channel_attention(x)))

    def forward(self, x):
        if self.use_cmt:
            x = self.lpu(x)
        x = self.attention(x)
        if self.use_cmt:
            x = self.irffn(x)
        return x


class CSTFormer(Module):
    """Maps (B, 7, T, F) features to (B, T/5, 3*3*K) multi-ACCDOA outputs in (-1, 1)."""

    _buffer_names = ("input_mean", "input_std")

    def __init__(self, cfg=None):
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        self.encoder = build_encoder(cfg)
        self.cst = [CSTBlock(cfg) for _ in range(cfg.n_cst_blocks)]
        fdim = cfg.conv_filters * (cfg.n_mels // cfg.freq_pool)
        self.fc1 = Linear(fdim, cfg.fc_hidden)
        self.fc2 = Linear(cfg.fc_hidden, cfg.out_dim)
        self.input_mean = np.zeros((cfg.in_channels, cfg.n_mels), dtype=np.float32)
        self.input_std = np.ones((cfg.in_channels, cfg.n_mels), dtype=np.float32)

    def set_input_normalization(self, mean_, std_):
        self.input_mean = np.asarray(mean_, dtype=self.input_mean.dtype).copy()
        self.input_std = np.asarray(std_, dtype=self.input_std.dtype).copy()

    def encode(self, x):
        for block in self.encoder:
            x = block(x)
        return x

    def forward(self, features):
        cfg = self.cfg
        data = features.data if isinstance(features, Tensor) else np.asarray(features)
        if data.ndim != 4 or data.shape[1] != cfg.in_channels or data.shape[3] != cfg.n_mels:
            raise ShapeError(
                f"expected input (B, {cfg.in_channels}, T, {cfg.n_mels}), got {data.shape}"
            )
        B, M, T, Fm = data.shape
        cfg.validate(T, Fm)
        dtype = self.fc1.weight.dtype
        norm = ((data - self.input_mean[None, :, None, :]) / self.input_std[None, :, None, :])
        x = Tensor(norm.astype(dtype, copy=False))
        if cfg.variant == "DCA":
            x = reshape(x, (B * M, 1, T, Fm))
        x = self.encode(x)
        for block in self.cst:
            x = block(x)
        if cfg.variant == "DCA":
            _, C, Tp, Fp = x.shape
            x = mean(reshape(x, (B, M, C, Tp, Fp)), axis=1)
        _, C, Tp, Fp = x.shape
        x = reshape(permute(x, (0, 2, 1, 3)), (B, Tp, C * Fp))
        return tanh(self.fc2(relu(self.fc1(x))))

    def predict(self, features):
        """Eval-mode forward without graph recording; returns (B, T', 3, 3, K) array."""
        was = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward(features).data
        finally:
            self.train(was)
        cfg = self.cfg
        return out.reshape(out.shape[0], out.shape[1], cfg.n_tracks, 3, cfg.n_classes)


def build_model(cfg=None, seed=0, dtype=np.float32):
    model = CSTFormer(cfg or ModelConfig())
    model.reset_parameters(seed)
    model.set_rng(np.random.Generator(np.random.Philox(key=seed)))
    if np.dtype(dtype) != np.float32:
        model.astype(dtype)
    return model

"""The multi-branch ECG classifier.

Layout: an ExBlock (two conv-BN-ReLU units) plus fixed Morlet and DB4
features form a shared latent ``(N, n, L)``; graph attention over the latent
rows, CBAM and a one-block time-series transformer read that latent in
parallel; their outputs are concatenated, adaptively pooled over time and
passed to a shared ReLU layer feeding a 1-logit gate head and a 5-logit
disease head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .nn_core import (
    AdaptiveAvgPool1d,
    Conv1d,
    ConvBNReLU,
    Linear,
    Module,
    ReLU,
    Sequential,
    dump_state,
    glorot_uniform,
    parse_state,
    sigmoid,
    softmax_backward,
    softmax_stable,
)
from .wavelet import WaveletConfig, db4_features, morlet_features

DISEASES = ("AM", "CD", "MI", "QT", "HE")
FEATURE_FLAGS = ("exblock", "morlet", "db4")
ATTENTION_FLAGS = ("cbam", "gat", "tst")
ALL_FLAGS = FEATURE_FLAGS + ATTENTION_FLAGS
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 15
    seq_len: int = 1500
    rate: float = 250.0
    hidden: int = 64
    kernel: int = 7
    gat_heads: int = 1
    tst_heads: int = 4
    tst_dim: int = 64
    adaptive_out: int = 16
    head_hidden: int = 1280
    cbam_reduction: int = 8
    cbam_kernel: int = 7
    pos_encoding: bool = True
    morlet_sigma: float = 1.0
    morlet_unit_s: float = 0.04
    exblock: bool = True
    morlet: bool = True
    db4: bool = True
    cbam: bool = True
    gat: bool = True
    tst: bool = True

    def __post_init__(self):
        for name in ("n_channels", "seq_len", "hidden", "gat_heads", "tst_heads", "tst_dim",
                     "adaptive_out", "head_hidden", "cbam_reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tst_dim % self.tst_heads:
            raise ValueError("tst_dim must be divisible by tst_heads")
        if not any(getattr(self, f) for f in FEATURE_FLAGS):
            raise ValueError("at least one feature branch (exblock, morlet, db4) must be enabled")
        if not any(getattr(self, f) for f in ATTENTION_FLAGS):
            raise ValueError("at least one attention branch (cbam, gat, tst) must be enabled")
        if self.adaptive_out > self.seq_len:
            raise ValueError("adaptive_out cannot exceed seq_len")

    @property
    def wavelet(self) -> WaveletConfig:
        return WaveletConfig(sigma=self.morlet_sigma, time_unit_s=self.morlet_unit_s)

    @property
    def latent_width(self) -> int:
        return self.hidden * self.exblock + self.n_channels * (self.morlet + self.db4)

    @property
    def fused_width(self) -> int:
        n = self.latent_width
        return n * self.gat + n * self.cbam + self.tst_dim * self.tst

    def flags(self) -> dict[str, bool]:
        return {f: getattr(self, f) for f in ALL_FLAGS}

    def with_flags(self, **flags) -> ModelConfig:
        return replace(self, **flags)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# the eight reference ablation rows in published order; rows 1 and 4 repeat one combination
ABLATION_COMBOS: tuple[dict[str, bool], ...] = tuple(
    dict(zip(ALL_FLAGS, row)) for row in (
        # exblock, morlet, db4, cbam, gat, tst
        (True, True, True, True, False, False),
        (True, True, True, False, True, False),
        (True, True, True, False, False, True),
        (True, True, True, True, False, False),
        (True, True, True, False, True, True),
        (True, False, False, True, True, True),
        (False, True, True, True, True, True),
        (True, True, True, True, True, True),
    )
)


def build_latent(x_ex, x_morlet, x_db4, flags: dict[str, bool]) -> np.ndarray:
    """Concatenate enabled branches along the feature axis, in (ExBlock, Morlet, DB4) order."""
    parts = [x for x, key in ((x_ex, "exblock"), (x_morlet, "morlet"), (x_db4, "db4")) if flags.get(key)]
    if not parts:
        raise ValueError("no feature branch enabled")
    if any(p is None for p in parts):
        raise ValueError("an enabled branch has no input")
    return np.concatenate(parts, axis=1)


class ExBlock(Sequential):
    def __init__(self, c_in: int, hidden: int, kernel: int, rng: np.random.Generator):
        super().__init__(ConvBNReLU(c_in, hidden, kernel, rng), ConvBNReLU(hidden, hidden, kernel, rng))


# --------------------------------------------------------------------------
# graph attention over latent rows
# --------------------------------------------------------------------------

class GATLayer(Module):
    """Fully connected graph attention with self-loops.

    Nodes are the rows of the latent; each node's feature vector is its time
    profile of length ``L``.  Heads are averaged so the output keeps the
    input's shape.
    """

    def __init__(self, length: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.length, self.heads = length, heads
        self.add_param("W", glorot_uniform(rng, (heads, length, length), length, length))
        self.add_param("a", glorot_uniform(rng, (heads, 2 * length), 2 * length, 1))
        self.attention = None

    def forward(self, x):
        n_batch, n_nodes, length = x.shape
        if n_nodes < 1:
            raise ValueError("graph attention needs at least one node")
        if length != self.length:
            raise ValueError(f"GAT built for length {self.length}, got {length}")
        W, a = self.params["W"], self.params["a"]
        wh = np.matmul(x[:, None], W.swapaxes(-1, -2))  # (N, heads, nodes, L)
        src = wh @ a[:, :length, None]  # (N, heads, nodes, 1)
        dst = wh @ a[:, length:, None]
        e = src + dst.swapaxes(-1, -2)  # e_ij = a_src . Wh_i + a_dst . Wh_j
        z = np.where(e > 0, e, LEAKY_SLOPE * e)
        alpha = softmax_stable(z, axis=-1)
        self.margin = float(np.min(np.abs(e)))
        self._x, self._wh, self._e, self._alpha = x, wh, e, alpha
        self.attention = alpha
        return (alpha @ wh).mean(axis=1)

    def backward(self, dy):
        x, wh, e, alpha = self._x, self._wh, self._e, self._alpha
        length = self.length
        W, a = self.params["W"], self.params["a"]
        dout = np.broadcast_to(dy[:, None] / self.heads, wh.shape)
        dalpha = dout @ wh.swapaxes(-1, -2)
        dwh = alpha.swapaxes(-1, -2) @ dout
        dz = softmax_backward(alpha, dalpha)
        de = np.where(e > 0, dz, LEAKY_SLOPE * dz)
        dsrc = de.sum(axis=-1)  # (N, heads, nodes)
        ddst = de.sum(axis=-2)
        dwh = dwh + dsrc[..., None] * a[None, :, None, :length] + ddst[..., None] * a[None, :, None, length:]
        self.grads["a"][:, :length] += (dsrc[..., None] * wh).sum(axis=(0, 2))
        self.grads["a"][:, length:] += (ddst[..., None] * wh).sum(axis=(0, 2))
        self.grads["W"] += np.matmul(dwh.swapaxes(-1, -2), x[:, None]).sum(axis=0)
        return np.matmul(dwh, W[None]).sum(axis=1)


# --------------------------------------------------------------------------
# channel + spatial attention
# --------------------------------------------------------------------------

def _max_with_gap(x: np.ndarray, axis: int):
    idx = np.argmax(x, axis=axis)
    top = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)
    if x.shape[axis] < 2:
        return idx, np.squeeze(top, axis), math.inf
    part = -np.partition(-x, 1, axis=axis)
    gap = np.take(part, 0, axis=axis) - np.take(part, 1, axis=axis)
    # exact ties only arise between structurally equal entries (dead ReLUs)
    gap = gap[gap > 0]
    return idx, np.squeeze(top, axis), float(np.min(gap)) if gap.size else math.inf


class CBAM(Module):
    """``x * a_c * a_s`` with both attention maps computed from ``x``.

    a_c = sigmoid(FC2(ReLU(FC1(avg_t(x) + max_t(x))))) has shape (N, H, 1);
    a_s = sigmoid(Conv1d([avg_h(x), max_h(x)])) has shape (N, 1, L).
    """

    def __init__(self, channels: int, reduction: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        mid = max(1, channels // reduction)
        self.fc1 = self.add_child("fc1", Linear(channels, mid, rng))
        self.relu = self.add_child("relu", ReLU())
        self.fc2 = self.add_child("fc2", Linear(mid, channels, rng))
        self.spatial = self.add_child("spatial", Conv1d(2, 1, kernel, rng))
        self.channel_attention = None
        self.spatial_attention = None

    def forward(self, x):
        _, channels, length = x.shape
        t_idx, t_max, gap_t = _max_with_gap(x, axis=2)
        h_idx, h_max, gap_h = _max_with_gap(x, axis=1)
        s = x.mean(axis=2) + t_max
        ac = sigmoid(self.fc2.forward(self.relu.forward(self.fc1.forward(s))))
        desc = np.stack([x.mean(axis=1), h_max], axis=1)
        a_s = sigmoid(self.spatial.forward(desc))  # (N, 1, L)
        self.margin = min(gap_t, gap_h)
        self._cache = (x, t_idx, h_idx, ac, a_s)
        self.channel_attention = ac[:, :, None]
        self.spatial_attention = a_s
        return x * ac[:, :, None] * a_s

    def backward(self, dy):
        x, t_idx, h_idx, ac, a_s = self._cache
        n, channels, length = x.shape
        dx = dy * ac[:, :, None] * a_s
        dac = (dy * x * a_s).sum(axis=2)
        das = (dy * x * ac[:, :, None]).sum(axis=1, keepdims=True)

        ds = self.fc1.backward(self.relu.backward(self.fc2.backward(dac * ac * (1.0 - ac))))
        dx += ds[:, :, None] / length
        nn_, cc = np.meshgrid(np.arange(n), np.arange(channels), indexing="ij")
        dx[nn_, cc, t_idx] += ds

        ddesc = self.spatial.backward(das * a_s * (1.0 - a_s))
        dx += ddesc[:, 0:1, :] / channels
        nn_, ll = np.meshgrid(np.arange(n), np.arange(length), indexing="ij")
        dx[nn_, h_idx, ll] += ddesc[:, 1, :]
        return dx


# --------------------------------------------------------------------------
# time-series transformer
# --------------------------------------------------------------------------

def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def scaled_dot_attention(q, k, v):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes; returns (output, weights)."""
    weights = softmax_stable(q @ k.swapaxes(-1, -2) / math.sqrt(q.shape[-1]), axis=-1)
    return weights @ v, weights


class TSTBlock(Module):
    """One multi-head self-attention block along time, with a residual path.

    Latent rows are projected to ``dim`` features per time step and a fixed
    sinusoidal position encoding is added before attention.
    """

    def __init__(self, n_in: int, dim: int, heads: int, rng: np.random.Generator, pos_encoding: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim, self.heads, self.pos_encoding = dim, heads, pos_encoding
        self.inp = self.add_child("in_proj", Linear(n_in, dim, rng))
        self.q = self.add_child("q", Linear(dim, dim, rng))
        self.k = self.add_child("k", Linear(dim, dim, rng))
        self.v = self.add_child("v", Linear(dim, dim, rng))
        self.o = self.add_child("out", Linear(dim, dim, rng))
        self.attention = None

    def _split(self, t):
        n, length, _ = t.shape
        return t.reshape(n, length, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge(t):
        n, h, length, dk = t.shape
        return t.transpose(0, 2, 1, 3).reshape(n, length, h * dk)

    def forward(self, x):
        length = x.shape[2]
        z = self.inp.forward(x.transpose(0, 2, 1))
        if self.pos_encoding:
            z = z + sinusoidal_encoding(length, self.dim)
        q = self._split(self.q.forward(z))
        k = self._split(self.k.forward(z))
        v = self._split(self.v.forward(z))
        ctx, weights = scaled_dot_attention(q, k, v)
        self._cache = (q, k, v, weights)
        self.attention = weights
        y = z + self.o.forward(self._merge(ctx))
        return y.transpose(0, 2, 1)

    def backward(self, dy):
        q, k, v, weights = self._cache
        dyt = dy.transpose(0, 2, 1)
        dctx = self._split(self.o.backward(dyt))
        dweights = dctx @ v.swapaxes(-1, -2)
        dv = weights.swapaxes(-1, -2) @ dctx
        dscores = softmax_backward(weights, dweights) / math.sqrt(q.shape[-1])
        dq = dscores @ k
        dk = dscores.swapaxes(-1, -2) @ q
        dz = dyt + self.q.backward(self._merge(dq)) + self.k.backward(self._merge(dk)) \
            + self.v.backward(self._merge(dv))
        return self.inp.backward(dz).transpose(0, 2, 1)


# --------------------------------------------------------------------------
# fusion head and full network
# --------------------------------------------------------------------------

class FusionHead(Module):
    """Adaptive pooling, flatten, shared ReLU layer, 1-logit and 5-logit heads.

    Output is ``(N, 6)``: column 0 is the gate logit, columns 1..5 the
    disease logits in (AM, CD, MI, QT, HE) order.
    """

    def __init__(self, width: int, out_len: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.width, self.out_len = width, out_len
        self.pool = self.add_child("pool", AdaptiveAvgPool1d(out_len))
        self.shared = self.add_child("shared", Linear(width * out_len, hidden, rng))
        self.relu = self.add_child("relu", ReLU())
        self.binary = self.add_child("binary", Linear(hidden, 1, rng))
        self.multi = self.add_child("multi", Linear(hidden, len(DISEASES), rng))

    def forward(self, x):
        n = x.shape[0]
        flat = self.pool.forward(x).reshape(n, -1)
        h = self.relu.forward(self.shared.forward(flat))
        return np.concatenate([self.binary.forward(h), self.multi.forward(h)], axis=1)

    def backward(self, dy):
        n = dy.shape[0]
        dh = self.binary.backward(dy[:, :1]) + self.multi.backward(dy[:, 1:])
        dflat = self.shared.backward(self.relu.backward(dh))
        return self.pool.backward(dflat.reshape(n, self.width, self.out_len))


def fuse_and_classify(x_gat, x_cbam, x_tst, head: FusionHead, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate enabled attention outputs and run the head; returns (gate logits, disease logits)."""
    parts = [x for x, key in ((x_gat, "gat"), (x_cbam, "cbam"), (x_tst, "tst")) if getattr(cfg, key)]
    if not parts:
        raise ValueError("no attention branch enabled")
    out = head.forward(np.concatenate(parts, axis=1))
    return out[:, 0], out[:, 1:]


class ECGNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        n = cfg.latent_width
        if cfg.exblock:
            self.add_child("exblock", ExBlock(cfg.n_channels, cfg.hidden, cfg.kernel, rng))
        if cfg.gat:
            self.add_child("gat", GATLayer(cfg.seq_len, cfg.gat_heads, rng))
        if cfg.cbam:
            self.add_child("cbam", CBAM(n, cfg.cbam_reduction, cfg.cbam_kernel, rng))
        if cfg.tst:
            self.add_child("tst", TSTBlock(n, cfg.tst_dim, cfg.tst_heads, rng, cfg.pos_encoding))
        self.add_child("head", FusionHead(cfg.fused_width, cfg.adaptive_out, cfg.head_hidden, rng))

    def wavelet_branches(self, x: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        cfg = self.cfg
        mo = morlet_features(x, cfg.wavelet, cfg.rate) if cfg.morlet else None
        db = db4_features(x) if cfg.db4 else None
        return mo, db

    def latent(self, x: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1:] != (cfg.n_channels, cfg.seq_len):
            raise ValueError(f"expected input (N, {cfg.n_channels}, {cfg.seq_len}), got {x.shape}")
        ex = self.children["exblock"].forward(x) if cfg.exblock else None
        mo, db = self.wavelet_branches(x)
        return build_latent(ex, mo, db, cfg.flags())

    def forward(self, x):
        lat = self.latent(np.asarray(x, dtype=np.float64))
        branches = [self.children[key].forward(lat) for key in ("gat", "cbam", "tst") if key in self.children]
        self._widths = [b.shape[1] for b in branches]
        return self.children["head"].forward(np.concatenate(branches, axis=1))

    def backward(self, dy):
        dfused = self.children["head"].backward(dy)
        dlat = None
        start = 0
        for key, width in zip([k for k in ("gat", "cbam", "tst") if k in self.children], self._widths):
            d = self.children[key].backward(dfused[:, start:start + width])
            dlat = d if dlat is None else dlat + d
            start += width
        if self.cfg.exblock:
            self.children["exblock"].backward(dlat[:, :self.cfg.hidden])
        return None

    # -- checkpoints ------------------------------------------------------

    def to_json(self) -> str:
        return dump_state(self.state(), {"model_config": self.cfg.to_dict()})

    @classmethod
    def from_json(cls, text: str, expect: ModelConfig | None = None) -> ECGNet:
        header, tensors = parse_state(text)
        cfg = ModelConfig.from_dict(header["model_config"])
        if expect is not None and expect != cfg:
            raise ValueError("checkpoint model config does not match the requested config")
        model = cls(cfg)
        model.load_state(tensors)
        return model


def count_parameters(model: ECGNet) -> dict[str, int]:
    """Trainable scalars per top-level block plus ``total``; BN running statistics excluded."""
    counts = {name: child.num_parameters() for name, child in model.children.items()}
    counts["total"] = sum(counts.values())
    return counts


def count_flops(cfg: ModelConfig) -> dict[str, int]:
    """Multiply-accumulate count of one forward pass for one record."""
    L, C, H, k = cfg.seq_len, cfg.n_channels, cfg.hidden, cfg.kernel
    n, d = cfg.latent_width, cfg.tst_dim
    out = {}
    if cfg.exblock:
        out["exblock"] = L * k * H * (C + H)
    if cfg.morlet:
        taps = 2 * int(math.floor(cfg.wavelet.support_halfwidth_s * cfg.rate + 1e-9)) + 1
        out["morlet"] = C * L * taps
    if cfg.db4:
        out["db4"] = C * L * 4
    if cfg.gat:
        out["gat"] = cfg.gat_heads * (n * L * L + 2 * n * L + n * n * L)
    if cfg.cbam:
        mid = max(1, n // cfg.cbam_reduction)
        out["cbam"] = 2 * n * mid + 2 * L * cfg.cbam_kernel + 2 * n * L
    if cfg.tst:
        out["tst"] = L * n * d + 4 * L * d * d + 2 * L * L * d
    out["head"] = cfg.fused_width * L + cfg.fused_width * cfg.adaptive_out * cfg.head_hidden \
        + cfg.head_hidden * (1 + len(DISEASES))
    out["total"] = sum(out.values())
    return out

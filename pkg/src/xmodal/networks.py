"""Desk-scale networks: coarse depth per modality, confidence, fusion.

Tiny encoder-decoders stand in for full-size backbones; every mechanism of
the pipeline (separate per-modality coarse networks, confidence gating,
dual-branch fusion with cross-modal multi-head attention and a residual
refinement block) is kept. Downsampling inside the encoders uses bilinear
resize followed by a 3x3 convolution so that every feature extent stays an
exact power-of-two fraction of the input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"XMDW1"
NORM_EPS = 1e-5
LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class CoarseDepthNetConfig:
    in_channels: int
    d_min: float
    d_max: float
    base_channels: int = 16
    levels: int = 3

    def __post_init__(self):
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise ValueError("depth range requires 0 < d_min < d_max")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


@dataclass(frozen=True)
class ConfidenceNetConfig:
    in_channels: int = 6  # RGB image, warped thermal, and both coarse depths
    base_channels: int = 16


@dataclass(frozen=True)
class FusionNetConfig:
    feature_channels: int = 32
    heads: int = 2
    token_downsample: int = 4
    literal_attention_scaling: bool = False

    def __post_init__(self):
        if self.feature_channels % self.heads != 0:
            raise ValueError("feature_channels must be divisible by heads")


class Params:
    """Named collection of trainable tensors for one network."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._tensors: dict[str, Tensor] = {}

    def _add(self, name: str, data: np.ndarray) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._tensors[name] = Tensor(data, requires_grad=True)

    def conv(self, name: str, c_in: int, c_out: int, k: int) -> None:
        """3x3 / 1x1 convolution weights with fan-in-scaled uniform init."""
        s = 1.0 / np.sqrt(c_in * k * k)
        self._add(f"{name}.w", self._rng.uniform(-s, s, size=(c_out, c_in, k, k)))
        self._add(f"{name}.b", np.zeros(c_out))

    def matrix(self, name: str, c_in: int, c_out: int) -> None:
        s = 1.0 / np.sqrt(c_in)
        self._add(name, self._rng.uniform(-s, s, size=(c_in, c_out)))

    def constant(self, name: str, data: np.ndarray) -> None:
        self._add(name, np.asarray(data, dtype=np.float64))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(state)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, t in self._tensors.items():
            t.assign_(state[name])


def _conv(params: Params, name: str, x: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    return ad.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, pad=pad)


def _act(x: Tensor) -> Tensor:
    return ad.leaky_relu(x, LEAKY_SLOPE)


def _ranged_depth(y: Tensor, d_min: float, d_max: float) -> Tensor:
    return ad.sigmoid(y) * (d_max - d_min) + d_min


# -- coarse depth network -----------------------------------------------------


def init_coarse_params(cfg: CoarseDepthNetConfig, seed: int) -> Params:
    p = Params(seed)
    c = cfg.base_channels
    p.conv("enc0", cfg.in_channels, c, 3)
    for i in range(1, cfg.levels + 1):
        p.conv(f"enc{i}", c, c, 3)
    for i in range(cfg.levels - 1, -1, -1):
        p.conv(f"dec{i}", 2 * c, c, 3)
    p.conv("head", c, 1, 3)
    return p


def coarse_forward(params: Params, cfg: CoarseDepthNetConfig, image: Tensor) -> Tensor:
    """Encoder-decoder depth regression; output is [1,H,W] in (d_min, d_max)."""
    if image.data.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ValueError(f"expected [{cfg.in_channels},H,W] input, got {image.shape}")
    _, h, w = image.shape
    step = 2 ** cfg.levels
    if h % step or w % step:
        raise ValueError(f"extents {h}x{w} not divisible by 2^levels = {step}")

    skips = [_act(_conv(params, "enc0", image))]
    x = skips[0]
    for i in range(1, cfg.levels + 1):
        x = ad.bilinear_resize(x, h >> i, w >> i)
        x = _act(_conv(params, f"enc{i}", x))
        if i < cfg.levels:
            skips.append(x)
    for i in range(cfg.levels - 1, -1, -1):
        x = ad.bilinear_resize(x, h >> i, w >> i)
        x = _act(_conv(params, f"dec{i}", ad.concat([x, skips[i]], axis=0)))
    return _ranged_depth(_conv(params, "head", x), cfg.d_min, cfg.d_max)


# -- confidence predictor -----------------------------------------------------


def init_confidence_params(cfg: ConfidenceNetConfig, seed: int) -> Params:
    p = Params(seed)
    c = cfg.base_channels
    p.conv("enc0", cfg.in_channels, c, 3)
    p.conv("enc1", c, c, 3)
    p.conv("enc2", c, c, 3)
    p.conv("dec1", 2 * c, c, 3)
    p.conv("dec0", 2 * c, c, 3)
    p.conv("head", c, 1, 3)
    return p


def confidence_forward(params: Params, cfg: ConfidenceNetConfig,
                       i_rgb: Tensor, i_thr_warped: Tensor,
                       d_rgb: Tensor, d_thr_warped: Tensor,
                       thr_valid: np.ndarray | None,
                       depth_scale: float) -> Tensor:
    """RGB confidence map in (0,1); forced to exactly 1 on warp holes.

    Depth inputs are detached so this network never shapes the coarse
    predictions; they are normalized by depth_scale before stacking.
    """
    h, w = i_rgb.shape[1], i_rgb.shape[2]
    for t in (i_thr_warped, d_rgb, d_thr_warped):
        if t.data.shape[-2:] != (h, w):
            raise ValueError("confidence inputs must share the RGB extents")
    scale = 1.0 / depth_scale
    x = ad.concat([
        i_rgb,
        ad.reshape(i_thr_warped, (1, h, w)),
        ad.reshape(d_rgb.detach(), (1, h, w)) * scale,
        ad.reshape(d_thr_warped.detach(), (1, h, w)) * scale,
    ], axis=0)
    if x.shape[0] != cfg.in_channels:
        raise ValueError(f"stacked inputs have {x.shape[0]} channels, "
                         f"config expects {cfg.in_channels}")
    if h % 4 or w % 4:
        raise ValueError("extents must be divisible by 4")

    e0 = _act(_conv(params, "enc0", x))
    e1 = _act(_conv(params, "enc1", ad.bilinear_resize(e0, h >> 1, w >> 1)))
    e2 = _act(_conv(params, "enc2", ad.bilinear_resize(e1, h >> 2, w >> 2)))
    d1 = _act(_conv(params, "dec1", ad.concat([ad.bilinear_resize(e2, h >> 1, w >> 1), e1], 0)))
    d0 = _act(_conv(params, "dec0", ad.concat([ad.bilinear_resize(d1, h, w), e0], 0)))
    c_pred = ad.sigmoid(_conv(params, "head", d0))

    if thr_valid is None:
        return c_pred
    m = Tensor(thr_valid.astype(np.float64).reshape(1, h, w))
    return c_pred * m + (1.0 - m)


# -- fusion network -----------------------------------------------------------


def init_fusion_params(cfg: FusionNetConfig, seed: int,
                       rgb_image_channels: int = 3, thr_image_channels: int = 1) -> Params:
    p = Params(seed)
    c = cfg.feature_channels
    p.conv("rgb_in", rgb_image_channels + 1, c, 3)
    p.conv("rgb_ffn1", c, c, 1)
    p.conv("rgb_ffn2", c, c, 1)
    p.conv("thr_in", thr_image_channels + 1, c, 3)
    p.conv("thr_ffn1", c, c, 1)
    p.conv("thr_ffn2", c, c, 1)
    for branch in ("rgb", "thr"):
        p.matrix(f"att.q_{branch}", c, c)
        p.matrix(f"att.k_{branch}", c, c)
        p.matrix(f"att.v_{branch}", c, c)
        p.matrix(f"att.out_{branch}", c, c)
    p.conv("res_reduce", 2 * c, c, 3)
    p.constant("res_norm.gamma", np.ones((c, 1, 1)))
    p.constant("res_norm.beta", np.zeros((c, 1, 1)))
    p.conv("res_conv", c, c, 3)
    p.conv("res_skip", 2 * c, c, 1)
    p.conv("head", c, 1, 3)
    return p


def fusion_branch_features(params: Params, branch: str, image: Tensor,
                           depth: Tensor, confidence: Tensor,
                           depth_scale: float) -> Tensor:
    """Confidence-gated branch features: FFN(conv(cat(image, depth)) * C)."""
    if branch not in ("rgb", "thr"):
        raise ValueError("branch must be 'rgb' or 'thr'")
    h, w = image.shape[1], image.shape[2]
    if depth.data.shape[-2:] != (h, w) or confidence.data.shape[-2:] != (h, w):
        raise ValueError("branch inputs must share extents")
    x = ad.concat([image, ad.reshape(depth, (1, h, w)) * (1.0 / depth_scale)], axis=0)
    f = _conv(params, f"{branch}_in", x)
    f = f * ad.reshape(confidence, (1, h, w))
    f = _conv(params, f"{branch}_ffn2", _act(_conv(params, f"{branch}_ffn1", f, pad=0)), pad=0)
    return f


def _to_tokens(f: Tensor, hs: int, ws: int) -> Tensor:
    c = f.shape[0]
    g = ad.bilinear_resize(f, hs, ws)
    return ad.transpose2d(ad.reshape(g, (c, hs * ws)))


def _from_tokens(tok: Tensor, c: int, hs: int, ws: int, h: int, w: int) -> Tensor:
    f = ad.reshape(ad.transpose2d(tok), (c, hs, ws))
    return ad.bilinear_resize(f, h, w)


def _cross_attend(q_tok: Tensor, k_tok: Tensor, v_tok: Tensor, heads: int,
                  scale: float) -> Tensor:
    c = q_tok.shape[1]
    dh = c // heads
    outs = []
    for i in range(heads):
        qh = ad.slice_axis(q_tok, 1, i * dh, (i + 1) * dh)
        kh = ad.slice_axis(k_tok, 1, i * dh, (i + 1) * dh)
        vh = ad.slice_axis(v_tok, 1, i * dh, (i + 1) * dh)
        logits = ad.matmul(qh, ad.transpose2d(kh)) * scale
        attn = ad.softmax(logits, axis=1)
        outs.append(ad.matmul(attn, vh))
    return ad.concat(outs, axis=1)


def fusion_attention(params: Params, f_rgb: Tensor, f_thr: Tensor,
                     cfg: FusionNetConfig) -> tuple[Tensor, Tensor]:
    """Cross-modal multi-head attention over spatially downsampled tokens.

    Queries and keys come from one branch and values from the other, both
    ways. Attention logits are scaled by 1/sqrt(head_dim) unless the config
    asks for the literal unscaled product.
    """
    if f_rgb.shape != f_thr.shape:
        raise ValueError("branch features must share shape")
    c, h, w = f_rgb.shape
    if c % cfg.heads:
        raise ValueError("channels not divisible by heads")
    ds = cfg.token_downsample
    hs, ws = max(1, h // ds), max(1, w // ds)
    scale = 1.0 if cfg.literal_attention_scaling else 1.0 / np.sqrt(c / cfg.heads)

    tok_rgb = _to_tokens(f_rgb, hs, ws)
    tok_thr = _to_tokens(f_thr, hs, ws)

    q1 = ad.matmul(tok_rgb, params["att.q_rgb"])
    k1 = ad.matmul(tok_rgb, params["att.k_rgb"])
    v2 = ad.matmul(tok_thr, params["att.v_thr"])
    q2 = ad.matmul(tok_thr, params["att.q_thr"])
    k2 = ad.matmul(tok_thr, params["att.k_thr"])
    v1 = ad.matmul(tok_rgb, params["att.v_rgb"])

    o_rgb = ad.matmul(_cross_attend(q1, k1, v2, cfg.heads, scale), params["att.out_rgb"])
    o_thr = ad.matmul(_cross_attend(q2, k2, v1, cfg.heads, scale), params["att.out_thr"])
    return (_from_tokens(o_rgb, c, hs, ws, h, w),
            _from_tokens(o_thr, c, hs, ws, h, w))


def _channel_norm(params: Params, x: Tensor) -> Tensor:
    n = x.shape[1] * x.shape[2]
    mu = ad.sum_axes(x, (1, 2), keepdims=True) * (1.0 / n)
    centered = x - mu
    var = ad.sum_axes(centered * centered, (1, 2), keepdims=True) * (1.0 / n)
    normed = centered / ad.sqrt(var + NORM_EPS)
    return normed * params["res_norm.gamma"] + params["res_norm.beta"]


def fusion_forward(params: Params, cfg: FusionNetConfig,
                   i_rgb: Tensor, i_thr_warped: Tensor,
                   d_rgb: Tensor, d_thr_warped: Tensor,
                   c_rgb: Tensor, c_thr: Tensor,
                   d_min: float, d_max: float) -> Tensor:
    """Fused depth map [1,H,W] with values inside (d_min, d_max)."""
    h, w = i_rgb.shape[1], i_rgb.shape[2]
    f_rgb = fusion_branch_features(params, "rgb", i_rgb, d_rgb, c_rgb, d_max)
    f_thr = fusion_branch_features(params, "thr", i_thr_warped, d_thr_warped, c_thr, d_max)
    a_rgb, a_thr = fusion_attention(params, f_rgb, f_thr, cfg)
    x = ad.concat([a_rgb, a_thr], axis=0)
    body = _conv(params, "res_conv", _act(_channel_norm(params, _conv(params, "res_reduce", x))))
    r = body + _conv(params, "res_skip", x, pad=0)
    r = ad.bilinear_resize(r, h, w)
    return _ranged_depth(_conv(params, "head", r), d_min, d_max)


# -- checkpoint codec ---------------------------------------------------------


def save_checkpoint(path, named_arrays: dict[str, np.ndarray]) -> None:
    """Write parameters in the versioned binary layout, sorted by name."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name in sorted(named_arrays):
            arr = np.ascontiguousarray(named_arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a parameter checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        out[name] = arr.astype(np.float64)
    return out

"""Per-view residual CNN encoder, patch tokenization and the preoperative VA token.

Each view image (H x W, grayscale) goes through ``log2(downsample_factor)``
residual stages, each halving the resolution, and a final 1x1 projection to
the token width D.  The result is a P1 x P2 x D feature map, P1 = H / factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

VA_MAX = 1.5


@dataclass(frozen=True)
class EncoderConfig:
    image_size: tuple[int, int] = (64, 64)
    downsample_factor: int = 32
    channels: tuple[int, ...] = (8, 16, 16, 32, 32)
    token_dim: int = 32

    def __post_init__(self):
        f = self.downsample_factor
        if f < 2 or f & (f - 1):
            raise ValueError(f"downsample_factor must be a power of two >= 2, got {f}")
        H, W = self.image_size
        if H % f or W % f:
            raise ValueError(f"image size {H}x{W} not divisible by downsample factor {f}")
        if len(self.channels) != self.num_stages:
            raise ValueError(
                f"channel schedule needs {self.num_stages} entries for factor {f}, got {len(self.channels)}"
            )
        if self.token_dim < 1:
            raise ValueError("token_dim must be positive")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def grid(self) -> tuple[int, int]:
        H, W = self.image_size
        return H // self.downsample_factor, W // self.downsample_factor

    @property
    def num_patches(self) -> int:
        p1, p2 = self.grid
        return p1 * p2


@dataclass
class ViewFeatureMap:
    """Encoder output for a batch: values has shape (B, P1, P2, D)."""

    values: Tensor


RELU_GAIN = math.sqrt(6.0)  # Kaiming-uniform bound factor for layers feeding a ReLU


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0) -> Tensor:
    """U(-gain / sqrt(fan_in), gain / sqrt(fan_in))."""
    bound = gain / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    cin = 1
    for s, cout in enumerate(cfg.channels):
        base = f"{prefix}/stage{s}"
        params[f"{base}/conv1/w"] = fan_in_uniform(rng, (3, 3, cin, cout), 9 * cin, RELU_GAIN)
        params[f"{base}/conv1/b"] = Tensor(np.zeros(cout))
        params[f"{base}/conv2/w"] = fan_in_uniform(rng, (3, 3, cout, cout), 9 * cout, RELU_GAIN)
        params[f"{base}/conv2/b"] = Tensor(np.zeros(cout))
        params[f"{base}/skip/w"] = fan_in_uniform(rng, (1, 1, cin, cout), cin, RELU_GAIN)
        params[f"{base}/skip/b"] = Tensor(np.zeros(cout))
        cin = cout
    params[f"{prefix}/proj/w"] = fan_in_uniform(rng, (cin, cfg.token_dim), cin)
    params[f"{prefix}/proj/b"] = Tensor(np.zeros(cfg.token_dim))
    return params


def encode_view(image, params: dict[str, Tensor], cfg: EncoderConfig, prefix: str) -> ViewFeatureMap:
    """Encode a batch of images (B, H, W) or a single image (H, W)."""
    x = T.as_tensor(image)
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1:] != tuple(cfg.image_size):
        raise ValueError(f"image extents {x.shape[1:]} do not match config {cfg.image_size}")
    h = T.reshape(x, x.shape + (1,))
    for s in range(cfg.num_stages):
        base = f"{prefix}/stage{s}"
        y = T.relu(T.conv2d(h, params[f"{base}/conv1/w"], stride=2, padding=1) + params[f"{base}/conv1/b"])
        y = T.conv2d(y, params[f"{base}/conv2/w"], stride=1, padding=1) + params[f"{base}/conv2/b"]
        skip = T.conv2d(h, params[f"{base}/skip/w"], stride=2, padding=0) + params[f"{base}/skip/b"]
        h = T.relu(y + skip)
    return ViewFeatureMap(_project(h, params, prefix))


def _project(h: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    B, p1, p2, c = h.shape
    flat = T.reshape(h, (B, p1 * p2, c))
    out = T.matmul(flat, params[f"{prefix}/proj/w"]) + params[f"{prefix}/proj/b"]
    return T.reshape(out, (B, p1, p2, out.shape[-1]))


def tokenize(fm: ViewFeatureMap) -> Tensor:
    """Row-major flattening (B, P1, P2, D) -> (B, P1*P2, D); cell (i, j) lands at i*P2 + j."""
    v = fm.values
    B, p1, p2, d = v.shape
    return T.reshape(v, (B, p1 * p2, d))


def untokenize(tokens: Tensor, grid: tuple[int, int]) -> ViewFeatureMap:
    B, _, d = tokens.shape
    return ViewFeatureMap(T.reshape(tokens, (B,) + tuple(grid) + (d,)))


def init_va_embedder(dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "va/w": fan_in_uniform(rng, (dim,), 1),
        "va/b": Tensor(np.zeros(dim)),
    }


def embed_preop_va(x, params: dict[str, Tensor], va_max: float = VA_MAX) -> Tensor:
    """Affine scalar -> D map producing the VA token, shape (B, D)."""
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(xs)) or xs.min() < 0.0 or xs.max() > va_max:
        raise ValueError(f"preoperative VA must lie in [0, {va_max}]")
    col = Tensor(xs.reshape(-1, 1))
    w = params["va/w"]
    return T.matmul(col, T.reshape(w, (1, w.shape[0]))) + params["va/b"]

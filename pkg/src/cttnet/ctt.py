"""Cross-token transformer and the fusion baselines it is compared against.

Per view, the token sequence is ``[reg, va, patch_1 .. patch_P, ctn]``.  Layers
before ``cross_layer_start`` run each view's stream in isolation; later layers
exchange only the cross-token (``ctn``) between the two streams:

    step 1:  hor stream sees [hor tokens | ver ctn],  ver stream sees [ver tokens | hor ctn]
    step 2:  the ctn tokens are swapped back and each stream runs again on its
             restored sequence.

All parameters live in one flat ``dict`` keyed by a canonical path such as
``hor/layer3/step1/msa/wq``; that dict is what the optimizer, the gradient
checker and checkpoints operate on.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, embed_preop_va, encode_view, fan_in_uniform, init_encoder, init_va_embedder, tokenize
from .tensor import Tensor

CHECKPOINT_FORMAT = "cttnet-checkpoint"
CHECKPOINT_VERSION = 1
TOKEN_STD = 0.02


class FusionMode(str, Enum):
    SINGLE_HOR = "single_hor"
    SINGLE_VER = "single_ver"
    LATE_NO_ATTENTION = "late_no_attention"
    FULL_ATTENTION = "full_attention"
    CROSS_TOKEN = "cross_token"

    @property
    def views(self) -> tuple[str, ...]:
        if self is FusionMode.SINGLE_HOR:
            return ("hor",)
        if self is FusionMode.SINGLE_VER:
            return ("ver",)
        return ("hor", "ver")


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    downsample_factor: int = 32
    channels: tuple[int, ...] = (8, 16, 16, 32, 32)
    dim: int = 32
    layers: int = 4
    heads: int = 2
    cross_layer_start: int = 2
    ffn_mult: int = 4
    fusion: FusionMode = FusionMode.CROSS_TOKEN
    use_preop_va: bool = True
    share_cross_steps: bool = False
    positional: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "fusion", FusionMode(self.fusion))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide dim={self.dim}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0 <= self.cross_layer_start <= self.layers:
            raise ValueError(f"cross_layer_start must lie in [0, {self.layers}]")
        if self.ffn_mult < 1:
            raise ValueError("ffn_mult must be >= 1")
        self.encoder  # validates geometry

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.downsample_factor, self.channels, self.dim)

    @property
    def num_patches(self) -> int:
        return self.encoder.num_patches

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        d["image_size"] = list(self.image_size)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def is_cross_layer(self, layer: int) -> bool:
        return self.fusion is FusionMode.CROSS_TOKEN and layer >= self.cross_layer_start


@dataclass
class TokenSequence:
    """A batch of per-view sequences laid out as [reg, va, patches..., ctn]."""

    tokens: Tensor  # (B, P + 3, D)

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def reg(self) -> Tensor:
        return self.tokens[:, 0]

    @property
    def va(self) -> Tensor:
        return self.tokens[:, 1]

    @property
    def patches(self) -> Tensor:
        return self.tokens[:, 2:-1]

    @property
    def ctn(self) -> Tensor:
        return self.tokens[:, -1]


# -- parameters --------------------------------------------------------------

def init_layer(dim: int, ffn_mult: int, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    hidden = ffn_mult * dim
    p: dict[str, Tensor] = {}
    p[f"{prefix}/ln1/gamma"] = Tensor(np.ones(dim))
    p[f"{prefix}/ln1/beta"] = Tensor(np.zeros(dim))
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}/msa/{name}"] = fan_in_uniform(rng, (dim, dim), dim)
        p[f"{prefix}/msa/b{name[1]}"] = Tensor(np.zeros(dim))
    p[f"{prefix}/ln2/gamma"] = Tensor(np.ones(dim))
    p[f"{prefix}/ln2/beta"] = Tensor(np.zeros(dim))
    p[f"{prefix}/ffn/w1"] = fan_in_uniform(rng, (dim, hidden), dim)
    p[f"{prefix}/ffn/b1"] = Tensor(np.zeros(hidden))
    p[f"{prefix}/ffn/w2"] = fan_in_uniform(rng, (hidden, dim), hidden)
    p[f"{prefix}/ffn/b2"] = Tensor(np.zeros(dim))
    return p


def layer_prefixes(cfg: ModelConfig, stream: str, layer: int) -> tuple[str, str]:
    """Parameter prefixes used by (step 1, step 2) of a layer; plain layers return the same twice."""
    base = f"{stream}/layer{layer}"
    if not cfg.is_cross_layer(layer):
        return base, base
    if cfg.share_cross_steps:
        return f"{base}/step1", f"{base}/step1"
    return f"{base}/step1", f"{base}/step2"


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    D, P = cfg.dim, cfg.num_patches
    mode = cfg.fusion
    params: dict[str, Tensor] = {}
    for view in mode.views:
        params.update(init_encoder(cfg.encoder, rng, f"enc/{view}"))
    if cfg.use_preop_va:
        params.update(init_va_embedder(D, rng))
    else:
        params["va/null"] = Tensor(rng.normal(0.0, TOKEN_STD, D))

    seq_len = P + 2 if mode is FusionMode.FULL_ATTENTION else P + 3
    for view in mode.views:
        params[f"{view}/reg"] = Tensor(rng.normal(0.0, TOKEN_STD, D))
        if mode is not FusionMode.FULL_ATTENTION:
            params[f"{view}/ctn"] = Tensor(rng.normal(0.0, TOKEN_STD, D))
        if cfg.positional:
            params[f"{view}/pos"] = Tensor(rng.normal(0.0, TOKEN_STD, (seq_len, D)))

    streams = ("joint",) if mode is FusionMode.FULL_ATTENTION else mode.views
    for stream in streams:
        for layer in range(cfg.layers):
            for prefix in dict.fromkeys(layer_prefixes(cfg, stream, layer)):
                params.update(init_layer(D, cfg.ffn_mult, rng, prefix))

    if mode is FusionMode.LATE_NO_ATTENTION:
        for view in mode.views:
            params[f"head/{view}/w"] = fan_in_uniform(rng, (D, 1), D)
            params[f"head/{view}/b"] = Tensor(np.zeros(1))
    else:
        width = D * len(mode.views)
        params["head/w"] = fan_in_uniform(rng, (width, 1), width)
        params["head/b"] = Tensor(np.zeros(1))
    return params


# -- building blocks ---------------------------------------------------------

def assemble_sequence(
    patches: Tensor,
    va_token: Tensor,
    params: dict[str, Tensor],
    stream: str,
    with_ctn: bool = True,
) -> TokenSequence:
    """Build ``[reg, va, patches..., ctn]`` (or without ctn) and add positional embeddings."""
    B, P, D = patches.shape
    if va_token.shape != (B, D):
        raise ValueError(f"va token shape {va_token.shape} does not match patches {patches.shape}")
    reg = params[f"{stream}/reg"]
    if reg.shape != (D,):
        raise ValueError(f"token width mismatch: patches D={D}, reg {reg.shape}")
    parts = [T.expand(reg, (B, 1, D)), T.reshape(va_token, (B, 1, D)), patches]
    if with_ctn:
        parts.append(T.expand(params[f"{stream}/ctn"], (B, 1, D)))
    z = T.concat(parts, axis=1)
    pos = params.get(f"{stream}/pos")
    if pos is not None:
        z = z + pos
    return TokenSequence(z)


def multi_head_attention(h: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    B, L, D = h.shape
    dh = D // heads

    def split(name: str) -> Tensor:
        x = T.matmul(h, params[f"{prefix}/msa/w{name}"]) + params[f"{prefix}/msa/b{name}"]
        return T.transpose(T.reshape(x, (B, L, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    o = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, L, D))
    return T.matmul(o, params[f"{prefix}/msa/wo"]) + params[f"{prefix}/msa/bo"]


def encoder_layer(z: Tensor, params: dict[str, Tensor], prefix: str, heads: int, eps: float = 1e-5) -> Tensor:
    """Pre-norm layer: y = MSA(LN(z)) + z;  out = FFN(LN(y)) + y."""
    h = T.layer_norm(z, params[f"{prefix}/ln1/gamma"], params[f"{prefix}/ln1/beta"], eps)
    y = multi_head_attention(h, params, prefix, heads) + z
    h = T.layer_norm(y, params[f"{prefix}/ln2/gamma"], params[f"{prefix}/ln2/beta"], eps)
    f = T.gelu(T.matmul(h, params[f"{prefix}/ffn/w1"]) + params[f"{prefix}/ffn/b1"])
    f = T.matmul(f, params[f"{prefix}/ffn/w2"]) + params[f"{prefix}/ffn/b2"]
    return f + y


def _swap_ctn(own: Tensor, other: Tensor) -> Tensor:
    return T.concat([own[:, :-1], other[:, -1:]], axis=1)


def cross_token_step1(z_hor: Tensor, z_ver: Tensor, params, cfg: ModelConfig, layer: int) -> tuple[Tensor, Tensor]:
    """Each stream processes its own tokens plus the *other* view's cross-token.

    Returns the temporary sequences ``[hor tokens | ver ctn]`` and
    ``[ver tokens | hor ctn]`` after one pass of each stream's step-1 layer.
    """
    if z_hor.shape != z_ver.shape:
        raise ValueError(f"sequence length mismatch: {z_hor.shape} vs {z_ver.shape}")
    hor1, _ = layer_prefixes(cfg, "hor", layer)
    ver1, _ = layer_prefixes(cfg, "ver", layer)
    zh = encoder_layer(_swap_ctn(z_hor, z_ver), params, hor1, cfg.heads, cfg.ln_eps)
    zv = encoder_layer(_swap_ctn(z_ver, z_hor), params, ver1, cfg.heads, cfg.ln_eps)
    return zh, zv


def cross_token_layer(z_hor: Tensor, z_ver: Tensor, params, cfg: ModelConfig, layer: int) -> tuple[Tensor, Tensor]:
    """Two-step cross-token exchange; ctn returns to its own stream for step 2."""
    zh, zv = cross_token_step1(z_hor, z_ver, params, cfg, layer)
    _, hor2 = layer_prefixes(cfg, "hor", layer)
    _, ver2 = layer_prefixes(cfg, "ver", layer)
    # after step 1, hor's ctn sits at the end of zv and ver's ctn at the end of zh
    out_h = encoder_layer(_swap_ctn(zh, zv), params, hor2, cfg.heads, cfg.ln_eps)
    out_v = encoder_layer(_swap_ctn(zv, zh), params, ver2, cfg.heads, cfg.ln_eps)
    return out_h, out_v


def run_stream(z: Tensor, params, cfg: ModelConfig, stream: str, layers: range) -> Tensor:
    for layer in layers:
        z = encoder_layer(z, params, f"{stream}/layer{layer}", cfg.heads, cfg.ln_eps)
    return z


# -- model -------------------------------------------------------------------

class CttModel:
    """Configuration plus the flat parameter dict for one fusion mode."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "CttModel":
        return cls(cfg, init_params(cfg, seed))

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "CttModel":
        return CttModel(self.cfg, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def __call__(self, hor, ver, pre_va) -> Tensor:
        return forward(self, hor, ver, pre_va)

    def predict(self, hor, ver, pre_va, batch_size: int = 64) -> np.ndarray:
        n = len(pre_va)
        out = [
            forward(self, hor[i : i + batch_size], ver[i : i + batch_size], pre_va[i : i + batch_size]).data
            for i in range(0, n, batch_size)
        ]
        return np.concatenate(out) if out else np.zeros(0)


def _va_tokens(model: CttModel, pre_va, batch: int) -> Tensor:
    p = model.params
    if model.cfg.use_preop_va:
        return embed_preop_va(pre_va, p)
    return T.expand(p["va/null"], (batch, model.cfg.dim))


def _head(x: Tensor, params, prefix: str) -> Tensor:
    out = T.matmul(x, params[f"{prefix}/w"]) + params[f"{prefix}/b"]
    return T.reshape(out, (out.shape[0],))


def forward(model: CttModel, hor, ver, pre_va, mode: Optional[FusionMode] = None) -> Tensor:
    """Predict postoperative VA for a batch; returns a (B,) tensor."""
    cfg, p = model.cfg, model.params
    if mode is not None and FusionMode(mode) is not cfg.fusion:
        raise ValueError(f"model was built for {cfg.fusion.value}, not {FusionMode(mode).value}")
    mode = cfg.fusion
    pre = np.atleast_1d(np.asarray(pre_va, dtype=np.float64))
    B = pre.shape[0]
    va = _va_tokens(model, pre, B)
    images = {"hor": hor, "ver": ver}
    patches = {v: tokenize(encode_view(images[v], p, cfg.encoder, f"enc/{v}")) for v in mode.views}
    for v, tok in patches.items():
        if tok.shape[0] != B:
            raise ValueError(f"{v} batch {tok.shape[0]} does not match preop VA batch {B}")
    all_layers = range(cfg.layers)

    if mode in (FusionMode.SINGLE_HOR, FusionMode.SINGLE_VER):
        (view,) = mode.views
        z = run_stream(assemble_sequence(patches[view], va, p, view).tokens, p, cfg, view, all_layers)
        return _head(z[:, 0], p, "head")

    if mode is FusionMode.LATE_NO_ATTENTION:
        outs = []
        for view in mode.views:
            z = run_stream(assemble_sequence(patches[view], va, p, view).tokens, p, cfg, view, all_layers)
            outs.append(_head(z[:, 0], p, f"head/{view}"))
        return T.scale(outs[0] + outs[1], 0.5)

    if mode is FusionMode.FULL_ATTENTION:
        zh = assemble_sequence(patches["hor"], va, p, "hor", with_ctn=False).tokens
        zv = assemble_sequence(patches["ver"], va, p, "ver", with_ctn=False).tokens
        n = zh.shape[1]
        z = run_stream(T.concat([zh, zv], axis=1), p, cfg, "joint", all_layers)
        return _head(T.concat([z[:, 0], z[:, n]], axis=1), p, "head")

    zh = assemble_sequence(patches["hor"], va, p, "hor").tokens
    zv = assemble_sequence(patches["ver"], va, p, "ver").tokens
    for layer in all_layers:
        if cfg.is_cross_layer(layer):
            zh, zv = cross_token_layer(zh, zv, p, cfg, layer)
        else:
            zh = encoder_layer(zh, p, f"hor/layer{layer}", cfg.heads, cfg.ln_eps)
            zv = encoder_layer(zv, p, f"ver/layer{layer}", cfg.heads, cfg.ln_eps)
    return _head(T.concat([zh[:, 0], zv[:, 0]], axis=1), p, "head")


# -- attention-flow accounting -----------------------------------------------

@dataclass(frozen=True)
class LayerFlow:
    """Attention-matrix cells of one layer, summed over streams, for ONE attention pass.

    ``steps`` is the number of passes the layer performs (2 for cross-token
    layers), so layer totals are ``steps * cross_view_edges``.
    """

    layer: int
    kind: str
    steps: int
    intra_view_edges: int
    cross_view_edges: int

    @property
    def total_cross_view_edges(self) -> int:
        return self.steps * self.cross_view_edges


def count_attention_flow(cfg: ModelConfig, mode: Optional[FusionMode] = None) -> list[LayerFlow]:
    """Closed-form count of attention cells by the view their query/key tokens come from.

    A cell is cross-view when either endpoint was last written by the other
    view's stream (for the joint full-attention matrix: when the two
    endpoints come from different views).
    """
    mode = FusionMode(mode) if mode is not None else cfg.fusion
    P = cfg.num_patches
    own = P + 3
    flows = []
    for layer in range(cfg.layers):
        if mode in (FusionMode.SINGLE_HOR, FusionMode.SINGLE_VER):
            flows.append(LayerFlow(layer, "single", 1, own * own, 0))
        elif mode is FusionMode.LATE_NO_ATTENTION:
            flows.append(LayerFlow(layer, "separate", 1, 2 * own * own, 0))
        elif mode is FusionMode.FULL_ATTENTION:
            n = P + 2
            flows.append(LayerFlow(layer, "joint", 1, 2 * n * n, 2 * n * n))
        elif layer >= cfg.cross_layer_start:
            foreign = 2 * own - 1
            flows.append(LayerFlow(layer, "cross", 2, 2 * (own * own - foreign), 2 * foreign))
        else:
            flows.append(LayerFlow(layer, "plain", 1, 2 * own * own, 0))
    return flows


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: CttModel, extra: Optional[dict] = None) -> Path:
    """Write a JSON checkpoint: canonical parameter path -> shape + row-major values."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in model.params.items()
        },
    }
    if extra:
        doc["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path) -> CttModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")
    cfg = ModelConfig.from_dict(doc["model_config"])
    reference = init_params(cfg, 0)
    stored = doc["params"]
    if set(stored) != set(reference):
        missing = sorted(set(reference) - set(stored))
        extra = sorted(set(stored) - set(reference))
        raise ValueError(f"{path}: parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    params = {}
    for name, ref in reference.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if shape != ref.shape or values.size != ref.size:
            raise ValueError(f"{path}: {name} has shape {shape}, expected {ref.shape}")
        params[name] = Tensor(values.reshape(shape))
    return CttModel(cfg, params)

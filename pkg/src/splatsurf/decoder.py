"""Toy-scale multi-branch transformer that maps N images to per-view predictions.

Forward only, random weights. The network has four stages.

* A shared patch encoder turns every image into a grid of tokens.
* M branches each anchor one reference view. In every layer a view attends
  to itself and then to all other views of its branch, with separate weight
  sets for the branch's reference view and for its source views.
* A fusion block then lets each view's tokens in one branch attend to the
  same view's tokens in every other branch.
* Linear patch heads emit a pointmap, confidence, scales, rotations and
  opacity for each pixel.

No positional or view-index code is attached to secondary tokens, so
attention over a set of views does not depend on the order of that set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .numerics import EPS_SCALE, InvalidInputError

PATCH = 16
HEAD_CHANNELS = 12  # P(3) Q(1) S(3) q(4) alpha(1)
WEIGHTS_MAGIC = b"S3RW"
WEIGHTS_VERSION = 1
ROLES = ("ref", "src")
_EXP_CLIP = 80.0


@dataclass
class DecoderConfig:
    n_views: int = 4
    n_branches: int = 2
    n_layers: int = 2
    dim: int = 32
    n_heads: int = 4
    encoder_blocks: int = 2
    ffn_mult: int = 2
    height: int = 64
    width: int = 64
    patch: int = PATCH
    scale_eps: float = EPS_SCALE
    seed: int = 0

    def validate(self) -> None:
        if self.n_views < 1:
            raise InvalidInputError("n_views must be >= 1")
        if not 1 <= self.n_branches <= self.n_views:
            raise InvalidInputError("n_branches must satisfy 1 <= M <= N")
        if self.n_layers < 1:
            raise InvalidInputError("n_layers must be >= 1")
        if self.dim % self.n_heads:
            raise InvalidInputError("dim must be divisible by n_heads")
        if self.patch != PATCH:
            raise InvalidInputError(f"patch size is fixed at {PATCH}")
        if self.height % self.patch or self.width % self.patch:
            raise InvalidInputError("image size must be divisible by the patch size")

    @property
    def grid(self) -> tuple:
        return self.height // self.patch, self.width // self.patch


@dataclass
class TokenGrid:
    view: int
    branch: int
    layer: int
    tokens: np.ndarray  # (h*w, C)
    grid: tuple

    def __post_init__(self):
        if self.tokens.shape[0] != self.grid[0] * self.grid[1]:
            raise InvalidInputError("token count does not match grid")


@dataclass
class PerViewPrediction:
    pointmap: np.ndarray
    confidence: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray

    def violations(self, scale_eps: float = EPS_SCALE, tol: float = 1e-6) -> list:
        """Names of range contracts that do not hold (empty when all hold)."""
        bad = []
        for name in ("pointmap", "confidence", "scales", "quats", "opacity"):
            if not np.all(np.isfinite(getattr(self, name))):
                bad.append(f"{name} not finite")
        if np.any(self.confidence < 1):
            bad.append("confidence < 1")
        if np.any(self.scales < scale_eps):
            bad.append("scale below floor")
        if np.any(np.abs(np.linalg.norm(self.quats, axis=-1) - 1) > tol):
            bad.append("quaternion not unit")
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            bad.append("opacity outside [0, 1]")
        return bad


@dataclass
class DecoderOutput:
    predictions: list
    tokens: list = field(default_factory=list)  # tokens[d][m][v], d = 0 .. D


# Weights ---------------------------------------------------------------------


def _attn_names(prefix):
    return [f"{prefix}.{k}" for k in ("wq", "wk", "wv", "wo")]


def _weight_shapes(cfg: DecoderConfig) -> dict:
    C, F = cfg.dim, cfg.dim * cfg.ffn_mult
    h, w = cfg.grid
    shapes = {"embed.w": (PATCH * PATCH * 3, C), "embed.b": (C,), "embed.pos": (h * w, C)}

    def norm(prefix):
        shapes[f"{prefix}.g"] = (C,)
        shapes[f"{prefix}.b"] = (C,)

    def attn(prefix):
        for n in _attn_names(prefix):
            shapes[n] = (C, C)

    def ffn(prefix):
        shapes.update({f"{prefix}.w1": (C, F), f"{prefix}.b1": (F,),
                       f"{prefix}.w2": (F, C), f"{prefix}.b2": (C,)})

    for k in range(cfg.encoder_blocks):
        p = f"enc{k}"
        norm(f"{p}.ln1"); attn(f"{p}.self"); norm(f"{p}.ln2"); ffn(f"{p}.ffn")
    for d in range(cfg.n_layers):
        for role in ROLES:
            p = f"fr{d}.{role}"
            norm(f"{p}.ln1"); attn(f"{p}.self")
            norm(f"{p}.lnq"); norm(f"{p}.lnkv"); attn(f"{p}.cross")
            norm(f"{p}.ln3"); ffn(f"{p}.ffn")
        p = f"crf{d}"
        norm(f"{p}.lnq"); norm(f"{p}.lnkv"); attn(f"{p}.cross")
        norm(f"{p}.ln2"); ffn(f"{p}.ffn")
    for role in ROLES:
        shapes[f"head.{role}.w"] = (C, PATCH * PATCH * HEAD_CHANNELS)
        shapes[f"head.{role}.b"] = (PATCH * PATCH * HEAD_CHANNELS,)
    return shapes


def init_weights(cfg: DecoderConfig) -> dict:
    """Seeded float32 weights: scaled normals for matrices, unit gains, zero biases."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    weights = {}
    for name, shape in _weight_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            fan_in = shape[0]
            arr = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        weights[name] = arr.astype(np.float32)
    weights["embed.pos"] = (0.02 * rng.normal(size=weights["embed.pos"].shape)).astype(np.float32)
    return weights


def save_weights(path, weights: dict) -> None:
    """Write the little-endian named-array container (float32 payloads)."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        for name in sorted(weights):
            arr = np.ascontiguousarray(weights[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise InvalidInputError("not a weight file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != WEIGHTS_VERSION:
        raise InvalidInputError(f"unsupported weight file version {version}")
    pos = 8
    weights = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise InvalidInputError(f"truncated array {name!r}")
            weights[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise InvalidInputError("truncated weight file") from exc
    return weights


# Building blocks -------------------------------------------------------------


def _layer_norm(x, W, prefix, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * W[f"{prefix}.g"] + W[f"{prefix}.b"]


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _attention(xq, xkv, W, prefix, n_heads):
    wq, wk, wv, wo = (W[n] for n in _attn_names(prefix))
    C = xq.shape[-1]
    hd = C // n_heads
    q = (xq @ wq).reshape(-1, n_heads, hd).transpose(1, 0, 2)
    k = (xkv @ wk).reshape(-1, n_heads, hd).transpose(1, 0, 2)
    v = (xkv @ wv).reshape(-1, n_heads, hd).transpose(1, 0, 2)
    att = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(hd))
    out = (att @ v).transpose(1, 0, 2).reshape(-1, C)
    return out @ wo


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _ffn(x, W, prefix):
    h = _gelu(x @ W[f"{prefix}.w1"] + W[f"{prefix}.b1"])
    return h @ W[f"{prefix}.w2"] + W[f"{prefix}.b2"]


def _as64(weights):
    return {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}


def encode(images, cfg: DecoderConfig, weights: dict) -> list:
    """Patch-embed every image with shared weights and run the encoder blocks."""
    cfg.validate()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise InvalidInputError("images must be (N, H, W, 3)")
    N, H, Wd, _ = images.shape
    if H % PATCH or Wd % PATCH:
        raise InvalidInputError(f"image size {H}x{Wd} not divisible by {PATCH}")
    if (H, Wd) != (cfg.height, cfg.width):
        raise InvalidInputError(f"image size {H}x{Wd} does not match config {cfg.height}x{cfg.width}")
    W = _as64(weights)
    h, w = H // PATCH, Wd // PATCH
    patches = images.reshape(N, h, PATCH, w, PATCH, 3).transpose(0, 1, 3, 2, 4, 5).reshape(N, h * w, -1)
    grids = []
    for v in range(N):
        x = patches[v] @ W["embed.w"] + W["embed.b"] + W["embed.pos"]
        for k in range(cfg.encoder_blocks):
            p = f"enc{k}"
            y = _layer_norm(x, W, f"{p}.ln1")
            x = x + _attention(y, y, W, f"{p}.self", cfg.n_heads)
            x = x + _ffn(_layer_norm(x, W, f"{p}.ln2"), W, f"{p}.ffn")
        grids.append(TokenGrid(v, 0, 0, x, (h, w)))
    return grids


def _concat(grids):
    return np.concatenate([g.tokens for g in grids], axis=0)


def fr_block(primary: TokenGrid, secondary, role: str, layer: int, cfg: DecoderConfig, weights: dict) -> TokenGrid:
    """Self-attention, then joint cross-attention to all secondary tokens, then FFN.

    With an empty secondary set only the self-attention and FFN run.
    """
    if role not in ROLES:
        raise InvalidInputError(f"role must be one of {ROLES}")
    W = _as64(weights)
    p = f"fr{layer}.{role}"
    x = primary.tokens
    y = _layer_norm(x, W, f"{p}.ln1")
    x = x + _attention(y, y, W, f"{p}.self", cfg.n_heads)
    if len(secondary):
        kv = _layer_norm(_concat(secondary), W, f"{p}.lnkv")
        x = x + _attention(_layer_norm(x, W, f"{p}.lnq"), kv, W, f"{p}.cross", cfg.n_heads)
    x = x + _ffn(_layer_norm(x, W, f"{p}.ln3"), W, f"{p}.ffn")
    return TokenGrid(primary.view, primary.branch, layer + 1, x, primary.grid)


def crf_block(own: TokenGrid, others, layer: int, cfg: DecoderConfig, weights: dict) -> TokenGrid:
    """Cross-attention from one branch's tokens of a view to the other branches' tokens."""
    W = _as64(weights)
    p = f"crf{layer}"
    x = own.tokens
    if len(others):
        kv = _layer_norm(_concat(others), W, f"{p}.lnkv")
        x = x + _attention(_layer_norm(x, W, f"{p}.lnq"), kv, W, f"{p}.cross", cfg.n_heads)
    x = x + _ffn(_layer_norm(x, W, f"{p}.ln2"), W, f"{p}.ffn")
    return TokenGrid(own.view, own.branch, own.layer, x, own.grid)


def heads(tokens: TokenGrid, role: str, cfg: DecoderConfig, weights: dict) -> PerViewPrediction:
    """Per-token linear map to a 16x16 patch of raw channels, then activations."""
    if role not in ROLES:
        raise InvalidInputError(f"role must be one of {ROLES}")
    W = _as64(weights)
    h, w = tokens.grid
    raw = tokens.tokens @ W[f"head.{role}.w"] + W[f"head.{role}.b"]
    raw = raw.reshape(h, w, PATCH, PATCH, HEAD_CHANNELS).transpose(0, 2, 1, 3, 4)
    raw = raw.reshape(h * PATCH, w * PATCH, HEAD_CHANNELS)
    P = raw[..., 0:3]
    Q = 1.0 + np.exp(np.minimum(raw[..., 3], _EXP_CLIP))
    S = cfg.scale_eps + np.logaddexp(0.0, raw[..., 4:7])
    q = raw[..., 7:11]
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    identity = np.array([1.0, 0.0, 0.0, 0.0])
    q = np.where(qn > 1e-12, q / np.maximum(qn, 1e-12), identity)
    alpha = expit(raw[..., 11])
    return PerViewPrediction(P, Q, S, q, alpha)


def forward(images, cfg: DecoderConfig, weights: dict | None = None) -> DecoderOutput:
    """Run the whole network; predictions come from the first branch's heads.

    Branch ``m`` uses input view ``m`` as its reference view.
    """
    cfg.validate()
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] != cfg.n_views:
        raise InvalidInputError(f"expected {cfg.n_views} images, got {images.shape[0]}")
    if weights is None:
        weights = init_weights(cfg)
    N, M = cfg.n_views, cfg.n_branches
    base = encode(images, cfg, weights)
    state = [[TokenGrid(g.view, m, 0, g.tokens, g.grid) for g in base] for m in range(M)]
    history = [state]
    for d in range(cfg.n_layers):
        refined = [
            [fr_block(state[m][v], [state[m][u] for u in range(N) if u != v],
                      "ref" if v == m else "src", d, cfg, weights) for v in range(N)]
            for m in range(M)
        ]
        state = [
            [crf_block(refined[m][v], [refined[k][v] for k in range(M) if k != m], d, cfg, weights)
             for v in range(N)]
            for m in range(M)
        ]
        history.append(state)
    preds = [heads(state[0][v], "ref" if v == 0 else "src", cfg, weights) for v in range(N)]
    return DecoderOutput(preds, history)


# Invariant checks ------------------------------------------------------------


def _close(a, b, rtol=1e-5):
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) <= rtol * scale


def check_invariants(n: int, m: int, d: int, seed: int = 0, size: int = 64) -> list:
    """Run the decoder on seeded random images and list every failed contract."""
    cfg = DecoderConfig(n_views=n, n_branches=m, n_layers=d, height=size, width=size, seed=seed)
    cfg.validate()
    rng = np.random.default_rng(seed)
    images = rng.random((n, size, size, 3))
    weights = init_weights(cfg)
    out = forward(images, cfg, weights)
    fails = []

    if len(out.predictions) != n:
        fails.append("prediction count")
    for v, p in enumerate(out.predictions):
        if p.pointmap.shape != (size, size, 3) or p.quats.shape != (size, size, 4):
            fails.append(f"view {v}: shape")
        fails += [f"view {v}: {msg}" for msg in p.violations(cfg.scale_eps)]
    h, w = cfg.grid
    for layer in out.tokens:
        for branch in layer:
            for g in branch:
                if g.tokens.shape != (h * w, cfg.dim) or not np.all(np.isfinite(g.tokens)):
                    fails.append(f"token grid v{g.view} m{g.branch} d{g.layer}")

    again = forward(images, cfg, weights)
    if any(not np.array_equal(a.pointmap, b.pointmap) or not np.array_equal(a.quats, b.quats)
           for a, b in zip(out.predictions, again.predictions)):
        fails.append("not deterministic")

    # outputs are exactly the first branch's final tokens through the heads
    for v, p in enumerate(out.predictions):
        direct = heads(out.tokens[-1][0][v], "ref" if v == 0 else "src", cfg, weights)
        if not np.array_equal(direct.pointmap, p.pointmap):
            fails.append(f"view {v}: output not from first branch")

    # swapping two source views permutes their outputs and leaves the rest alone
    if n - m >= 2:
        perm = list(range(n))
        perm[-1], perm[-2] = perm[-2], perm[-1]
        swapped = forward(images[perm], cfg, weights)
        for v in range(n):
            a, b = out.predictions[perm[v]], swapped.predictions[v]
            if not (_close(a.pointmap, b.pointmap) and _close(a.confidence, b.confidence)):
                fails.append(f"source swap changed view {perm[v]}")

    # direct set invariance of the secondary attention
    first = out.tokens[0][0]
    if n >= 3:
        sec = first[1:]
        x1 = fr_block(first[0], sec, "src", 0, cfg, weights).tokens
        x2 = fr_block(first[0], sec[::-1], "src", 0, cfg, weights).tokens
        if not _close(x1, x2):
            fails.append("fr_block secondary order")
        y1 = crf_block(first[0], sec, 0, cfg, weights).tokens
        y2 = crf_block(first[0], sec[::-1], 0, cfg, weights).tokens
        if not _close(y1, y2):
            fails.append("crf_block secondary order")
    ref = fr_block(first[0], first[1:], "ref", 0, cfg, weights).tokens
    src = fr_block(first[0], first[1:], "src", 0, cfg, weights).tokens
    if not np.max(np.abs(ref - src)) > 0:
        fails.append("reference and source weights coincide")
    return fails

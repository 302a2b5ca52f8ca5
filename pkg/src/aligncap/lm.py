"""Tiny decoder-only language model over the joint codebook.

Pre-norm transformer blocks in float64 with a hand-written backward pass.
Dense weights are stored ``(d_out, d_in)`` and applied as ``x @ W.T + b``;
the output projection is ``(d_model, vocab)``.  Low-rank adapters add
``scale * A @ B`` to any of the block weight matrices.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .codebook import TokenSeq

LN_EPS = 1e-5
MASKED = -1e30
LORA_TARGETS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    max_len: int = 128
    pad_id: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.pad_id < self.vocab_size:
            raise ModelError(f"pad_id {self.pad_id} outside vocabulary")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        out = {"embed": (v, d), "pos": (self.max_len, d)}
        for l in range(self.n_layers):
            p = f"l{l}."
            out.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "attn.wq": (d, d), p + "attn.bq": (d,),
                p + "attn.wk": (d, d), p + "attn.bk": (d,),
                p + "attn.wv": (d, d), p + "attn.bv": (d,),
                p + "attn.wo": (d, d), p + "attn.bo": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "ffn.w1": (f, d), p + "ffn.b1": (f,),
                p + "ffn.w2": (d, f), p + "ffn.b2": (d,),
            })
        out.update({"lnf.g": (d,), "lnf.b": (d,), "out.w": (d, v), "out.b": (v,)})
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.shapes()
        if set(expected) != set(self.arrays):
            missing = set(expected) - set(self.arrays)
            extra = set(self.arrays) - set(expected)
            raise ModelError(f"parameter names mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ModelError(f"{name}: shape {self.arrays[name].shape} != {shape}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


@dataclass
class LoraAdapter:
    """Per-target factors A (d_out, r) and B (r, d_in); delta = scale * A @ B."""

    rank: int
    scale: float
    A: dict[str, np.ndarray] = field(default_factory=dict)
    B: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ModelError("adapter rank must be >= 1")
        if set(self.A) != set(self.B):
            raise ModelError("adapter A/B target sets differ")

    @property
    def targets(self) -> list[str]:
        return list(self.A)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.rank, self.scale,
                           {k: v.copy() for k, v in self.A.items()},
                           {k: v.copy() for k, v in self.B.items()})

    def delta(self, name: str) -> np.ndarray:
        return self.scale * (self.A[name] @ self.B[name])

    def check_against(self, config: ModelConfig) -> None:
        shapes = config.shapes()
        for name in self.A:
            if name not in shapes:
                raise ModelError(f"adapter target {name} is not a model weight")
            d_out, d_in = shapes[name]
            if self.A[name].shape != (d_out, self.rank):
                raise ModelError(f"{name}: adapter A shape {self.A[name].shape} != {(d_out, self.rank)}")
            if self.B[name].shape != (self.rank, d_in):
                raise ModelError(f"{name}: adapter B shape {self.B[name].shape} != {(self.rank, d_in)}")


def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in cfg.shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arrays[name] = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            arrays[name] = np.zeros(shape)
        elif name in ("embed", "pos"):
            arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), shape)
        else:
            fan_in = shape[0] if name == "out.w" else shape[1]
            arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
    return ModelParams(cfg, arrays)


def init_adapter(params: ModelParams, rank: int = 8, scale: float = 1.0,
                 targets: Iterable[str] = LORA_TARGETS, seed: int = 0) -> LoraAdapter:
    rng = np.random.default_rng(seed)
    shapes = params.config.shapes()
    A, B = {}, {}
    for l in range(params.config.n_layers):
        for t in targets:
            name = f"l{l}.{t}"
            d_out, d_in = shapes[name]
            A[name] = rng.normal(0.0, 1.0 / math.sqrt(rank), (d_out, rank))
            B[name] = np.zeros((rank, d_in))
    return LoraAdapter(rank, scale, A, B)


# ---------------------------------------------------------------- primitives

def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xhat * (dxh * xhat).mean(-1, keepdims=True))
    return dx, dg, db


_GC = math.sqrt(2.0 / math.pi)


def _gelu(u):
    t = np.tanh(_GC * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GC * (1.0 + 3 * 0.044715 * u * u)


def log_softmax(logits: np.ndarray, pad_id: Optional[int] = None) -> np.ndarray:
    z = logits.copy()
    if pad_id is not None:
        z[..., pad_id] = -np.inf
    m = z.max(-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(-1, keepdims=True))


def effective_weights(params: ModelParams, adapter: Optional[LoraAdapter]) -> dict[str, np.ndarray]:
    if adapter is None:
        return params.arrays
    w = dict(params.arrays)
    for name in adapter.A:
        w[name] = params.arrays[name] + adapter.delta(name)
    return w


@dataclass
class Grads:
    base: dict[str, np.ndarray]
    A: dict[str, np.ndarray] = field(default_factory=dict)
    B: dict[str, np.ndarray] = field(default_factory=dict)

    def scaled(self, c: float) -> "Grads":
        return Grads({k: v * c for k, v in self.base.items()},
                     {k: v * c for k, v in self.A.items()},
                     {k: v * c for k, v in self.B.items()})

    def add_(self, other: "Grads") -> "Grads":
        for mine, theirs in ((self.base, other.base), (self.A, other.A), (self.B, other.B)):
            for k, v in theirs.items():
                if k in mine:
                    mine[k] = mine[k] + v
                else:
                    mine[k] = v.copy()
        return self

    def sq_norm(self, include_base: bool = True) -> float:
        parts = [self.A, self.B] + ([self.base] if include_base else [])
        return float(sum((v * v).sum() for d in parts for v in d.values()))


def batch_arrays(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists into (N, T) id and mask arrays."""
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for n, s in enumerate(seqs):
        ids[n, :len(s)] = s
        mask[n, :len(s)] = True
    return ids, mask


def forward(params: ModelParams, adapter: Optional[LoraAdapter], ids: np.ndarray,
            mask: Optional[np.ndarray] = None, keep_cache: bool = False):
    """Logits of shape (N, T, vocab).  Returns (logits, cache); cache is None unless kept."""
    cfg = params.config
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    N, T = ids.shape
    if T == 0:
        raise ModelError("empty context")
    if T > cfg.max_len:
        raise ModelError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ModelError("token id outside vocabulary")
    if mask is None:
        mask = np.ones((N, T), dtype=bool)
    W = effective_weights(params, adapter)
    H = cfg.n_heads
    dh = cfg.d_model // H
    inv_sqrt = 1.0 / math.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = causal[None, None, :, :] & mask[:, None, None, :]

    def split(z):
        return z.reshape(N, T, H, dh).transpose(0, 2, 1, 3)

    x = W["embed"][ids] + W["pos"][:T]
    layers = []
    for l in range(cfg.n_layers):
        p = f"l{l}."
        h1, c1 = _ln_fwd(x, W[p + "ln1.g"], W[p + "ln1.b"])
        q = split(h1 @ W[p + "attn.wq"].T + W[p + "attn.bq"])
        k = split(h1 @ W[p + "attn.wk"].T + W[p + "attn.bk"])
        v = split(h1 @ W[p + "attn.wv"].T + W[p + "attn.bv"])
        s = np.where(allowed, q @ k.transpose(0, 1, 3, 2) * inv_sqrt, MASKED)
        s = s - s.max(-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(-1, keepdims=True)
        ctx = (a @ v).transpose(0, 2, 1, 3).reshape(N, T, cfg.d_model)
        x = x + ctx @ W[p + "attn.wo"].T + W[p + "attn.bo"]
        h2, c2 = _ln_fwd(x, W[p + "ln2.g"], W[p + "ln2.b"])
        u = h2 @ W[p + "ffn.w1"].T + W[p + "ffn.b1"]
        gact, t = _gelu(u)
        x = x + gact @ W[p + "ffn.w2"].T + W[p + "ffn.b2"]
        if keep_cache:
            layers.append((h1, c1, q, k, v, a, ctx, h2, c2, u, gact, t))
    hf, cf = _ln_fwd(x, W["lnf.g"], W["lnf.b"])
    logits = hf @ W["out.w"] + W["out.b"]
    cache = None
    if keep_cache:
        cache = {"ids": ids, "W": W, "layers": layers, "hf": hf, "cf": cf,
                 "shape": (N, T, H, dh), "adapter": adapter}
    return logits, cache


def backward(params: ModelParams, cache: dict, dlogits: np.ndarray) -> Grads:
    """Gradients of sum(dlogits * logits) w.r.t. base weights and adapter factors."""
    cfg = params.config
    W = cache["W"]
    N, T, H, dh = cache["shape"]
    d = cfg.d_model
    inv_sqrt = 1.0 / math.sqrt(dh)
    g: dict[str, np.ndarray] = {}

    def flat(z):
        return z.reshape(-1, z.shape[-1])

    def split(z):
        return z.reshape(N, T, H, dh).transpose(0, 2, 1, 3)

    def merge(z):
        return z.transpose(0, 2, 1, 3).reshape(N, T, d)

    hf = cache["hf"]
    g["out.w"] = flat(hf).T @ flat(dlogits)
    g["out.b"] = dlogits.sum(axis=(0, 1))
    dx, g["lnf.g"], g["lnf.b"] = _ln_bwd(dlogits @ W["out.w"].T, W["lnf.g"], cache["cf"])

    for l in reversed(range(cfg.n_layers)):
        p = f"l{l}."
        h1, c1, q, k, v, a, ctx, h2, c2, u, gact, t = cache["layers"][l]
        # feed-forward branch
        g[p + "ffn.w2"] = flat(dx).T @ flat(gact)
        g[p + "ffn.b2"] = dx.sum(axis=(0, 1))
        du = (dx @ W[p + "ffn.w2"]) * _gelu_grad(u, t)
        g[p + "ffn.w1"] = flat(du).T @ flat(h2)
        g[p + "ffn.b1"] = du.sum(axis=(0, 1))
        dh2, g[p + "ln2.g"], g[p + "ln2.b"] = _ln_bwd(du @ W[p + "ffn.w1"], W[p + "ln2.g"], c2)
        dx = dx + dh2
        # attention branch
        g[p + "attn.wo"] = flat(dx).T @ flat(ctx)
        g[p + "attn.bo"] = dx.sum(axis=(0, 1))
        dctx = split(dx @ W[p + "attn.wo"])
        da = dctx @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ dctx
        ds = a * (da - (da * a).sum(-1, keepdims=True)) * inv_sqrt
        dq = merge(ds @ k)
        dk = merge(ds.transpose(0, 1, 3, 2) @ q)
        dv = merge(dv)
        dh1 = np.zeros_like(dx)
        for name, dz in (("q", dq), ("k", dk), ("v", dv)):
            g[p + f"attn.w{name}"] = flat(dz).T @ flat(h1)
            g[p + f"attn.b{name}"] = dz.sum(axis=(0, 1))
            dh1 += dz @ W[p + f"attn.w{name}"]
        dln1, g[p + "ln1.g"], g[p + "ln1.b"] = _ln_bwd(dh1, W[p + "ln1.g"], c1)
        dx = dx + dln1

    g["pos"] = np.zeros_like(W["pos"])
    g["pos"][:T] = dx.sum(0)
    g["embed"] = np.zeros_like(W["embed"])
    np.add.at(g["embed"], cache["ids"].ravel(), flat(dx))

    grads = Grads(g)
    adapter = cache["adapter"]
    if adapter is not None:
        for name in adapter.A:
            dW = g[name]
            grads.A[name] = adapter.scale * (dW @ adapter.B[name].T)
            grads.B[name] = adapter.scale * (adapter.A[name].T @ dW)
    return grads


# ------------------------------------------------------------------ inference

@dataclass(frozen=True)
class NextTokenDist:
    probs: np.ndarray

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def _valid(seq) -> list[int]:
    if isinstance(seq, TokenSeq):
        return list(seq.valid_ids)
    return [int(i) for i in seq]


def next_token_dist(params: ModelParams, adapter: Optional[LoraAdapter], context) -> NextTokenDist:
    """Distribution over the next token after the valid positions of ``context``."""
    ids = _valid(context)
    if not ids:
        raise ModelError("next_token_dist needs a non-empty context")
    logits, _ = forward(params, adapter, np.array([ids]))
    return NextTokenDist(np.exp(log_softmax(logits[0, -1], params.config.pad_id)))


def sequence_logprob(params: ModelParams, adapter: Optional[LoraAdapter], context, response) -> float:
    ctx, resp = _valid(context), _valid(response)
    if not resp:
        raise ModelError("sequence_logprob needs a non-empty response")
    if not ctx:
        raise ModelError("sequence_logprob needs a non-empty context")
    full = np.array([ctx + resp])
    logits, _ = forward(params, adapter, full)
    lp = log_softmax(logits[0, len(ctx) - 1:-1], params.config.pad_id)
    return float(lp[np.arange(len(resp)), resp].sum())


@dataclass(frozen=True)
class DecodeConfig:
    max_len: int = 32
    beam_width: int = 1
    eos_id: Optional[int] = None
    period_ids: frozenset = frozenset()
    allowed_ids: Optional[frozenset] = None

    def __post_init__(self):
        if self.max_len < 1:
            raise ModelError("max_len must be >= 1")
        if self.beam_width < 1:
            raise ModelError("beam_width must be >= 1")

    @classmethod
    def for_codebook(cls, cb, max_len: int = 32, beam_width: int = 1,
                     text_only: bool = False) -> "DecodeConfig":
        allowed = None
        if text_only:
            allowed = frozenset(range(cb.text_size)) | {cb.eos}
        return cls(max_len, beam_width, cb.eos, cb.period_ids(), allowed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["period_ids"] = sorted(self.period_ids)
        d["allowed_ids"] = None if self.allowed_ids is None else sorted(self.allowed_ids)
        return d


def _step_logprobs(params, adapter, prefixes: list[list[int]], cfg: DecodeConfig) -> np.ndarray:
    logits, _ = forward(params, adapter, np.array(prefixes))
    lp = log_softmax(logits[:, -1], params.config.pad_id)
    if cfg.allowed_ids is not None:
        keep = np.zeros(lp.shape[-1], dtype=bool)
        keep[list(cfg.allowed_ids)] = True
        keep[params.config.pad_id] = False
        lp = np.where(keep, lp, -np.inf)
        lp = lp - np.logaddexp.reduce(lp, axis=-1, keepdims=True)
    return lp


def greedy_decode(params: ModelParams, adapter: Optional[LoraAdapter], prefix,
                  cfg: DecodeConfig) -> TokenSeq:
    ctx = _valid(prefix)
    if not ctx:
        raise ModelError("greedy_decode needs a non-empty prefix")
    out: list[int] = []
    for _ in range(min(cfg.max_len, params.config.max_len - len(ctx))):
        tok = int(np.argmax(_step_logprobs(params, adapter, [ctx + out], cfg)[0]))
        if tok == cfg.eos_id:
            break
        out.append(tok)
        if tok in cfg.period_ids:
            break
    return TokenSeq.of(out)


def beam_decode(params: ModelParams, adapter: Optional[LoraAdapter], prefix,
                cfg: DecodeConfig) -> list[tuple[TokenSeq, float]]:
    """Length-bounded beam search over summed log-probabilities.

    Each step keeps the ``beam_width`` best extensions, ordered by score, then
    token id, then parent index.  Extensions ending in EOS (dropped from the
    output) or a period token are finished.  Search ends when no hypothesis is
    live, ``beam_width`` hypotheses are finished, or ``max_len`` is reached.
    """
    ctx = _valid(prefix)
    if not ctx:
        raise ModelError("beam_decode needs a non-empty prefix")
    k = cfg.beam_width
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(min(cfg.max_len, params.config.max_len - len(ctx))):
        lp = _step_logprobs(params, adapter, [ctx + list(toks) for toks, _ in live], cfg)
        cands = []
        for h, (_, score) in enumerate(live):
            row = lp[h]
            for tok in np.flatnonzero(np.isfinite(row)):
                cands.append((score + float(row[tok]), int(tok), h))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live = []
        for score, tok, h in cands[:k]:
            toks = live[h][0]
            if tok == cfg.eos_id:
                finished.append((toks, score))
            elif tok in cfg.period_ids:
                finished.append((toks + (tok,), score))
            else:
                new_live.append((toks + (tok,), score))
        live = new_live
        if not live or len(finished) >= k:
            break
    else:
        finished.extend(live)
    finished.sort(key=lambda f: (-f[1], f[0]))
    return [(TokenSeq.of(t), s) for t, s in finished[:k]]

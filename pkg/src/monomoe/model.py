"""Decoder-only LM whose FFN sublayer is a two-expert modality mixture.

Every token row is dispatched statically by its modality tag: visual rows
through the visual expert, text rows through the text expert. The visual
experts are deep-copied from the text FFNs so that, at copy time, routing
is observationally irrelevant. Attention is fully causal over the flat
multimodal sequence with rotary positions; inference uses a per-call KV
cache.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tokenizers as tok
from .tensor import (Tensor, add, concat_cols, cross_entropy, gather_rows,
                     matmul, no_grad, rms_norm, row_merge, scale, shift,
                     slice_cols, softmax, swiglu_ffn, transpose)

# parameter group tags; the freeze machinery works at this granularity
TEXT_EMBED = "TEXT_EMBED"
PATCH_EMBED = "PATCH_EMBED"
VIS_PE = "VIS_PE"
VIS_PROJ = "VIS_PROJ"
ATTN = "ATTN"
FFN_T = "FFN_T"
FFN_V = "FFN_V"
NORM = "NORM"
HEAD = "HEAD"
GROUPS = (TEXT_EMBED, PATCH_EMBED, VIS_PE, VIS_PROJ, ATTN, FFN_T, FFN_V, NORM, HEAD)

VISUAL_GROUPS = frozenset({PATCH_EMBED, VIS_PE, VIS_PROJ, FFN_V})

INIT_STD = 0.02


class CapacityError(ValueError):
    """Sequence does not fit the configured context length."""


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 512
    vocab: int = tok.VOCAB_SIZE
    max_seq: int = 1024
    rope_base: float = 10000.0
    drop_path: float = 0.1
    norm_eps: float = 1e-5
    patch_stride: int = 8
    tile_px: int = 64
    pe_grid: int = 8
    vis_dim: int = 128

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.tile_px % self.patch_stride:
            raise ValueError("tile_px must be a multiple of patch_stride")
        for name in ("dim", "layers", "heads", "ffn_dim", "vocab", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


DESK_CONFIG = ModelConfig()

# full-scale geometry of the 1.8B-class base plus visual additions; used
# for parameter accounting only, never instantiated at desk scale
PAPER_CONFIG = ModelConfig(dim=2048, layers=24, heads=16, ffn_dim=8192,
                           vocab=92544, max_seq=8192, patch_stride=28,
                           tile_px=448, pe_grid=16, vis_dim=2048)


def param_spec(cfg: ModelConfig) -> list:
    """Declarative (name, shape, group, init) list; the one source of
    truth for construction, counting, and checkpoint validation."""
    d, e, f = cfg.dim, cfg.vis_dim, cfg.ffn_dim
    spec = [
        ("tok_embed", (cfg.vocab, d), TEXT_EMBED, "normal"),
        ("patch_w", (cfg.patch_stride * cfg.patch_stride * 3, e), PATCH_EMBED, "normal"),
        ("patch_b", (e,), PATCH_EMBED, "zeros"),
        ("vis_pe", (cfg.pe_grid * cfg.pe_grid, e), VIS_PE, "normal"),
        ("proj_w1", (e, d), VIS_PROJ, "normal"),
        ("proj_b1", (d,), VIS_PROJ, "zeros"),
        ("proj_w2", (d, d), VIS_PROJ, "normal"),
        ("proj_b2", (d,), VIS_PROJ, "zeros"),
    ]
    for i in range(cfg.layers):
        spec.append((f"layers.{i}.attn_norm", (d,), NORM, "ones"))
        for nm in ("wq", "wk", "wv", "wo"):
            spec.append((f"layers.{i}.{nm}", (d, d), ATTN, "normal"))
        spec.append((f"layers.{i}.ffn_norm", (d,), NORM, "ones"))
        for expert, group in (("ffn_t", FFN_T), ("ffn_v", FFN_V)):
            spec.append((f"layers.{i}.{expert}.gate", (d, f), group, "normal"))
            spec.append((f"layers.{i}.{expert}.up", (d, f), group, "normal"))
            spec.append((f"layers.{i}.{expert}.down", (f, d), group, "normal"))
    spec.append(("final_norm", (d,), NORM, "ones"))
    spec.append(("head_w", (d, cfg.vocab), HEAD, "normal"))
    return spec


class LayerParams:
    """Forward-path view of one decoder layer's tensors."""

    def __init__(self, params: dict, i: int):
        self.attn_norm = params[f"layers.{i}.attn_norm"]
        self.wq = params[f"layers.{i}.wq"]
        self.wk = params[f"layers.{i}.wk"]
        self.wv = params[f"layers.{i}.wv"]
        self.wo = params[f"layers.{i}.wo"]
        self.ffn_norm = params[f"layers.{i}.ffn_norm"]
        self.ffn_t = tuple(params[f"layers.{i}.ffn_t.{nm}"] for nm in ("gate", "up", "down"))
        self.ffn_v = tuple(params[f"layers.{i}.ffn_v.{nm}"] for nm in ("gate", "up", "down"))


class MMoEModel:
    """Full parameter set: embeddings, visual tokenizer, decoder stack, head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self._spec = param_spec(cfg)
        self._params = {}
        for name, shape, _, init in self._spec:
            if init == "normal":
                data = rng.normal(0.0, INIT_STD, shape).astype(np.float32)
            elif init == "ones":
                data = np.ones(shape, dtype=np.float32)
            else:
                data = np.zeros(shape, dtype=np.float32)
            self._params[name] = Tensor(data, requires_grad=True)
        self._wire()

    def _wire(self):
        p = self._params
        self.tok_embed = p["tok_embed"]
        self.patch_w, self.patch_b = p["patch_w"], p["patch_b"]
        self.vis_pe = p["vis_pe"]
        self.proj_w1, self.proj_b1 = p["proj_w1"], p["proj_b1"]
        self.proj_w2, self.proj_b2 = p["proj_w2"], p["proj_b2"]
        self.layers = [LayerParams(p, i) for i in range(self.cfg.layers)]
        self.final_norm = p["final_norm"]
        self.head_w = p["head_w"]

    # -- parameter registry ---------------------------------------------------

    def parameters(self) -> list:
        """Deterministically ordered (name, tensor, group) triples."""
        return [(name, self._params[name], group)
                for name, _, group, _ in self._spec]

    def param_by_name(self, name: str) -> Tensor:
        return self._params[name]

    def state_arrays(self) -> dict:
        return {nm: t.data for nm, t, _ in self.parameters()}

    def clone(self) -> "MMoEModel":
        twin = MMoEModel(self.cfg, seed=0)
        for nm, t, _ in twin.parameters():
            src = self._params[nm]
            t.data[...] = src.data
            t.requires_grad = src.requires_grad
            t.grad = None
        return twin

    def set_trainable(self, trainable_groups) -> None:
        trainable_groups = set(trainable_groups)
        for _, t, g in self.parameters():
            t.requires_grad = g in trainable_groups
            t.grad = None


def init_visual_experts(model: MMoEModel) -> MMoEModel:
    """Deep-copy each layer's text FFN into its visual expert."""
    for lp in model.layers:
        for src, dst in zip(lp.ffn_t, lp.ffn_v):
            dst.data[...] = src.data
    return model


# ---------------------------------------------------------------------------
# rotary tables and causal bias (cached per shape)
# ---------------------------------------------------------------------------

_rope_cache: dict = {}
_bias_cache: dict = {}


def rope_tables(n: int, head_dim: int, base: float):
    key = (n, head_dim, base)
    if key not in _rope_cache:
        inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
        ang = np.outer(np.arange(n, dtype=np.float64), inv)
        cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1).astype(np.float32)
        sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=1).astype(np.float32)
        _rope_cache[key] = (cos, sin)
    return _rope_cache[key]


def causal_bias(n: int) -> np.ndarray:
    if n not in _bias_cache:
        _bias_cache[n] = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)
    return _bias_cache[n]


def rope_apply(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    half = x.shape[1] // 2
    x1 = slice_cols(x, 0, half)
    x2 = slice_cols(x, half, x.shape[1])
    rot = concat_cols([scale(x2, -1.0), x1])
    return add(scale(x, cos), scale(rot, sin))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class KVCache:
    """Per-layer, per-head key/value buffers for incremental decoding."""

    keys: list      # keys[layer][head]: (capacity, head_dim) float32
    values: list
    length: int = 0

    @classmethod
    def empty(cls, cfg: ModelConfig, capacity: int) -> "KVCache":
        hd = cfg.head_dim
        return cls(
            keys=[[np.empty((capacity, hd), dtype=np.float32)
                   for _ in range(cfg.heads)] for _ in range(cfg.layers)],
            values=[[np.empty((capacity, hd), dtype=np.float32)
                     for _ in range(cfg.heads)] for _ in range(cfg.layers)])

    @property
    def capacity(self) -> int:
        return self.keys[0][0].shape[0]


def mmoe_forward(x: Tensor, modality: np.ndarray, lp: LayerParams,
                 routing: list | None = None) -> Tensor:
    """Static dispatch: visual rows to ffn_v, text rows to ffn_t.

    Each expert only processes its own rows, so the per-token FFN cost is
    one expert regardless of how many experts exist. The row-stable
    kernel keeps each row's result independent of the dispatch grouping.
    """
    modality = np.asarray(modality, dtype=bool)
    n = x.shape[0]
    if modality.shape != (n,):
        raise ValueError(f"modality mask length {modality.shape} != rows {n}")
    idx_v = np.nonzero(modality)[0]
    idx_t = np.nonzero(~modality)[0]
    if routing is not None:
        routing.append((int(idx_v.size), int(idx_t.size)))
    parts = []
    if idx_t.size:
        parts.append((idx_t, swiglu_ffn(gather_rows(x, idx_t), *lp.ffn_t,
                                        row_stable=True)))
    if idx_v.size:
        parts.append((idx_v, swiglu_ffn(gather_rows(x, idx_v), *lp.ffn_v,
                                        row_stable=True)))
    return row_merge(n, parts)


def _attention(xn: Tensor, lp: LayerParams, cfg: ModelConfig, pos_offset: int,
               cache: KVCache | None, layer_idx: int,
               capture: list | None) -> Tensor:
    n = xn.shape[0]
    hd = cfg.head_dim
    inv_scale = 1.0 / np.sqrt(hd)
    q = matmul(xn, lp.wq)
    k = matmul(xn, lp.wk)
    v = matmul(xn, lp.wv)
    total = pos_offset + n
    cos, sin = rope_tables(max(total, cfg.max_seq if cache is None else total),
                           hd, cfg.rope_base)
    rows = slice(pos_offset, pos_offset + n)

    head_outs = []
    head_maps = [] if capture is not None else None
    for h in range(cfg.heads):
        qh = rope_apply(slice_cols(q, h * hd, (h + 1) * hd), cos[rows], sin[rows])
        kh = rope_apply(slice_cols(k, h * hd, (h + 1) * hd), cos[rows], sin[rows])
        vh = slice_cols(v, h * hd, (h + 1) * hd)
        if cache is not None:
            kbuf, vbuf = cache.keys[layer_idx][h], cache.values[layer_idx][h]
            kbuf[pos_offset:total] = kh.data
            vbuf[pos_offset:total] = vh.data
            keys = Tensor(kbuf[:total])
            vals = Tensor(vbuf[:total])
        else:
            keys, vals = kh, vh
        scores = scale(matmul(qh, transpose(keys)), inv_scale)
        if n > 1:
            bias = causal_bias(total)[rows, :total] if cache is not None else causal_bias(n)
            scores = shift(scores, bias)
        attn = softmax(scores, axis=-1)
        if head_maps is not None:
            head_maps.append(attn.data.copy())
        head_outs.append(matmul(attn, vals))
    if head_maps is not None:
        capture.append(np.stack(head_maps))
    return matmul(concat_cols(head_outs), lp.wo)


def _residual(x: Tensor, branch: Tensor, drop_rate: float,
              rng: np.random.Generator | None) -> Tensor:
    # stochastic depth on the residual branch, training mode only
    if rng is not None and drop_rate > 0.0:
        if rng.random() < drop_rate:
            return x
        return add(x, scale(branch, 1.0 / (1.0 - drop_rate)))
    return add(x, branch)


def decoder_layer(x: Tensor, modality: np.ndarray, lp: LayerParams,
                  cfg: ModelConfig, pos_offset: int = 0,
                  cache: KVCache | None = None, layer_idx: int = 0,
                  train_rng: np.random.Generator | None = None,
                  drop_rate: float = 0.0, capture: list | None = None,
                  routing: list | None = None) -> Tensor:
    attn_out = _attention(rms_norm(x, lp.attn_norm, cfg.norm_eps), lp, cfg,
                          pos_offset, cache, layer_idx, capture)
    x = _residual(x, attn_out, drop_rate, train_rng)
    ffn_out = mmoe_forward(rms_norm(x, lp.ffn_norm, cfg.norm_eps), modality,
                           lp, routing)
    return _residual(x, ffn_out, drop_rate, train_rng)


def model_forward(model: MMoEModel, seq, train: bool = False,
                  rng: np.random.Generator | None = None,
                  capture: list | None = None,
                  routing: list | None = None,
                  drop_path: float | None = None) -> Tensor:
    """Logits at every position of the multimodal sequence."""
    cfg = model.cfg
    n = len(seq)
    if n > cfg.max_seq:
        raise CapacityError(f"sequence of {n} tokens exceeds max_seq {cfg.max_seq}")
    drop = (cfg.drop_path if drop_path is None else drop_path) if train else 0.0
    train_rng = rng if train else None
    x = seq.embeddings
    for i, lp in enumerate(model.layers):
        x = decoder_layer(x, seq.modality, lp, cfg, layer_idx=i,
                          train_rng=train_rng, drop_rate=drop,
                          capture=capture, routing=routing)
    x = rms_norm(x, model.final_norm, cfg.norm_eps)
    return matmul(x, model.head_w)


def _forward_cached(model: MMoEModel, embeds: Tensor, modality: np.ndarray,
                    cache: KVCache) -> np.ndarray:
    """Advance the cache by a block of tokens; return the last-row logits."""
    cfg = model.cfg
    offset = cache.length
    x = embeds
    for i, lp in enumerate(model.layers):
        x = decoder_layer(x, modality, lp, cfg, pos_offset=offset,
                          cache=cache, layer_idx=i)
    cache.length = offset + embeds.shape[0]
    last = gather_rows(x, [x.shape[0] - 1])
    last = rms_norm(last, model.final_norm, cfg.norm_eps)
    return matmul(last, model.head_w).data[0]


# ---------------------------------------------------------------------------
# sequence assembly and loss
# ---------------------------------------------------------------------------

def encode_sample(model: MMoEModel, prompt: str, response: str | None,
                  image: np.ndarray | None, max_patches: int):
    """Build the training/eval sequence: [visual tokens][BOS prompt \\n (response EOS)].

    The loss mask covers the response bytes plus EOS; prompt-only
    sequences (response=None) carry no loss and end right before where
    generation starts.
    """
    cfg = model.cfg
    pre = np.concatenate([[tok.BOS], tok.tokenize_text(prompt + "\n")])
    if response is None:
        ids, loss_start = pre, None
    else:
        ids = np.concatenate([pre, tok.tokenize_text(response), [tok.EOS]])
        loss_start = len(pre)
    text = tok.make_text_batch(ids, model.tok_embed)
    visual = None
    if image is not None:
        visual = tok.visual_tokenize(
            image, max_patches, cfg.patch_stride, cfg.tile_px,
            model.patch_w, model.patch_b, model.vis_pe, cfg.pe_grid,
            model.proj_w1, model.proj_b1, model.proj_w2, model.proj_b2)
    return tok.concat_multimodal(visual, text, loss_start)


def sequence_loss(model: MMoEModel, seq, train: bool = False,
                  rng: np.random.Generator | None = None,
                  drop_path: float | None = None) -> Tensor:
    """Masked next-token cross entropy over the response positions."""
    n = len(seq)
    logits = model_forward(model, seq, train=train, rng=rng, drop_path=drop_path)
    shifted = gather_rows(logits, np.arange(n - 1))
    return cross_entropy(shifted, seq.token_ids[1:], seq.loss_mask[1:])


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class GenerationResult:
    token_ids: list
    prefill_seconds: float
    step_seconds: list = field(default_factory=list)
    truncated: bool = False

    @property
    def text(self) -> bytes:
        return tok.detokenize(np.array(self.token_ids, dtype=np.int64))


def generate(model: MMoEModel, seq, max_new: int, temperature: float = 0.0,
             rng: np.random.Generator | None = None,
             stop_at_eos: bool = True) -> GenerationResult:
    """KV-cache prefill then one token per step; temperature 0 is greedy.

    Wall-clock is recorded at prefill end (the first token) and per
    decode step. Running past the context window sets the truncation
    flag instead of failing.
    """
    cfg = model.cfg
    n = len(seq)
    if n > cfg.max_seq:
        raise CapacityError(f"prompt of {n} tokens exceeds max_seq {cfg.max_seq}")

    def pick(logits: np.ndarray) -> int:
        if temperature <= 0.0:
            return int(np.argmax(logits))
        z = logits / temperature
        z -= z.max()
        p = np.exp(z)
        p /= p.sum()
        r = rng if rng is not None else np.random.default_rng()
        return int(r.choice(len(p), p=p))

    with no_grad():
        capacity = min(cfg.max_seq, n + max(max_new, 0))
        cache = KVCache.empty(cfg, capacity)
        t0 = time.perf_counter()
        logits = _forward_cached(model, seq.embeddings, seq.modality, cache)
        if max_new <= 0:
            return GenerationResult([], time.perf_counter() - t0)
        first = pick(logits)
        prefill_s = time.perf_counter() - t0
        ids = [first]
        result = GenerationResult(ids, prefill_s)
        if stop_at_eos and first == tok.EOS:
            return result
        prev = first
        for _ in range(max_new - 1):
            if cache.length + 1 > capacity:
                result.truncated = True
                break
            t1 = time.perf_counter()
            emb = gather_rows(model.tok_embed, [prev])
            logits = _forward_cached(model, emb, np.array([False]), cache)
            nxt = pick(logits)
            result.step_seconds.append(time.perf_counter() - t1)
            ids.append(nxt)
            if stop_at_eos and nxt == tok.EOS:
                break
            prev = nxt
    return result


def attention_maps(model: MMoEModel, seq) -> np.ndarray:
    """Post-softmax causal attention, shape (layers, heads, n', n')."""
    maps: list = []
    with no_grad():
        model_forward(model, seq, capture=maps)
    return np.stack(maps)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def group_param_counts(model: MMoEModel) -> dict:
    counts = {g: 0 for g in GROUPS}
    for _, t, g in model.parameters():
        counts[g] += t.size
    return counts


def count_params(model: MMoEModel, modality: str = "multimodal") -> dict:
    """Total vs activated parameters for a given input modality mix.

    Text-only inputs never touch the visual expert or visual tokenizer
    weights, so those are excluded from the activated count.
    """
    counts = group_param_counts(model)
    total = sum(counts.values())
    if modality == "text":
        activated = total - sum(counts[g] for g in VISUAL_GROUPS)
    elif modality == "multimodal":
        activated = total
    else:
        raise ValueError(f"unknown modality mix {modality!r}")
    return {"total": total, "activated": activated}


def ffn_flops_per_row(cfg: ModelConfig) -> int:
    # three projections, two flops per multiply-accumulate
    return 2 * 3 * cfg.dim * cfg.ffn_dim


def mmoe_dispatch_flops(routing: list, cfg: ModelConfig) -> int:
    """FFN flops actually spent given per-layer (visual, text) row counts."""
    return sum((nv + nt) * ffn_flops_per_row(cfg) for nv, nt in routing)

"""Measurement harness: task accuracy, text-retention perplexity, data
scaling curves, tuning/attention ablations, latency vs a modular
baseline, and attention-map dumps.

All experiment paths are seed-deterministic (timing numbers aside), and
every ablation arm shares its init, data stream, and seeds with the
others; the arm configs are hashed so the single differing variable is
checkable.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from . import synthdata as sd
from . import tokenizers as tok
from .synthdata import dataset
from .tensor import (Tensor, add, concat_cols, concat_rows, gather_rows, matmul,
                     no_grad, rms_norm, scale, silu, slice_cols, softmax,
                     transpose)
from .training import CUSTOM, DELTA_GROUPS, StageConfig, train_stage

TASKS = ("caption", "count", "detect", "ocr")
GEN_BUDGET = {"count": 10, "ocr": 8, "detect": 64}

# evaluation indices start far past any training prefix, so the eval
# split is disjoint from training data by construction
HELDOUT_START = 1_000_000


# ---------------------------------------------------------------------------
# evaluation sets and task metrics
# ---------------------------------------------------------------------------

def _filtered(mix: str, category: str, n: int, seed: int, start: int):
    out = []
    ds = dataset(mix, 10 ** 9, seed)
    i = start
    while len(out) < n:
        s = ds[i]
        if s.category == category:
            out.append(s)
        i += 1
    return out


def eval_sets(seed: int, per_task: int, start: int = HELDOUT_START) -> dict:
    """Held-out samples per task: caption, count, detect, ocr."""
    semantic = dataset("semantic", 10 ** 9, seed)
    return {
        "caption": [semantic[start + i] for i in range(per_task)],
        "count": _filtered("instruct", "count", per_task, seed, start),
        "detect": _filtered("align", "detect", per_task, seed, start),
        "ocr": _filtered("align", "ocr", per_task, seed, start),
    }


def text_eval_set(seed: int, n: int, start: int = HELDOUT_START):
    ds = dataset("text_only", 10 ** 9, seed)
    return [ds[start + i] for i in range(n)]


@dataclass
class EvalReport:
    accuracies: dict
    perplexity: float
    sample_counts: dict
    checkpoint_id: str = ""
    config_hash: str = ""

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([self.accuracies[t] for t in TASKS if t in self.accuracies]))


def _default_generate(model, seq, max_new, sample):
    return M.generate(model, seq, max_new=max_new).text


def sequence_nll(model: M.MMoEModel, seq, sequence_hook=None) -> tuple:
    """(total negative log likelihood, token count) over loss positions."""
    if sequence_hook is not None:
        seq = sequence_hook(seq)
    loss = M.sequence_loss(model, seq)
    count = int(seq.loss_mask[1:].sum())
    return loss.item() * count, count


def text_perplexity(model: M.MMoEModel, samples, sequence_hook=None) -> float:
    total, count = 0.0, 0
    with no_grad():
        for s in samples:
            seq = M.encode_sample(model, s.prompt, s.response, None, 64)
            nll, c = sequence_nll(model, seq, sequence_hook)
            total += nll
            count += c
    return float(np.exp(total / max(count, 1)))


def caption_token_accuracy(model: M.MMoEModel, samples, max_patches,
                           sequence_hook=None) -> float:
    """Teacher-forced next-token accuracy over the response positions."""
    hit, total = 0, 0
    with no_grad():
        for s in samples:
            seq = M.encode_sample(model, s.prompt, s.response, s.image, max_patches)
            if sequence_hook is not None:
                seq = sequence_hook(seq)
            logits = M.model_forward(model, seq).data
            targets = seq.token_ids[1:]
            mask = seq.loss_mask[1:]
            pred = logits[:-1].argmax(axis=-1)
            hit += int((pred[mask] == targets[mask]).sum())
            total += int(mask.sum())
    return hit / max(total, 1)


def eval_tasks(model: M.MMoEModel, sets: dict, text_samples, max_patches: int,
               generate_fn=None, sequence_hook=None, checkpoint_id: str = "",
               config_hash: str = "") -> EvalReport:
    """Greedy decoding with exact string match on the short-answer tasks,
    token accuracy on captions, and held-out text-only perplexity."""
    generate_fn = generate_fn or _default_generate
    accuracies = {}
    counts = {}
    for task, samples in sets.items():
        counts[task] = len(samples)
        if task == "caption":
            accuracies[task] = caption_token_accuracy(model, samples, max_patches,
                                                      sequence_hook)
            continue
        hits = 0
        with no_grad():
            for s in samples:
                seq = M.encode_sample(model, s.prompt, None, s.image, max_patches)
                if sequence_hook is not None:
                    seq = sequence_hook(seq)
                out = generate_fn(model, seq, GEN_BUDGET[task], s)
                hits += int(out == s.response.encode())
        accuracies[task] = hits / max(len(samples), 1)
    ppl = text_perplexity(model, text_samples, sequence_hook)
    counts["text_only"] = len(text_samples)
    return EvalReport(accuracies=accuracies, perplexity=ppl, sample_counts=counts,
                      checkpoint_id=checkpoint_id, config_hash=config_hash)


# ---------------------------------------------------------------------------
# scaling curves
# ---------------------------------------------------------------------------

def _scaled_steps(cfg: StageConfig, size: int) -> StageConfig:
    steps = max(1, round(cfg.total_steps * size / cfg.data_size))
    return replace(cfg, data_size=size, total_steps=steps,
                   warmup_steps=min(cfg.warmup_steps, steps // 2))


def scaling_rows_to_csv(rows) -> str:
    lines = ["stage,size,metric,value"]
    lines += [f"{stage},{size},{metric},{value:.6f}" for stage, size, metric, value in rows]
    return "\n".join(lines) + "\n"


def scaling_curve(base_model: M.MMoEModel, stage_cfgs, sizes, finetune_cfg,
                  seed: int, eval_per_task: int = 16, text_eval: int = 16) -> list:
    """Nested-prefix data scaling: for each stage, train on each prefix
    size (steps proportional to data), fine-tune on a fixed small
    instruction set, and evaluate. Earlier stages run at full size before
    a later stage's curve is measured."""
    sets = eval_sets(seed, eval_per_task)
    text_samples = text_eval_set(seed, text_eval)
    rows = []
    prereq = base_model.clone()
    for stage_cfg in stage_cfgs:
        for size in sizes:
            m = prereq.clone()
            if size > 0:
                train_stage(m, _scaled_steps(stage_cfg, size), seed=seed, log_every=0)
            train_stage(m, finetune_cfg, seed=seed, log_every=0)
            report = eval_tasks(m, sets, text_samples, finetune_cfg.max_patches)
            for task in TASKS:
                rows.append((stage_cfg.stage, size, task, report.accuracies[task]))
            rows.append((stage_cfg.stage, size, "mean_accuracy", report.mean_accuracy))
            rows.append((stage_cfg.stage, size, "text_perplexity", report.perplexity))
        train_stage(prereq, stage_cfg, seed=seed, log_every=0)
    return rows


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def arm_hash(arm_config: dict) -> str:
    return hashlib.sha256(json.dumps(arm_config, sort_keys=True).encode()).hexdigest()[:12]


def _all_text_hook(seq):
    seq.modality = np.zeros(len(seq), dtype=bool)
    return seq


@dataclass
class AblationArm:
    name: str
    trainable_groups: tuple
    route_all_text: bool = False


@dataclass
class AblationRow:
    arm: str
    trainable_params: int
    config_hash: str
    report: EvalReport
    ppl_degradation: float


TUNING_ARMS = (
    AblationArm("full_plain", tuple(g for g in M.GROUPS if g != M.FFN_V),
                route_all_text=True),
    AblationArm("expert_full", tuple(M.GROUPS)),
    AblationArm("expert_delta", tuple(DELTA_GROUPS)),
)

ATTENTION_ARMS = (
    AblationArm("freeze_attention", tuple(DELTA_GROUPS)),
    AblationArm("unfreeze_attention", tuple(DELTA_GROUPS) + (M.ATTN,)),
)


def run_ablation(base_model: M.MMoEModel, arms, train_cfg: StageConfig, seed: int,
                 eval_per_task: int = 24, text_eval: int = 24) -> list:
    """Train every arm from a shared init on the identical data stream;
    only the freeze set (and, for the plain arm, expert routing) differs."""
    sets = eval_sets(seed, eval_per_task)
    text_samples = text_eval_set(seed, text_eval)
    base_ppl = text_perplexity(base_model, text_samples)
    group_sizes = M.group_param_counts(base_model)

    rows = []
    for arm in arms:
        cfg = replace(train_cfg, stage=CUSTOM, trainable_groups=arm.trainable_groups)
        arm_cfg = {"arm": arm.name, "trainable_groups": sorted(arm.trainable_groups),
                   "route_all_text": arm.route_all_text, "seed": seed,
                   "data_mix": cfg.data_mix, "total_steps": cfg.total_steps,
                   "peak_lr": cfg.peak_lr, "batch_size": cfg.batch_size}
        hook = _all_text_hook if arm.route_all_text else None
        m = base_model.clone()
        train_stage(m, cfg, seed=seed, log_every=0, sequence_hook=hook)
        report = eval_tasks(m, sets, text_samples, cfg.max_patches,
                            sequence_hook=hook, checkpoint_id=arm.name,
                            config_hash=arm_hash(arm_cfg))
        rows.append(AblationRow(
            arm=arm.name,
            trainable_params=sum(group_sizes[g] for g in arm.trainable_groups),
            config_hash=arm_hash(arm_cfg),
            report=report,
            ppl_degradation=report.perplexity - base_ppl))
    return rows


def ablation_tuning(base_model, train_cfg, seed, **kw) -> list:
    return run_ablation(base_model, TUNING_ARMS, train_cfg, seed, **kw)


def ablation_attention(base_model, train_cfg, seed, **kw) -> list:
    return run_ablation(base_model, ATTENTION_ARMS, train_cfg, seed, **kw)


def ablation_rows_to_csv(rows) -> str:
    lines = ["arm,trainable_params,config_hash,text_perplexity,ppl_degradation,"
             + ",".join(TASKS)]
    for r in rows:
        accs = ",".join(f"{r.report.accuracies[t]:.6f}" for t in TASKS)
        lines.append(f"{r.arm},{r.trainable_params},{r.config_hash},"
                     f"{r.report.perplexity:.6f},{r.ppl_degradation:.6f},{accs}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# modular baseline
# ---------------------------------------------------------------------------

def encoder_param_count(width: int, llm_cfg: M.ModelConfig, depth: int = 2) -> int:
    s2 = llm_cfg.patch_stride ** 2 * 3
    patch = s2 * width + width
    pos = llm_cfg.pe_grid ** 2 * width
    block = 2 * width + 4 * width * width + 8 * width * width
    proj = width * llm_cfg.dim + llm_cfg.dim
    return patch + pos + depth * block + proj


def visual_side_params(llm: M.MMoEModel) -> int:
    counts = M.group_param_counts(llm)
    return sum(counts[g] for g in M.VISUAL_GROUPS)


def match_encoder_width(llm: M.MMoEModel, depth: int = 2) -> int:
    """Encoder width whose parameter count best matches the monolithic
    model's visual additions; must land within 5% by construction."""
    target = visual_side_params(llm)
    best, best_err = 4, float("inf")
    for width in range(4, 4097):
        err = abs(encoder_param_count(width, llm.cfg, depth) - target)
        if err < best_err:
            best, best_err = width, err
    rel = best_err / target
    if rel > 0.05:
        raise ValueError(f"cannot match activated params within 5% (best {rel:.1%})")
    return best


class ModularBaseline:
    """A separate bidirectional patch encoder + projector feeding the same
    text LM with the visual experts disabled (all rows routed as text)."""

    def __init__(self, llm: M.MMoEModel, depth: int = 2, width: int | None = None,
                 seed: int = 0):
        self.llm = llm
        self.depth = depth
        self.width = width or match_encoder_width(llm, depth)
        cfg = llm.cfg
        rng = np.random.default_rng(seed)
        w, d = self.width, cfg.dim

        def lin(r, c):
            return Tensor(rng.normal(0.0, 0.02, (r, c)).astype(np.float32))

        self.patch_w = lin(cfg.patch_stride ** 2 * 3, w)
        self.patch_b = Tensor(np.zeros(w, dtype=np.float32))
        self.pos = lin(cfg.pe_grid ** 2, w)
        self.blocks = []
        for _ in range(depth):
            self.blocks.append({
                "norm1": Tensor(np.ones(w, dtype=np.float32)),
                "wq": lin(w, w), "wk": lin(w, w), "wv": lin(w, w), "wo": lin(w, w),
                "norm2": Tensor(np.ones(w, dtype=np.float32)),
                "fc1": lin(w, 4 * w), "fc2": lin(4 * w, w),
            })
        self.proj_w = lin(w, d)
        self.proj_b = Tensor(np.zeros(d, dtype=np.float32))

    def param_count(self) -> int:
        return encoder_param_count(self.width, self.llm.cfg, self.depth)

    def activated_params(self) -> int:
        llm_counts = M.group_param_counts(self.llm)
        text_side = sum(v for g, v in llm_counts.items() if g not in M.VISUAL_GROUPS)
        return text_side + self.param_count()

    def encode(self, patches: np.ndarray, grid_hw: tuple) -> Tensor:
        """Bidirectional encoder over patch rows, then projection to d."""
        heads = 4
        w = self.width
        hd = w // heads
        with no_grad():
            pe = tok.interpolate_pe(self.pos, self.llm.cfg.pe_grid, *grid_hw)
            x = add(add(matmul(Tensor(patches), self.patch_w), self.patch_b), pe)
            for blk in self.blocks:
                xn = rms_norm(x, blk["norm1"])
                q = matmul(xn, blk["wq"])
                k = matmul(xn, blk["wk"])
                v = matmul(xn, blk["wv"])
                outs = []
                for h in range(heads):
                    sl = (h * hd, (h + 1) * hd)
                    qh, kh, vh = (slice_cols(t, *sl) for t in (q, k, v))
                    scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(hd))
                    outs.append(matmul(softmax(scores, axis=-1), vh))
                x = add(x, matmul(concat_cols(outs), blk["wo"]))
                xn = rms_norm(x, blk["norm2"])
                x = add(x, matmul(silu(matmul(xn, blk["fc1"])), blk["fc2"]))
            return add(matmul(x, self.proj_w), self.proj_b)


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------

@dataclass
class LatencyReport:
    arch: str
    image_tokens: int
    text_tokens: int
    ttft_s: float
    tokens_per_s: float
    concurrency: int
    repeats: int

    @property
    def total_tokens(self) -> int:
        return self.image_tokens + self.text_tokens


def _bench_inputs(cfg: M.ModelConfig, image_tokens: int, text_tokens: int, seed: int):
    rng = np.random.default_rng(seed)
    patches = rng.random((image_tokens, cfg.patch_stride ** 2 * 3)).astype(np.float32)
    if image_tokens % 8:
        raise ValueError("image token counts must be divisible by 8 (grid rows)")
    grid = (image_tokens // 8, 8)
    text_ids = np.concatenate([[tok.BOS],
                               rng.integers(0, 256, size=text_tokens - 1)])
    return patches, grid, text_ids


def _mono_prepare(model: M.MMoEModel, patches, grid, text_ids):
    """Monolithic path: the lightweight tokenizer runs inline; the whole
    sequence goes through one prefill."""
    cfg = model.cfg
    with no_grad():
        feats = add(matmul(Tensor(patches), model.patch_w, row_stable=True),
                    model.patch_b)
        pe = tok.interpolate_pe(model.vis_pe, cfg.pe_grid, *grid)
        x = add(feats, pe)
        hidden = silu(add(matmul(x, model.proj_w1), model.proj_b1))
        vis = add(matmul(hidden, model.proj_w2), model.proj_b2)
        text = tok.make_text_batch(text_ids, model.tok_embed)
        emb = concat_rows([vis, text.embeddings])
    n_vis = patches.shape[0]
    modality = np.concatenate([np.ones(n_vis, dtype=bool),
                               np.zeros(len(text_ids), dtype=bool)])
    return emb, modality


def _modular_prepare(baseline: ModularBaseline, patches, grid, text_ids):
    """Modular path: a separate encoder forward precedes the prefill, and
    every token routes through the text expert."""
    with no_grad():
        vis = baseline.encode(patches, grid)
        text = tok.make_text_batch(text_ids, baseline.llm.tok_embed)
        emb = concat_rows([vis, text.embeddings])
    n = patches.shape[0] + len(text_ids)
    return emb, np.zeros(n, dtype=bool)


def _timed_request(model: M.MMoEModel, prepare, output_tokens: int):
    t0 = time.perf_counter()
    emb, modality = prepare()
    prep_s = time.perf_counter() - t0
    seq = tok.MultimodalSequence(embeddings=emb, modality=modality,
                                 loss_mask=np.zeros(len(modality), dtype=bool),
                                 token_ids=np.zeros(len(modality), dtype=np.int64))
    gen = M.generate(model, seq, max_new=output_tokens, stop_at_eos=False)
    ttft = prep_s + gen.prefill_seconds
    decode = len(gen.step_seconds) / sum(gen.step_seconds) if gen.step_seconds else 0.0
    return ttft, decode


def bench_latency(model: M.MMoEModel, baseline: ModularBaseline, image_tokens: int,
                  text_tokens: int, output_tokens: int = 32, concurrency: int = 1,
                  repeats: int = 9, warmup: int = 3, seed: int = 0) -> list:
    """Median TTFT and decode throughput for both architectures at a fixed
    token budget; warmup runs are measured and discarded."""
    patches, grid, text_ids = _bench_inputs(model.cfg, image_tokens, text_tokens, seed)
    reports = []
    for arch, prepare in (
            ("monolithic", lambda: _mono_prepare(model, patches, grid, text_ids)),
            ("modular", lambda: _modular_prepare(baseline, patches, grid, text_ids))):
        ttfts, speeds = [], []
        for r in range(warmup + repeats):
            if concurrency == 1:
                ttft, tps = _timed_request(model, prepare, output_tokens)
                run_ttfts, run_speeds = [ttft], [tps]
            else:
                run_ttfts, run_speeds = _interleaved_requests(
                    model, prepare, output_tokens, concurrency)
            if r >= warmup:
                ttfts.extend(run_ttfts)
                speeds.extend(run_speeds)
        reports.append(LatencyReport(
            arch=arch, image_tokens=image_tokens, text_tokens=text_tokens,
            ttft_s=float(np.median(ttfts)), tokens_per_s=float(np.median(speeds)),
            concurrency=concurrency, repeats=repeats))
    return reports


def _interleaved_requests(model, prepare, output_tokens, concurrency):
    """Round-robin decode across concurrent requests in one process; TTFT
    counts each request's queueing delay from the global start."""
    t_start = time.perf_counter()
    states = []
    ttfts = []
    with no_grad():
        for _ in range(concurrency):
            emb, modality = prepare()
            cache = M.KVCache.empty(model.cfg, len(modality) + output_tokens)
            logits = M._forward_cached(model, emb, modality, cache)
            prev = int(np.argmax(logits))
            ttfts.append(time.perf_counter() - t_start)
            states.append({"cache": cache, "prev": prev, "steps": []})
        for _ in range(output_tokens - 1):
            for st in states:
                t0 = time.perf_counter()
                emb = gather_rows(model.tok_embed, [st["prev"]])
                logits = M._forward_cached(model, emb, np.array([False]), st["cache"])
                st["prev"] = int(np.argmax(logits))
                st["steps"].append(time.perf_counter() - t0)
    speeds = [len(st["steps"]) / sum(st["steps"]) for st in states if st["steps"]]
    return ttfts, speeds


def latency_rows_to_csv(reports) -> str:
    lines = ["arch,image_tokens,text_tokens,total_tokens,ttft_s,tokens_per_s,"
             "concurrency,repeats"]
    for r in reports:
        lines.append(f"{r.arch},{r.image_tokens},{r.text_tokens},{r.total_tokens},"
                     f"{r.ttft_s:.6f},{r.tokens_per_s:.3f},{r.concurrency},{r.repeats}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# attention dumps
# ---------------------------------------------------------------------------

def attention_locality(layer_map: np.ndarray, visual: slice) -> float | None:
    """Mean |i-j| weighted by attention mass inside the visual block."""
    block = layer_map[visual, visual]
    n = block.shape[0]
    if n == 0:
        return None
    i, j = np.mgrid[0:n, 0:n]
    causal = j <= i
    mass = float(block[causal].sum())
    if mass == 0.0:
        return None
    return float((block[causal] * np.abs(i - j)[causal]).sum() / mass)


def dump_attention(model: M.MMoEModel, sample, out_dir, max_patches: int,
                   checkpoint_id: str = "") -> dict:
    """Write per-layer head-averaged attention as raw float32 matrices
    plus a JSON sidecar with segment boundaries and locality stats."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seq = M.encode_sample(model, sample.prompt, sample.response, sample.image,
                          max_patches)
    maps = M.attention_maps(model, seq)  # (L, H, n, n)
    mean_maps = maps.mean(axis=1)
    n = maps.shape[-1]
    n_visual = int(seq.modality.sum())
    visual = slice(0, n_visual)

    files = []
    locality = []
    for li in range(mean_maps.shape[0]):
        name = f"attn_layer{li}.bin"
        (out_dir / name).write_bytes(np.ascontiguousarray(mean_maps[li]).tobytes())
        files.append(name)
        locality.append(attention_locality(mean_maps[li], visual))

    meta = {
        "checkpoint_id": checkpoint_id,
        "layers": int(maps.shape[0]),
        "heads": int(maps.shape[1]),
        "sequence_length": n,
        "dtype": "float32",
        "layout": "row-major",
        "head_aggregation": "mean",
        "segments": {"system": 0, "visual": n_visual, "user": n - n_visual},
        "locality_per_layer": locality,
        "locality_definition": "sum(a_ij*|i-j|)/sum(a_ij) over causal visual pairs",
        "files": files,
    }
    (out_dir / "attention_meta.json").write_text(json.dumps(meta, indent=2,
                                                            sort_keys=True))
    return {"meta": meta, "maps": mean_maps}

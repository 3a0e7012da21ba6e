"""Synthetic referring object classification.

The toy decoder is pretrained on single-object scenes, where the question
``is the object <loc> a A or a B`` is unambiguous, then frozen. Evaluation
scenes hold two adjacent objects of different classes with a visual prompt
on one of them; without referring information the model can only guess.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tape, grad_check, logsoftmax
from .edit import SequenceLayout, build_bias
from .geometry import PROMPT_KINDS, RegionMask, VisualPrompt, rasterize_prompt, write_pgm
from .model import (DecoderWeights, ModelConfig, SyntheticImage, encode_image, encode_text,
                    forward_with_attention, init_weights, question_tokens, trace_decoder,
                    trace_encode_image, trace_encode_text)
from .relevancy import relevancy_map, relevancy_score
from .steering import SteeringConfig, SteeringProblem, pool_context_attention, steer

log = logging.getLogger(__name__)

METHODS = ("none", "steer-hard", "steer-soft", "edit-att", "color", "blur")
DEFAULT_NOISE = 0.05
MIN_SIZE, MAX_SIZE = 2, 3


@dataclass(frozen=True)
class Scenario:
    seed: int
    image: SyntheticImage
    prompt: VisualPrompt
    question: tuple[int, ...]
    candidates: tuple[int, int]
    answer: int
    target: RegionMask
    distractor: RegionMask
    variants: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def region(self) -> RegionMask:
        h, w = self.target.height, self.target.width
        return rasterize_prompt(self.prompt, h, w)


def _paint(cfg: ModelConfig, objects, rng, noise: float) -> SyntheticImage:
    ch = np.zeros((cfg.grid_h, cfg.grid_w, cfg.n_channels))
    ch[..., cfg.background_channel] = 1.0
    for (r, c, h, w), k in objects:
        ch[r:r + h, c:c + w, :] = 0.0
        ch[r:r + h, c:c + w, k] = 1.0
    if noise:
        ch = ch + noise * rng.standard_normal(ch.shape)
    return SyntheticImage(ch, noise)


def _cells(cfg: ModelConfig, box) -> RegionMask:
    r, c, h, w = box
    bits = np.zeros((cfg.grid_h, cfg.grid_w), dtype=bool)
    bits[r:r + h, c:c + w] = True
    return RegionMask(bits.reshape(-1), cfg.grid_h, cfg.grid_w)


def _place_pair(cfg: ModelConfig, rng):
    """Target box plus a non-overlapping distractor touching it (or one cell away)."""
    H, W = cfg.grid_h, cfg.grid_w
    th, tw, dh, dw = rng.integers(MIN_SIZE, MAX_SIZE + 1, size=4)
    tr = int(rng.integers(0, H - th + 1))
    tc = int(rng.integers(0, W - tw + 1))
    side = int(rng.integers(4))
    gap = int(rng.integers(0, 2))
    if side in (0, 1):  # left / right: rows overlap
        dr = tr + int(rng.integers(-(dh - 1), th))
        dc = tc - gap - dw if side == 0 else tc + tw + gap
    else:  # above / below: columns overlap
        dc = tc + int(rng.integers(-(dw - 1), tw))
        dr = tr - gap - dh if side == 2 else tr + th + gap
    if dr < 0 or dc < 0 or dr + dh > H or dc + dw > W:
        return None
    return (tr, tc, int(th), int(tw)), (dr, dc, int(dh), int(dw))


def _prompt_for(kind: str, cfg: ModelConfig, box, rng) -> VisualPrompt:
    r, c, h, w = box
    H, W = cfg.grid_h, cfg.grid_w
    if kind == "box":
        return VisualPrompt.box(c / W, r / H, (c + w) / W, (r + h) / H)
    if kind == "mask":
        bm = np.zeros((H, W), dtype=bool)
        bm[r:r + h, c:c + w] = True
        return VisualPrompt.mask(bm)

    def inside():
        cr = r + int(rng.integers(h))
        cc = c + int(rng.integers(w))
        u, v = rng.uniform(0.05, 0.95, size=2)
        return (cc + u) / W, (cr + v) / H

    if kind == "point":
        return VisualPrompt.point(*inside())
    if kind == "scribble":
        return VisualPrompt.scribble([inside() for _ in range(int(rng.integers(2, 4)))])
    raise ValueError(f"unknown prompt kind {kind!r}")


def gen_scenario(seed: int, cfg: ModelConfig = ModelConfig(), prompt_kind: str = "box",
                 noise: float = DEFAULT_NOISE, max_tries: int = 100) -> Scenario:
    """Two-object hard-negative scene, deterministic in ``seed``."""
    if cfg.n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng([seed, 7])
    for _ in range(max_tries):
        pair = _place_pair(cfg, rng)
        if pair is not None:
            break
    else:
        raise RuntimeError(f"seed {seed}: could not place two objects in {max_tries} tries")
    target_box, distractor_box = pair
    target_cls, distractor_cls = (int(k) for k in rng.choice(cfg.n_classes, size=2, replace=False))
    candidates = (target_cls, distractor_cls) if rng.random() < 0.5 else (distractor_cls, target_cls)
    image = _paint(cfg, [(target_box, target_cls), (distractor_box, distractor_cls)], rng, noise)
    if prompt_kind not in PROMPT_KINDS:
        raise ValueError(f"unknown prompt kind {prompt_kind!r}")
    # every variant is drawn so the scene itself does not depend on prompt_kind
    variants = {k: _prompt_for(k, cfg, target_box, rng) for k in PROMPT_KINDS}
    return Scenario(seed, image, variants[prompt_kind], tuple(question_tokens(cfg, *candidates)),
                    candidates, target_cls, _cells(cfg, target_box), _cells(cfg, distractor_box),
                    variants)


def single_object_batch(cfg: ModelConfig, rng, batch: int, noise: float = DEFAULT_NOISE):
    """Unambiguous training scenes: (image tokens (B, V, C), question ids (B, L), labels (B,))."""
    H, W = cfg.grid_h, cfg.grid_w
    tokens, questions, labels = [], [], []
    for _ in range(batch):
        h, w = (int(x) for x in rng.integers(MIN_SIZE, MAX_SIZE + 1, size=2))
        r = int(rng.integers(0, H - h + 1))
        c = int(rng.integers(0, W - w + 1))
        k, other = (int(x) for x in rng.choice(cfg.n_classes, size=2, replace=False))
        img = _paint(cfg, [((r, c, h, w), k)], rng, noise)
        pair = (k, other) if rng.random() < 0.5 else (other, k)
        tokens.append(img.tokens())
        questions.append(question_tokens(cfg, *pair))
        labels.append(k)
    return np.stack(tokens), np.asarray(questions), np.asarray(labels)


# ---------------------------------------------------------------------------
# pretraining

def _batch_loss(tape: Tape, params, cfg: ModelConfig, tokens, questions, labels):
    x_v = trace_encode_image(tape, tokens, params, cfg)
    x_t = trace_encode_text(tape, questions, params, cfg)
    logits, _ = trace_decoder(tape, x_v, x_t, params, cfg)
    onehot = np.eye(cfg.n_classes)[labels]
    loss = -(logsoftmax(logits) * onehot).sum() * (1.0 / len(labels))
    return loss, logits


@dataclass
class PretrainResult:
    weights: DecoderWeights
    losses: list[float]


def pretrain_toy(weights: DecoderWeights | None = None, steps: int = 1500, seed: int = 0,
                 batch: int = 32, lr: float = 3e-3, noise: float = DEFAULT_NOISE) -> PretrainResult:
    """Adam on cross-entropy over single-object scenes; returns frozen weights."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    weights = weights or init_weights(ModelConfig(seed=seed))
    cfg = weights.config
    rng = np.random.default_rng([seed, 11])
    params = {k: v.copy() for k, v in weights.params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    s = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses = []
    for step in range(1, steps + 1):
        tokens, questions, labels = single_object_batch(cfg, rng, batch, noise)
        tape = Tape()
        leaves = {k: tape.leaf(v, requires_grad=True) for k, v in params.items()}
        try:
            loss, _ = _batch_loss(tape, leaves, cfg, tokens, questions, labels)
            grads = tape.backward(loss)
        except NonFiniteError as exc:
            raise RuntimeError(f"pretraining diverged at step {step}: {exc}") from exc
        losses.append(loss.item())
        lr_t = lr * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / steps))
        for k, leaf in leaves.items():
            g = grads[leaf]
            m[k] = b1 * m[k] + (1 - b1) * g
            s[k] = b2 * s[k] + (1 - b2) * g * g
            mhat = m[k] / (1 - b1 ** step)
            shat = s[k] / (1 - b2 ** step)
            params[k] = params[k] - lr_t * mhat / (np.sqrt(shat) + eps)
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, np.mean(losses[-100:]))
    return PretrainResult(weights.replace(params), losses)


def single_object_accuracy(weights: DecoderWeights, n: int = 500, seed: int = 1234) -> float:
    cfg = weights.config
    rng = np.random.default_rng([seed, 13])
    tokens, questions, labels = single_object_batch(cfg, rng, n)
    tape = Tape()
    _, logits = _batch_loss(tape, weights.on_tape(tape), cfg, tokens, questions, labels)
    # score only the two listed candidates, as in evaluation
    cand = questions[:, [5, 8]] - (cfg.vocab_size - cfg.n_classes)
    picked = np.take_along_axis(logits.data, cand, axis=1)
    pred = cand[np.arange(n), np.argmax(picked, axis=1)]
    return float(np.mean(pred == labels))


# ---------------------------------------------------------------------------
# image-space baselines

def apply_color_baseline(image: SyntheticImage, region: RegionMask) -> SyntheticImage:
    """Set the highlight channel to 1 on region cells."""
    ch = image.channels.copy()
    ch.reshape(-1, ch.shape[-1])[region.bits, -1] = 1.0
    return SyntheticImage(ch, image.noise)


def apply_blur_baseline(image: SyntheticImage, region: RegionMask) -> SyntheticImage:
    """Replace every out-of-region cell with the mean out-of-region channel vector."""
    ch = image.channels.copy()
    flat = ch.reshape(-1, ch.shape[-1])
    outside = ~region.bits
    if outside.any():
        flat[outside] = flat[outside].mean(axis=0)
    return SyntheticImage(ch, image.noise)


def emit_heatmap(values, grid: tuple[int, int], path: str | Path,
                 write_csv: bool = True) -> tuple[Path, Path | None]:
    """Write ``path`` as a P2 PGM scaled to 0-255 by the max, plus a sibling raw CSV."""
    v = np.asarray(values, dtype=np.float64).reshape(grid)
    if not np.all(np.isfinite(v)):
        raise ValueError("heatmap values must be finite")
    top = v.max()
    scaled = np.zeros(grid, dtype=int) if top <= 0 else np.rint(255.0 * np.clip(v, 0, None) / top).astype(int)
    path = Path(path)
    write_pgm(path, scaled)
    if not write_csv:
        return path, None
    csv_path = path.with_suffix(".csv")
    np.savetxt(csv_path, v, delimiter=",", fmt="%.17g")
    return path, csv_path


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class MethodOutcome:
    method: str
    prediction: int
    correct: bool
    logit_margin: float
    ratio_before: float
    ratio_after: float
    relevancy: float
    trace_length: int = 0
    stop_reason: str = ""


@dataclass
class RocReport:
    methods: tuple[str, ...]
    records: list[dict] = field(default_factory=list)

    def rows(self, method: str) -> list[dict]:
        return [r for r in self.records if r["method"] == method]

    def accuracy(self, method: str) -> float:
        rows = self.rows(method)
        return float(np.mean([r["correct"] for r in rows])) if rows else float("nan")

    def mean(self, method: str, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows(method)]))

    @property
    def n_scenarios(self) -> int:
        return len({r["seed"] for r in self.records})

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "n", "accuracy", "mean_ratio_before", "mean_ratio_after",
                    "frac_ratio_increased", "mean_relevancy"])
        for m in self.methods:
            rows = self.rows(m)
            inc = np.mean([r["ratio_after"] > r["ratio_before"] for r in rows])
            w.writerow([m, len(rows), repr(self.accuracy(m)), repr(self.mean(m, "ratio_before")),
                        repr(self.mean(m, "ratio_after")), repr(float(inc)),
                        repr(self.mean(m, "relevancy"))])
        return buf.getvalue()

    def write(self, path: str | Path) -> tuple[Path, Path]:
        """Summary CSV at ``path`` and per-scenario JSON lines next to it."""
        path = Path(path)
        path.write_text(self.summary_csv())
        jl = path.with_suffix(".jsonl")
        jl.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))
        return path, jl


def _predict(logits: np.ndarray, scenario: Scenario, cfg: ModelConfig) -> tuple[int, float]:
    a, b = scenario.candidates
    margin = float(logits[a] - logits[b])
    pred = a if margin >= 0 else b
    # margin in favour of the ground truth
    return pred, margin if scenario.answer == a else -margin


def steering_prompt(scenario: Scenario, method: str):
    """Prompt (and explicit mask) handed to the optimizer for a steering method.

    Hard energy needs a region: scribble/point prompts pass their own
    rasterization as the mask. Soft energy needs a sparse prompt: box/mask
    scenarios fall back to their sampled point inside the target.
    """
    prompt = scenario.prompt
    sparse = prompt.kind in ("scribble", "point")
    if method == "steer-hard":
        return prompt, (scenario.region if sparse else None)
    return (prompt if sparse else scenario.variants["point"]), None


def _context_ratio(record, region: RegionMask, config: SteeringConfig) -> float:
    ctx = pool_context_attention(record, config.text_rows, config.layers)
    return ctx.in_region_ratio(region)


def evaluate_scenario(weights: DecoderWeights, scenario: Scenario, methods: Sequence[str],
                      config: SteeringConfig) -> list[MethodOutcome]:
    cfg = weights.config
    region = scenario.region
    q = list(scenario.question)
    e_v = encode_image(scenario.image, weights)
    e_t = encode_text(q, weights)
    base_logits, base_rec = forward_with_attention(e_v, None, e_t, weights)
    before = _context_ratio(base_rec, region, config)
    out = []
    for method in methods:
        p_v = bias = None
        image = scenario.image
        extra = {}
        if method == "none":
            logits, ratio = base_logits, before
        elif method in ("steer-hard", "steer-soft"):
            prompt, mask = steering_prompt(scenario, method)
            run_cfg = replace(config, energy="hard" if method == "steer-hard" else "soft")
            state = steer(image, q, prompt, weights, run_cfg, mask=mask)
            p_v = state.p_v
            logits, rec = forward_with_attention(e_v, p_v, e_t, weights)
            ratio = _context_ratio(rec, region, config)
            extra = {"trace_length": len(state.trace), "stop_reason": state.trace.stop_reason}
        elif method == "edit-att":
            bias = build_bias(region, config.eta, SequenceLayout(cfg.n_visual, len(q)))
            logits, rec = forward_with_attention(e_v, None, e_t, weights, bias)
            ratio = _context_ratio(rec, region, config)
        elif method in ("color", "blur"):
            image = (apply_color_baseline if method == "color" else apply_blur_baseline)(image, region)
            logits, rec = forward_with_attention(encode_image(image, weights), None, e_t, weights)
            ratio = _context_ratio(rec, region, config)
        else:
            raise ValueError(f"unknown method {method!r}")
        pred, margin = _predict(logits, scenario, cfg)
        rel = relevancy_score(relevancy_map(image, q, weights, steering=p_v, bias=bias), region)
        out.append(MethodOutcome(method, pred, pred == scenario.answer, margin, before, ratio, rel, **extra))
    return out


def gradcheck_suite(n: int = 100, coords: int = 8, eps: float = 1e-6, weights=None) -> list[float]:
    """Latent-gradient check on ``n`` seeded decoders, alternating hard and soft energy.

    Each config draws fresh decoder weights (unless ``weights`` is given), a
    scenario and a random latent, then compares ``coords`` random coordinates
    of the tape gradient against central differences. Returns per-config
    max relative errors.
    """
    errors = []
    for seed in range(n):
        rng = np.random.default_rng([seed, 3])
        w = weights if weights is not None else init_weights(ModelConfig(seed=seed))
        cfg = w.config
        energy = "hard" if seed % 2 == 0 else "soft"
        sc = gen_scenario(seed, cfg, "box" if energy == "hard" else "point")
        config = SteeringConfig(energy=energy)
        problem = SteeringProblem.for_prompt(sc.image, sc.question, sc.prompt, w, config)
        p0 = 0.1 * rng.standard_normal((cfg.n_visual, cfg.d_model))
        picks = rng.choice(p0.size, size=coords, replace=False)
        errors.append(grad_check(lambda leaf: problem.trace(leaf.tape, leaf)[0], p0, eps, picks))
    return errors


def pinned_seeds(n: int = 200, start: int = 0) -> list[int]:
    return list(range(start, start + n))


def run_roc(weights: DecoderWeights, methods: Sequence[str] = METHODS, n_scenarios: int = 200,
            config: SteeringConfig = SteeringConfig(), prompt_kind: str = "box",
            seeds: Iterable[int] | None = None) -> RocReport:
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    seeds = pinned_seeds(n_scenarios, config.seed * 100_000) if seeds is None else list(seeds)
    report = RocReport(tuple(methods))
    for seed in seeds:
        sc = gen_scenario(seed, weights.config, prompt_kind)
        for o in evaluate_scenario(weights, sc, methods, config):
            report.records.append({
                "seed": seed, "method": o.method, "prompt": prompt_kind,
                "answer": sc.answer, "candidates": list(sc.candidates),
                "prediction": o.prediction, "correct": bool(o.correct),
                "logit_margin": o.logit_margin, "ratio_before": o.ratio_before,
                "ratio_after": o.ratio_after, "relevancy": o.relevancy,
                "trace_length": o.trace_length, "stop_reason": o.stop_reason,
            })
    return report

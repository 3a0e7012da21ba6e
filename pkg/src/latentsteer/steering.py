"""Test-time optimization of a visual-token offset against an attention energy.

At decode step 0 the offset ``p_v`` (zero-initialized, shape of the visual
tokens) is added to the visual tokens. The context attention (text-row
attention over visual columns, averaged over heads, rows and layers) is
scored against the referred region and ``p_v`` follows plain gradient
descent on that score, smoothed by an exponential moving average and cut
short by a relative-change early stop. Model weights are never touched.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor
from .geometry import RegionMask, VisualPrompt, distance_transform, rasterize_prompt, soft_weights
from .model import (AttentionRecord, DecoderWeights, SyntheticImage, encode_image, encode_text,
                    trace_decoder)

log = logging.getLogger(__name__)

PAPER_ALPHA = 400.0
# step sizes for the 32-wide toy decoder, picked per energy on tuning seeds
# 10000-10199 by scripts/tune_alpha.py (best accuracy with >= 99% descent)
TOY_ALPHA = {"hard": 16.0, "soft": 1.0}


@dataclass(frozen=True)
class SteeringConfig:
    T: int = 4
    alpha: float | None = None  # None = TOY_ALPHA[energy]
    beta: float = 0.5
    sigma: float = 0.1
    delta: float = 0.25
    energy: str = "hard"
    layers: tuple[int, ...] | None = None  # None = all layers
    head_reduction: str = "mean"
    forward_latent: str = "ema"  # "ema" feeds the shadow forward, "raw" the raw iterate
    text_rows: tuple[int, ...] | None = None  # None = every text token (context token)
    seed: int = 0
    eta: float = 10.0

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.alpha is not None and not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.energy not in ("hard", "soft"):
            raise ValueError(f"unknown energy {self.energy!r}")
        if self.head_reduction != "mean":
            raise ValueError("only mean head reduction is supported")
        if self.forward_latent not in ("ema", "raw"):
            raise ValueError("forward_latent must be 'ema' or 'raw'")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        if self.text_rows is not None:
            object.__setattr__(self, "text_rows", tuple(int(r) for r in self.text_rows))

    @property
    def step_size(self) -> float:
        return TOY_ALPHA[self.energy] if self.alpha is None else float(self.alpha)

    @classmethod
    def paper(cls, **kw) -> "SteeringConfig":
        return cls(alpha=PAPER_ALPHA, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SteeringConfig":
        d = dict(d)
        if d.get("layers") == "all":
            d["layers"] = None
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path: str | Path) -> SteeringConfig:
    """Read a JSON config with keys T, alpha, beta, sigma, delta, energy, layers,
    head_reduction, seed (plus optional eta, forward_latent, text_rows)."""
    return SteeringConfig.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# latent state

@dataclass
class LatentVariable:
    value: np.ndarray
    ema_shadow: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, shape) -> "LatentVariable":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def latent_step(p_v: LatentVariable, grad: np.ndarray, alpha: float) -> LatentVariable:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != p_v.value.shape:
        raise ValueError(f"gradient shape {grad.shape} != latent shape {p_v.value.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    with np.errstate(all="ignore"):
        value = p_v.value - alpha * grad
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("step produced a non-finite latent")
    return LatentVariable(value, p_v.ema_shadow, p_v.iteration + 1)


def ema_update(shadow: np.ndarray, current: np.ndarray, beta: float) -> np.ndarray:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    shadow = np.asarray(shadow, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    if shadow.shape != current.shape:
        raise ValueError("shape mismatch between shadow and current value")
    return beta * current + (1.0 - beta) * shadow


# ---------------------------------------------------------------------------
# attention pooling and energies

@dataclass(frozen=True)
class ContextAttention:
    values: np.ndarray
    layers: tuple[int, ...]
    text_rows: tuple[int, ...]

    def in_region_ratio(self, region: RegionMask) -> float:
        return in_region_ratio(self.values, region)


def _pool(layer_maps, n_visual: int, rows: Sequence[int], layers: Sequence[int]):
    """Works on numpy arrays and tape tensors alike."""
    pooled = None
    row_idx = np.asarray(rows)
    for l in layers:
        heads = layer_maps[l]
        a = heads[0]
        for h in heads[1:]:
            a = a + h
        a = a * (1.0 / len(heads))
        block = a[(row_idx[:, None], np.arange(n_visual)[None, :])]
        ctx = block.mean(axis=0)
        pooled = ctx if pooled is None else pooled + ctx
    return pooled * (1.0 / len(layers))


def _resolve(n_layers: int, n_seq: int, n_visual: int, text_rows, layer_set):
    text = list(range(n_visual, n_seq))
    rows = text if text_rows is None else [text[r] for r in text_rows]
    layers = list(range(n_layers)) if layer_set is None else list(layer_set)
    if not rows:
        raise ValueError("no text rows selected for pooling")
    if not layers:
        raise ValueError("no layers selected for pooling")
    for l in layers:
        if not 0 <= l < n_layers:
            raise ValueError(f"layer {l} out of range")
    return rows, layers


def pool_context_attention(record: AttentionRecord, text_rows=None, layer_set=None,
                           head_reduction: str = "mean") -> ContextAttention:
    """Mean over heads, then over text rows (visual columns only), then over layers.

    ``text_rows`` index into the text tokens (0 = first text token); None
    selects all of them.
    """
    if head_reduction != "mean":
        raise ValueError("only mean head reduction is supported")
    n_seq = record.maps[0][0].shape[-1]
    rows, layers = _resolve(record.n_layers, n_seq, record.n_visual, text_rows, layer_set)
    values = _pool(record.maps, record.n_visual, rows, layers)
    return ContextAttention(np.asarray(values), tuple(layers), tuple(r - record.n_visual for r in rows))


def _values(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def _check_mass(a):
    if not _values(a).sum() > 0:
        raise ValueError("attention vector has no mass")


def hard_energy(attention, region: RegionMask | np.ndarray):
    """``(1 - in-region mass / total mass)^2``; accepts arrays or tape tensors."""
    a = attention.values if isinstance(attention, ContextAttention) else attention
    _check_mass(a)
    bits = region.bits if isinstance(region, RegionMask) else np.asarray(region, dtype=bool)
    ratio = (a * bits.astype(np.float64)).sum() / a.sum()
    return (1 - ratio) ** 2


def soft_energy(attention, weights: np.ndarray):
    """``(1 - sum_i w_i A_i / sum_i A_i)^2`` with the weighted sum over every visual token."""
    a = attention.values if isinstance(attention, ContextAttention) else attention
    _check_mass(a)
    ratio = (a * np.asarray(weights, dtype=np.float64)).sum() / a.sum()
    return (1 - ratio) ** 2


def in_region_ratio(attention, region: RegionMask) -> float:
    a = _values(attention.values if isinstance(attention, ContextAttention) else attention)
    return float(a[region.bits].sum() / a.sum())


# ---------------------------------------------------------------------------
# energy trace and early stop

@dataclass
class EnergyTrace:
    energies: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    stop_reason: str = "completed"  # completed | early_stopped | diverged
    rebounds: int = 0

    def __len__(self) -> int:
        return len(self.energies)

    def append(self, energy: float, ratio: float) -> None:
        if self.energies and energy > self.energies[-1]:
            self.rebounds += 1
        self.energies.append(float(energy))
        self.ratios.append(float(ratio))

    def is_non_increasing(self) -> bool:
        e = self.energies
        return all(b <= a for a, b in zip(e, e[1:]))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "energy", "in_region_ratio", "stopped"])
            last = len(self.energies) - 1
            for i, (e, r) in enumerate(zip(self.energies, self.ratios)):
                stopped = self.stop_reason if i == last else ""
                w.writerow([i, repr(e), repr(r), stopped])


def early_stop(trace: EnergyTrace | Sequence[float], delta: float = 0.25) -> bool:
    """True once ``|L_t - L_0| / L_0 >= delta``; a zero initial energy stops at once."""
    energies = trace.energies if isinstance(trace, EnergyTrace) else list(trace)
    if not energies:
        raise ValueError("empty trace")
    first, last = energies[0], energies[-1]
    if first == 0:
        return True
    return abs(last - first) / first >= delta


# ---------------------------------------------------------------------------
# the steering loop

@dataclass
class SteeredState:
    p_v: np.ndarray
    trace: EnergyTrace
    attention: ContextAttention
    initial_attention: ContextAttention
    region: RegionMask
    latent: LatentVariable | None = None


class SteeringProblem:
    """Energy of a fixed (image, question, region) as a function of ``p_v``."""

    def __init__(self, e_v: np.ndarray, e_t: np.ndarray, weights: DecoderWeights, region: RegionMask,
                 config: SteeringConfig, soft: np.ndarray | None = None):
        self.e_v = e_v
        self.e_t = e_t
        self.weights = weights
        self.region = region
        self.config = config
        self.soft = soft
        cfg = weights.config
        self.rows, self.layers = _resolve(cfg.n_layers, cfg.n_visual + e_t.shape[0], cfg.n_visual,
                                          config.text_rows, config.layers)

    @classmethod
    def for_prompt(cls, image: SyntheticImage, question, prompt: VisualPrompt, weights: DecoderWeights,
                   config: SteeringConfig, mask: RegionMask | None = None) -> "SteeringProblem":
        cfg = weights.config
        region, soft = _region_and_soft(prompt, config, cfg.grid_h, cfg.grid_w, mask)
        return cls(encode_image(image, weights), encode_text(list(question), weights), weights,
                   region, config, soft)

    def trace(self, tape: Tape, p_v: Tensor):
        """Record forward + energy on ``tape``; returns (energy, context, attn, logits)."""
        cfg = self.weights.config
        params = self.weights.on_tape(tape)
        x_v = tape.constant(self.e_v) + p_v
        logits, attn = trace_decoder(tape, x_v, tape.constant(self.e_t), params, cfg)
        ctx = _pool(attn, cfg.n_visual, self.rows, self.layers)
        if self.config.energy == "soft":
            energy = soft_energy(ctx, self.soft)
        else:
            energy = hard_energy(ctx, self.region)
        return energy, ctx, attn, logits

    def energy(self, p_v: np.ndarray) -> float:
        tape = Tape()
        return self.trace(tape, tape.leaf(p_v))[0].item()

    def energy_and_grad(self, p_v: np.ndarray):
        tape = Tape()
        leaf = tape.leaf(p_v, requires_grad=True)
        energy, ctx, _, _ = self.trace(tape, leaf)
        grad = tape.backward(energy)[leaf]
        return energy.item(), ctx.data, grad

    def context(self, values: np.ndarray) -> ContextAttention:
        n_vis = self.weights.config.n_visual
        return ContextAttention(values, tuple(self.layers), tuple(r - n_vis for r in self.rows))


def _region_and_soft(prompt: VisualPrompt, config: SteeringConfig, height: int, width: int,
                     mask: RegionMask | None):
    if config.energy == "hard" and prompt.kind in ("scribble", "point") and mask is None:
        raise ValueError("hard energy with a scribble/point prompt needs an explicit mask")
    region = mask if mask is not None else rasterize_prompt(prompt, height, width)
    soft = None
    if config.energy == "soft":
        source = prompt if prompt.kind in ("scribble", "point") else region
        soft = soft_weights(distance_transform(source, height, width), config.sigma)
    return region, soft


def steer(image: SyntheticImage, question, prompt: VisualPrompt, weights: DecoderWeights,
          config: SteeringConfig = SteeringConfig(), mask: RegionMask | None = None) -> SteeredState:
    """Optimize ``p_v`` for up to ``config.T`` gradient steps before the first token.

    The returned ``p_v`` is the EMA shadow. A non-finite forward (which a raw
    large step size can provoke) ends the loop with reason ``diverged`` and
    keeps the last finite latent.
    """
    problem = SteeringProblem.for_prompt(image, question, prompt, weights, config, mask)
    region = problem.region
    latent = LatentVariable.zeros(problem.e_v.shape)
    trace = EnergyTrace()
    initial = final = None
    p_used = latent.ema_shadow
    for t in range(config.T + 1):
        p_fwd = latent.ema_shadow if config.forward_latent == "ema" else latent.value
        try:
            energy, ctx, grad = problem.energy_and_grad(p_fwd)
        except NonFiniteError as exc:
            log.warning("steering diverged at iteration %d: %s", t, exc)
            trace.stop_reason = "diverged"
            break
        p_used = latent.ema_shadow
        final = problem.context(ctx)
        if initial is None:
            initial = final
        trace.append(energy, final.in_region_ratio(region))
        if t > 0 and trace.energies[-1] > trace.energies[-2]:
            log.info("energy rebound at iteration %d: %.6g -> %.6g", t, trace.energies[-2], energy)
        if early_stop(trace, config.delta):
            trace.stop_reason = "early_stopped"
            break
        if t == config.T:
            break
        try:
            latent = latent_step(latent, grad, config.step_size)
        except NonFiniteError as exc:
            log.warning("steering diverged at iteration %d: %s", t, exc)
            trace.stop_reason = "diverged"
            break
        latent.ema_shadow = ema_update(latent.ema_shadow, latent.value, config.beta)

    if initial is None:
        raise NonFiniteError("steering failed on the unsteered forward pass")
    return SteeredState(p_used.copy(), trace, final, initial, region, latent)

"""Gradient-weighted attention rollout from the first output token.

With ``R = I`` over the sequence, each layer contributes
``A_bar = mean_heads(relu(dy/dA * A))`` and ``R <- R + A_bar @ R``, where
``y`` is the logit of the greedily chosen first answer token. The row of
the last prompt position restricted to the visual columns is the map.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tape
from .geometry import RegionMask
from .model import DecoderWeights, SyntheticImage, encode_image, encode_text, trace_decoder


def rollout(attn, grads, n_visual: int) -> np.ndarray:
    """Propagate ``attn[layer][head]`` maps weighted by matching ``grads``."""
    n = attn[0][0].shape[-1]
    r = np.eye(n)
    for maps, gs in zip(attn, grads):
        cam = np.mean([np.maximum(g * a, 0.0) for a, g in zip(maps, gs)], axis=0)
        r = r + cam @ r
    return r[n - 1, :n_visual].copy()


def relevancy_from_embeddings(e_v: np.ndarray, e_t: np.ndarray, weights: DecoderWeights, p_v=None,
                              bias=None, token: int | None = None) -> np.ndarray:
    """Relevancy over visual tokens for precomputed embeddings."""
    tape = Tape()
    params = weights.on_tape(tape)
    x_v = tape.constant(e_v) if p_v is None else tape.constant(e_v) + tape.constant(p_v)
    matrix = layers = None
    if bias is not None:
        matrix, layers = bias.matrix, bias.layers
    logits, attn = trace_decoder(tape, x_v, tape.constant(e_t), params, weights.config, matrix, layers)
    k = int(np.argmax(logits.data)) if token is None else token
    grads = tape.backward(logits[k], wrt=[a for maps in attn for a in maps])
    return rollout([[a.data for a in maps] for maps in attn],
                   [[grads[a] for a in maps] for maps in attn], e_v.shape[0])


def relevancy_map(image: SyntheticImage, prompt, weights: DecoderWeights, steering=None,
                  bias=None, token: int | None = None) -> np.ndarray:
    """Length-V relevancy vector; ``token`` overrides the argmax answer index."""
    p_v = getattr(steering, "p_v", steering)
    return relevancy_from_embeddings(encode_image(image, weights), encode_text(list(prompt), weights),
                                     weights, p_v, bias, token)


def relevancy_score(rel_map: np.ndarray, region: RegionMask) -> float:
    """Max relevancy inside the region."""
    return float(np.max(np.asarray(rel_map)[region.bits]))

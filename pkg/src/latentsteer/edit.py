"""Direct attention editing: an additive pre-softmax bias on referred columns."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RegionMask
from .model import DecoderWeights, forward_with_attention


@dataclass(frozen=True)
class SequenceLayout:
    n_visual: int
    n_text: int

    @property
    def length(self) -> int:
        return self.n_visual + self.n_text


@dataclass(frozen=True)
class AttentionBias:
    eta: float
    region: RegionMask
    matrix: np.ndarray  # (n, n), added to every selected layer's scores
    layers: tuple[int, ...] | None = None


def build_bias(region: RegionMask, eta: float, layout: SequenceLayout, layers=None,
               all_rows: bool = False) -> AttentionBias:
    """``eta`` on in-region visual columns of the text rows, zero elsewhere.

    With ``all_rows`` every row gets the bias on its in-region columns, minus
    the entries the causal mask forbids.
    """
    if len(region.bits) != layout.n_visual:
        raise ValueError("region does not match the visual token count")
    n = layout.length
    m = np.zeros((n, n))
    cols = region.indices
    rows = np.arange(n) if all_rows else np.arange(layout.n_visual, n)
    m[np.ix_(rows, cols)] = eta
    m[np.triu(np.ones((n, n), dtype=bool), k=1)] = 0.0
    m.setflags(write=False)
    return AttentionBias(float(eta), region, m, None if layers is None else tuple(layers))


def forward_with_bias(e_v, e_t, weights: DecoderWeights, bias: AttentionBias, p_v=None):
    """Step-0 forward with the bias added inside the softmax of the selected layers."""
    n = e_v.shape[0] + e_t.shape[0]
    if bias.matrix.shape != (n, n):
        raise ValueError(f"bias layout {bias.matrix.shape} does not match sequence length {n}")
    return forward_with_attention(e_v, p_v, e_t, weights, bias)

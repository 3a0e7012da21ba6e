"""A miniature LLaVA-shaped decoder over grid images.

Visual tokens (one per grid cell) come first, followed by the question
tokens; N pre-norm causal attention blocks run over the concatenation and
the final position is read out over the answer vocabulary (one token per
object class). Everything is expressed with :mod:`latentsteer.autodiff`
primitives so gradients reach the visual-token offset, the attention maps,
or the weights themselves.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, concat, layernorm, relu, rowsoftmax

WORDS = ("is", "the", "object", "<loc>", "a", "or")


@dataclass(frozen=True)
class ModelConfig:
    grid_h: int = 8
    grid_w: int = 8
    n_classes: int = 6
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_mlp: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def n_visual(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_channels(self) -> int:
        # classes, background, highlight
        return self.n_classes + 2

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab_size(self) -> int:
        return len(WORDS) + self.n_classes

    @property
    def highlight_channel(self) -> int:
        return self.n_classes + 1

    @property
    def background_channel(self) -> int:
        return self.n_classes


def word_id(word: str) -> int:
    return WORDS.index(word)


def class_token(cfg: ModelConfig, k: int) -> int:
    if not 0 <= k < cfg.n_classes:
        raise ValueError(f"class {k} out of range")
    return len(WORDS) + k


def question_tokens(cfg: ModelConfig, class_a: int, class_b: int) -> list[int]:
    """``is the object <loc> a A or a B``"""
    w = word_id
    return [w("is"), w("the"), w("object"), w("<loc>"), w("a"), class_token(cfg, class_a),
            w("or"), w("a"), class_token(cfg, class_b)]


@dataclass(frozen=True)
class SyntheticImage:
    channels: np.ndarray  # (H, W, K + 2)
    noise: float = 0.0

    @property
    def height(self) -> int:
        return self.channels.shape[0]

    @property
    def width(self) -> int:
        return self.channels.shape[1]

    def tokens(self) -> np.ndarray:
        return self.channels.reshape(-1, self.channels.shape[-1])

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.channels, dtype="<f8").tobytes()).hexdigest()


def blank_image(cfg: ModelConfig) -> SyntheticImage:
    ch = np.zeros((cfg.grid_h, cfg.grid_w, cfg.n_channels))
    ch[..., cfg.background_channel] = 1.0
    return SyntheticImage(ch)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


# ---------------------------------------------------------------------------
# weights

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.d_model, cfg.d_mlp
    shapes = {"align": (cfg.n_channels, d), "embed": (cfg.vocab_size, d)}
    for l in range(cfg.n_layers):
        shapes.update({
            f"l{l}.ln1_g": (d,), f"l{l}.ln1_b": (d,),
            f"l{l}.wq": (d, d), f"l{l}.wk": (d, d), f"l{l}.wv": (d, d), f"l{l}.wo": (d, d),
            f"l{l}.ln2_g": (d,), f"l{l}.ln2_b": (d,),
            f"l{l}.w1": (d, m), f"l{l}.b1": (m,), f"l{l}.w2": (m, d), f"l{l}.b2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "readout": (d, cfg.n_classes)})
    return shapes


@dataclass(frozen=True)
class DecoderWeights:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.params):
            raise ValueError("parameter names do not match the config")
        frozen = {}
        for name, shape in shapes.items():
            arr = np.array(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def replace(self, params: dict[str, np.ndarray]) -> "DecoderWeights":
        return DecoderWeights(self.config, params)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in param_shapes(self.config):
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def on_tape(self, tape: Tape, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: tape.leaf(v, requires_grad=requires_grad) for k, v in self.params.items()}


def init_weights(cfg: ModelConfig) -> DecoderWeights:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        short = name.split(".")[-1]
        if short.endswith("_g"):
            params[name] = np.ones(shape)
        elif short.endswith("_b") or short in ("b1", "b2"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    return DecoderWeights(cfg, params)


_MAGIC = b"LSTOYMLM"
_VERSION = 1
_HEADER = struct.Struct("<8sI8q")


def save_weights(weights: DecoderWeights, path: str | Path) -> str:
    """Write the flat binary format and a ``.sha256`` sidecar; returns the checksum."""
    c = weights.config
    header = _HEADER.pack(_MAGIC, _VERSION, c.grid_h, c.grid_w, c.n_classes, c.d_model,
                          c.n_layers, c.n_heads, c.d_mlp, c.seed)
    body = b"".join(np.ascontiguousarray(weights.params[n], dtype="<f8").tobytes()
                    for n in param_shapes(c))
    path = Path(path)
    path.write_bytes(header + body)
    digest = weights.checksum()
    path.with_name(path.name + ".sha256").write_text(digest + "\n")
    return digest


def load_weights(path: str | Path, verify: bool = True) -> DecoderWeights:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, *dims = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    cfg = ModelConfig(*dims)
    shapes = param_shapes(cfg)
    expected = sum(int(np.prod(s)) for s in shapes.values()) * 8
    if len(raw) - _HEADER.size != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(raw) - _HEADER.size}")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    params, off = {}, 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        params[name] = flat[off:off + n].reshape(shape)
        off += n
    weights = DecoderWeights(cfg, params)
    sidecar = path.with_name(path.name + ".sha256")
    if verify and sidecar.exists():
        want = sidecar.read_text().strip()
        if want != weights.checksum():
            raise ValueError(f"{path}: checksum mismatch with {sidecar.name}")
    return weights


DEFAULT_WEIGHTS = Path(__file__).parent / "data" / "toy_default.bin"


def load_default_weights() -> DecoderWeights:
    """Shipped decoder: ``pretrain --steps 800 --seed 0`` on the default config."""
    return load_weights(DEFAULT_WEIGHTS)


# ---------------------------------------------------------------------------
# forward

@dataclass(frozen=True)
class AttentionRecord:
    """``maps[layer][head]`` is an (n, n) row-stochastic matrix."""
    maps: tuple[tuple[np.ndarray, ...], ...]
    n_visual: int

    @property
    def n_layers(self) -> int:
        return len(self.maps)

    @property
    def n_heads(self) -> int:
        return len(self.maps[0])

    def layer(self, l: int) -> np.ndarray:
        return np.stack(self.maps[l])


def trace_encode_image(tape: Tape, image_tokens, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    tokens = np.asarray(image_tokens, dtype=np.float64)
    if tokens.shape[-2:] != (cfg.n_visual, cfg.n_channels):
        raise ValueError(f"image tokens {tokens.shape[-2:]} do not match grid "
                         f"{(cfg.n_visual, cfg.n_channels)}")
    return tape.constant(tokens) @ params["align"] + sinusoidal_positions(cfg.n_visual, cfg.d_model)


def trace_encode_text(tape: Tape, token_ids, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    ids = np.asarray(token_ids, dtype=int)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id outside the vocabulary")
    n = ids.shape[-1]
    if n == 0:
        return tape.constant(np.zeros(ids.shape + (cfg.d_model,)))
    pe = sinusoidal_positions(cfg.n_visual + n, cfg.d_model)[cfg.n_visual:]
    return params["embed"][ids] + pe


def _norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return layernorm(x) * g + b


def trace_decoder(tape: Tape, x_v: Tensor, x_t: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                  bias: np.ndarray | None = None, bias_layers=None):
    """Run the decoder blocks on ``[x_v, x_t]``.

    Returns ``(logits, attn)`` where ``logits`` has shape ``(..., n_classes)``
    for the last position and ``attn[layer][head]`` are tape tensors.
    ``bias`` is added to the pre-softmax scores of every layer in
    ``bias_layers`` (all layers when None).
    """
    x = concat([x_v, x_t], axis=-2)
    n = x.shape[-2]
    causal = np.triu(np.ones((n, n), dtype=bool), k=1)
    if bias is not None and np.asarray(bias).shape[-2:] != (n, n):
        raise ValueError(f"bias layout {np.asarray(bias).shape} does not match sequence length {n}")
    dk = cfg.d_head
    inv_sqrt = 1.0 / math.sqrt(dk)
    attn = []
    for l in range(cfg.n_layers):
        p = lambda k: params[f"l{l}.{k}"]
        h = _norm(x, p("ln1_g"), p("ln1_b"))
        q, k_, v = h @ p("wq"), h @ p("wk"), h @ p("wv")
        heads, maps = [], []
        for hd in range(cfg.n_heads):
            cols = (Ellipsis, slice(hd * dk, (hd + 1) * dk))
            scores = (q[cols] @ k_[cols].T) * inv_sqrt
            if bias is not None and (bias_layers is None or l in bias_layers):
                scores = scores + bias
            a = rowsoftmax(scores, mask=causal)
            maps.append(a)
            heads.append(a @ v[cols])
        attn.append(maps)
        x = x + concat(heads, axis=-1) @ p("wo")
        h2 = _norm(x, p("ln2_g"), p("ln2_b"))
        x = x + (relu(h2 @ p("w1") + p("b1")) @ p("w2") + p("b2"))
    hf = _norm(x, params["lnf_g"], params["lnf_b"])
    last = hf[(Ellipsis, slice(n - 1, n), slice(None))]
    logits = (last @ params["readout"])[(Ellipsis, 0, slice(None))]
    return logits, attn


def encode_image(image: SyntheticImage, weights: DecoderWeights) -> np.ndarray:
    """Visual tokens ``e_v`` of shape (V, d)."""
    cfg = weights.config
    if (image.height, image.width) != (cfg.grid_h, cfg.grid_w):
        raise ValueError(f"image grid {(image.height, image.width)} does not match config "
                         f"{(cfg.grid_h, cfg.grid_w)}")
    tape = Tape()
    return trace_encode_image(tape, image.tokens(), {"align": tape.constant(weights["align"])}, cfg).data


def encode_text(token_ids, weights: DecoderWeights) -> np.ndarray:
    """Text tokens ``e_t`` of shape (L, d); positions continue after the visual tokens."""
    tape = Tape()
    return trace_encode_text(tape, list(token_ids), {"embed": tape.constant(weights["embed"])},
                             weights.config).data


def forward_with_attention(e_v: np.ndarray, p_v: np.ndarray | None, e_t: np.ndarray,
                           weights: DecoderWeights, bias=None):
    """Logits for the next token and every attention map.

    ``p_v`` (same shape as ``e_v``) is added to the visual tokens. ``bias`` is
    an :class:`~latentsteer.edit.AttentionBias` or a raw (n, n) matrix.
    """
    e_v = np.asarray(e_v, dtype=np.float64)
    if p_v is not None:
        p_v = np.asarray(p_v, dtype=np.float64)
        if p_v.shape != e_v.shape:
            raise ValueError(f"latent shape {p_v.shape} does not match visual tokens {e_v.shape}")
    tape = Tape()
    params = weights.on_tape(tape)
    x_v = tape.constant(e_v) if p_v is None else tape.constant(e_v) + tape.constant(p_v)
    matrix, layers = _bias_parts(bias)
    logits, attn = trace_decoder(tape, x_v, tape.constant(e_t), params, weights.config, matrix, layers)
    record = AttentionRecord(tuple(tuple(a.data for a in maps) for maps in attn), e_v.shape[0])
    return logits.data, record


def _bias_parts(bias):
    if bias is None:
        return None, None
    if hasattr(bias, "matrix"):
        return bias.matrix, bias.layers
    return np.asarray(bias, dtype=np.float64), None


@dataclass(frozen=True)
class TokenSequence:
    n_visual: int
    prompt: tuple[int, ...]
    generated: tuple[int, ...]


def generate(image: SyntheticImage, prompt, weights: DecoderWeights, steering=None, steps: int = 1,
             bias=None) -> TokenSequence:
    """Greedy decoding over the answer vocabulary.

    ``steering`` is a :class:`~latentsteer.steering.SteeredState` (or a raw
    latent array); its latent is optimized once, before the first token, and
    the same steered visual tokens are reused for every later step. ``bias``
    applies at step 0 only.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = weights.config
    e_v = encode_image(image, weights)
    p_v = getattr(steering, "p_v", steering)
    ids = list(prompt)
    out = []
    for step in range(steps):
        e_t = encode_text(ids, weights)
        step_bias = bias if step == 0 else None
        logits, _ = forward_with_attention(e_v, p_v, e_t, weights, step_bias)
        tok = class_token(cfg, int(np.argmax(logits)))
        out.append(tok)
        ids.append(tok)
    return TokenSequence(cfg.n_visual, tuple(prompt), tuple(out))

"""Visual prompts on the token grid: rasterization, distance maps, soft weights.

Coordinates are normalized to [0, 1] with x along columns and y along rows.
Cell ``(row, col)`` has center ``((col + .5) / W, (row + .5) / H)`` and flat
token index ``row * W + col``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROMPT_KINDS = ("box", "mask", "scribble", "point")


@dataclass(frozen=True)
class VisualPrompt:
    kind: str
    coords: tuple = ()
    bitmap: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if self.kind == "mask":
            if self.bitmap is None or self.bitmap.ndim != 2:
                raise ValueError("mask prompt needs a 2-D bitmap")
            object.__setattr__(self, "bitmap", np.asarray(self.bitmap, dtype=bool))
            return
        pts = np.asarray(self.coords, dtype=float)
        if np.any(pts < 0) or np.any(pts > 1) or not np.all(np.isfinite(pts)):
            raise ValueError("prompt coordinates must lie in [0, 1]")
        if self.kind == "box":
            if pts.shape != (4,):
                raise ValueError("box needs (x0, y0, x1, y1)")
            x0, y0, x1, y1 = pts
            if x0 > x1 or y0 > y1:
                raise ValueError("box needs x0 <= x1 and y0 <= y1")
        elif self.kind == "point":
            if pts.shape != (2,):
                raise ValueError("point needs (x, y)")
        elif self.kind == "scribble":
            if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
                raise ValueError("scribble needs at least two (x, y) points")
        object.__setattr__(self, "coords", tuple(map(tuple, pts)) if pts.ndim == 2 else tuple(pts))

    @classmethod
    def box(cls, x0, y0, x1, y1):
        return cls("box", (x0, y0, x1, y1))

    @classmethod
    def point(cls, x, y):
        return cls("point", (x, y))

    @classmethod
    def scribble(cls, points):
        return cls("scribble", tuple(tuple(p) for p in points))

    @classmethod
    def mask(cls, bitmap):
        return cls("mask", bitmap=np.asarray(bitmap, dtype=bool))

    def to_record(self) -> dict:
        if self.kind == "mask":
            return {"type": "mask", "coords": self.bitmap.astype(int).tolist()}
        coords = [list(c) for c in self.coords] if self.kind == "scribble" else list(self.coords)
        return {"type": self.kind, "coords": coords}


def parse_prompt(record: dict, base_dir: str | Path | None = None) -> VisualPrompt:
    """Build a prompt from ``{"type": ..., "coords": [...]}``.

    Masks take either a nested 0/1 list in ``coords`` or a ``path`` to a
    P1/P2 bitmap (relative paths resolve against ``base_dir``).
    """
    kind = record.get("type")
    if kind == "mask":
        if "path" in record:
            path = Path(record["path"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            return VisualPrompt.mask(read_pnm(path) > 0)
        return VisualPrompt.mask(np.asarray(record["coords"]) > 0)
    coords = record.get("coords", ())
    if kind == "scribble":
        return VisualPrompt.scribble(coords)
    return VisualPrompt(kind, tuple(coords))


@dataclass(frozen=True, eq=False)
class RegionMask:
    bits: np.ndarray  # bool, shape (V,)
    height: int
    width: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool).reshape(-1)
        if bits.size != self.height * self.width:
            raise ValueError("mask length does not match grid")
        if not bits.any():
            raise ValueError("region mask is empty")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def grid(self) -> np.ndarray:
        return self.bits.reshape(self.height, self.width)

    def __or__(self, other: "RegionMask") -> "RegionMask":
        return RegionMask(self.bits | other.bits, self.height, self.width)

    def __len__(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionMask):
            return NotImplemented
        return (self.height, self.width) == (other.height, other.width) and \
            bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.height, self.width, self.bits.tobytes()))


def _cell_of(x: float, y: float, h: int, w: int) -> tuple[int, int]:
    return min(int(y * h), h - 1), min(int(x * w), w - 1)


def _line_cells(r0: int, c0: int, r1: int, c1: int):
    """Bresenham walk between two cells, endpoints included."""
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        yield r, c
        if r == r1 and c == c1:
            return
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def prompt_cells(prompt: VisualPrompt, height: int, width: int) -> np.ndarray:
    """Boolean (H, W) grid of cells covered by ``prompt`` (possibly empty)."""
    out = np.zeros((height, width), dtype=bool)
    if prompt.kind == "box":
        x0, y0, x1, y1 = prompt.coords
        cx = (np.arange(width) + 0.5) / width
        cy = (np.arange(height) + 0.5) / height
        out = ((cy[:, None] >= y0) & (cy[:, None] <= y1)) & ((cx[None, :] >= x0) & (cx[None, :] <= x1))
    elif prompt.kind == "mask":
        bm = prompt.bitmap
        rows = np.minimum(((np.arange(height) + 0.5) / height * bm.shape[0]).astype(int), bm.shape[0] - 1)
        cols = np.minimum(((np.arange(width) + 0.5) / width * bm.shape[1]).astype(int), bm.shape[1] - 1)
        out = bm[np.ix_(rows, cols)].copy()
    elif prompt.kind == "point":
        out[_cell_of(*prompt.coords, height, width)] = True
    else:
        cells = [_cell_of(x, y, height, width) for x, y in prompt.coords]
        for (r0, c0), (r1, c1) in zip(cells[:-1], cells[1:]):
            for rc in _line_cells(r0, c0, r1, c1):
                out[rc] = True
    return out


def rasterize_prompt(prompt: VisualPrompt, height: int, width: int) -> RegionMask:
    return RegionMask(prompt_cells(prompt, height, width).reshape(-1), height, width)


def grid_diagonal(height: int, width: int) -> float:
    return math.hypot(height, width)


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas; exact squared distances along one line."""
    n = len(f)
    d = np.full(n, np.inf)
    sites = np.flatnonzero(np.isfinite(f))
    if sites.size == 0:
        return d
    v = np.zeros(n, dtype=int)
    z = np.empty(n + 1)
    k = 0
    v[0] = sites[0]
    z[0], z[1] = -np.inf, np.inf

    def meet(q, p):
        return ((f[q] + q * q) - (f[p] + p * p)) / (2 * q - 2 * p)

    for q in sites[1:]:
        s = meet(q, v[k])
        while s <= z[k]:
            k -= 1
            s = meet(q, v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def squared_cell_distances(cells: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (in cell units) to the nearest set cell.

    Separable two-pass Felzenszwalb-Huttenlocher transform; results are
    integers stored as floats.
    """
    if not cells.any():
        raise ValueError("no prompt cells to measure distance from")
    f = np.where(cells, 0.0, np.inf)
    cols = np.stack([_edt_1d(f[:, j]) for j in range(f.shape[1])], axis=1)
    return np.stack([_edt_1d(cols[i, :]) for i in range(f.shape[0])], axis=0)


def distance_transform(prompt: VisualPrompt | RegionMask, height: int, width: int) -> np.ndarray:
    """Per-token distance to the nearest prompt cell, normalized by the grid diagonal."""
    if isinstance(prompt, RegionMask):
        cells = prompt.grid()
    else:
        cells = prompt_cells(prompt, height, width)
    sq = squared_cell_distances(cells)
    return (np.sqrt(sq) / grid_diagonal(height, width)).reshape(-1)


def soft_weights(distances: np.ndarray, sigma: float = 0.1) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d = np.asarray(distances, dtype=float)
    return np.exp(-(d * d) / (2.0 * sigma * sigma)) / (math.sqrt(2.0 * math.pi) * sigma)


# ---------------------------------------------------------------------------
# netpbm (ASCII P1/P2) bitmaps

def read_pnm(path: str | Path) -> np.ndarray:
    """Read an ASCII P1 or P2 file. P1 follows netpbm: 1 means black/set."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] not in ("P1", "P2"):
        raise ValueError(f"{path}: not an ASCII P1/P2 file")
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    if magic == "P1":
        body = "".join(tokens[3:])
        vals = [int(ch) for ch in body]
    else:
        vals = [int(t) for t in tokens[4:]]
    if len(vals) != w * h:
        raise ValueError(f"{path}: expected {w * h} samples, found {len(vals)}")
    return np.asarray(vals, dtype=int).reshape(h, w)


def write_pgm(path: str | Path, values: np.ndarray, maxval: int = 255) -> None:
    values = np.asarray(values, dtype=int)
    h, w = values.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in values]
    Path(path).write_text("\n".join(lines) + "\n")

"""Masks, boxes, polygons: contour extraction, resampling and rasterization.

Coordinate convention used throughout: images are indexed (row i, col j);
the continuous frame puts the center of pixel (i, j) at (x, y) =
(j + 0.5, i + 0.5), x growing rightward and y downward.  Polygons are
(N, 2) float arrays of (x, y) vertices, implicitly closed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)

# clockwise Moore neighborhood (y grows downward): E, SE, S, SW, W, NW, N, NE
_NEIGHBORS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


class GeometryError(ValueError):
    pass


class EmptyMaskError(GeometryError):
    pass


class DegenerateContourError(GeometryError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates; x1 > x0, y1 > y0."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise GeometryError(f"invalid box extents: {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0


@dataclass
class Instance:
    """One detected/annotated object: a label, a confidence and its polygons."""

    label: str
    score: float
    polygons: list[np.ndarray]


def as_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise GeometryError(f"mask must be 2-d and non-empty, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def validate_polygon(vertices) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
        raise GeometryError(f"polygon needs an (N>=3, 2) vertex array, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise GeometryError("polygon has non-finite vertex coordinates")
    return v


# ---------------------------------------------------------------------------
# contour tracing


_DIR_INDEX = {d: k for k, d in enumerate(_NEIGHBORS)}


def _trace_outer_border(fg: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Follow the outer border of an 8-connected component clockwise.

    `fg` must carry a one-pixel background margin and `start` must be the
    component's first foreground pixel in raster order (so its west neighbor
    is background).  Returns the closed walk of border pixels; pixels on
    one-pixel-wide parts may legitimately appear twice.  The walk stops when
    the start pixel is re-entered with the starting backtrack direction.
    """
    def scan(ci: int, cj: int, back: int) -> int:
        for k in range(1, 9):
            d = (back + k) % 8
            if fg[ci + _NEIGHBORS[d][0], cj + _NEIGHBORS[d][1]]:
                return d
        return -1

    si, sj = start
    back = 4  # west of the raster-first pixel is always background
    found = scan(si, sj, back)
    if found < 0:
        return [(si, sj)]  # isolated pixel
    first_move = found
    walk = [(si, sj)]
    ci, cj = si, sj
    budget = 4 * int(fg.sum()) + 8
    while budget > 0:
        budget -= 1
        # backtrack pixel = last background position scanned before `found`
        prev_d = (found - 1) % 8
        bi, bj = ci + _NEIGHBORS[prev_d][0], cj + _NEIGHBORS[prev_d][1]
        ci += _NEIGHBORS[found][0]
        cj += _NEIGHBORS[found][1]
        back = _DIR_INDEX[(bi - ci, bj - cj)]
        found = scan(ci, cj, back)
        if (ci, cj) == (si, sj) and found == first_move:
            return walk
        walk.append((ci, cj))
    raise GeometryError("border trace failed to close")  # pragma: no cover


def trace_component_contours(mask) -> list[np.ndarray]:
    """Outer-border pixel chains of all 8-connected components, raster order.

    Chains are (M, 2) arrays of (x, y) pixel-center coordinates.
    """
    mask = as_mask(mask)
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    chains = []
    for slc, k in zip(ndimage.find_objects(labels), range(1, count + 1)):
        comp = labels[slc] == k
        fg = np.pad(comp, 1)
        flat = np.flatnonzero(fg)
        si, sj = np.unravel_index(flat[0], fg.shape)
        walk = _trace_outer_border(fg, (int(si), int(sj)))
        oi = slc[0].start - 1
        oj = slc[1].start - 1
        pts = np.array([(j + oj + 0.5, i + oi + 0.5) for i, j in walk], dtype=np.float64)
        chains.append(pts)
    return chains


def _chain_arcs(chain: np.ndarray) -> np.ndarray:
    nxt = np.roll(chain, -1, axis=0)
    return np.hypot(*(nxt - chain).T)


def resample_contour(chain, spacing: float) -> np.ndarray:
    """Pick contour points at arc-length steps of ~`spacing` along a closed chain.

    Every selected edge except possibly the closing one has arc-length within
    [spacing - 1, spacing + 1]; the result never has fewer than 3 vertices.
    """
    chain = np.asarray(chain, dtype=np.float64)
    if chain.ndim != 2 or chain.shape[0] < 3:
        raise DegenerateContourError(f"need a closed chain of >= 3 points, got {chain.shape}")
    if spacing < 1:
        raise GeometryError(f"spacing must be >= 1, got {spacing}")
    arcs = _chain_arcs(chain)
    perimeter = float(arcs.sum())

    picks = [0]
    acc = 0.0
    for k in range(chain.shape[0] - 1):
        acc += arcs[k]
        # the half-step slack keeps every gap inside [spacing-1, spacing+1]
        # even when the chain steps diagonally (step length sqrt(2))
        if acc >= spacing - 0.5:
            picks.append(k + 1)
            acc = 0.0
    if len(picks) >= 3:
        return chain[picks]

    # spacing too coarse for this chain: floor at 3 evenly spaced vertices
    cum = np.concatenate([[0.0], np.cumsum(arcs)[:-1]])
    picks = [0]
    for target in (perimeter / 3.0, 2.0 * perimeter / 3.0):
        idx = int(np.argmin(np.abs(cum - target)))
        idx = max(idx, picks[-1] + 1)
        idx = min(idx, chain.shape[0] - (3 - len(picks)))
        picks.append(idx)
    return chain[picks]


def _outward_offset(chain: np.ndarray, points: np.ndarray, delta: float = 0.5) -> np.ndarray:
    """Push selected contour points outward by `delta` along local normals.

    Traced chains run along border-pixel centers; the pixels themselves
    extend half a pixel further out, so rasterizing a center polygon loses
    the outer ring.  The offset makes mask->polygons->mask round-trips tight.
    """
    m = chain.shape[0]
    if m < 3:
        return points
    w = min(2, (m - 1) // 2)
    area2 = float(np.sum(chain[:, 0] * np.roll(chain[:, 1], -1)
                         - np.roll(chain[:, 0], -1) * chain[:, 1]))
    turn = 1.0 if area2 >= 0 else -1.0
    out = points.copy()
    # locate each selected point on the chain to estimate its tangent
    for r, p in enumerate(points):
        k = int(np.argmin(np.abs(chain - p).sum(axis=1)))
        tang = chain[(k + w) % m] - chain[(k - w) % m]
        norm = np.hypot(*tang)
        if norm < 1e-9:
            tang = chain[(k + 1) % m] - chain[k]
            norm = np.hypot(*tang)
            if norm < 1e-9:
                continue
        tang = tang / norm
        out[r] = p + delta * turn * np.array([tang[1], -tang[0]])
    return out


def extract_polygons(mask, spacing: float = 10.0) -> list[np.ndarray]:
    """Convert a binary mask to one polygon per 8-connected component.

    Vertices sit on the traced outer border roughly every `spacing` pixels
    of contour arc length, nudged half a pixel outward so the polygon hugs
    the outer face of the border pixels.  Components whose whole contour is
    shorter than 3*spacing keep every contour pixel as a vertex; components
    with fewer than 3 distinct contour pixels are dropped.  An
    all-background mask yields [].
    """
    if spacing < 1:
        raise GeometryError(f"spacing must be >= 1, got {spacing}")
    polygons = []
    for chain in trace_component_contours(mask):
        distinct = _first_visit_unique(chain)
        if distinct.shape[0] < 3:
            continue
        perimeter = float(_chain_arcs(chain).sum())
        if perimeter < 3 * spacing:
            picked = distinct
        else:
            picked = resample_contour(chain, spacing)
        polygons.append(_outward_offset(chain, picked))
    return polygons


def _first_visit_unique(chain: np.ndarray) -> np.ndarray:
    seen = set()
    keep = []
    for k, p in enumerate(map(tuple, chain)):
        if p not in seen:
            seen.add(p)
            keep.append(k)
    return chain[keep]


# ---------------------------------------------------------------------------
# boxes


def fit_box(mask) -> Box:
    """Tightest axis-aligned box containing all foreground pixels."""
    mask = as_mask(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("cannot fit a box to an all-background mask")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def expand_box(box: Box, frac: float = 0.0, px: float = 0.0, bounds: Box | None = None) -> Box:
    """Move each side outward by frac*(side length)/2 plus px, then clip."""
    if frac < -0.5:
        raise GeometryError(f"frac must be >= -0.5, got {frac}")
    dx = frac * box.width / 2.0 + px
    dy = frac * box.height / 2.0 + px
    x0, x1 = box.x0 - dx, box.x1 + dx
    y0, y1 = box.y0 - dy, box.y1 + dy
    if bounds is not None:
        x0, x1 = max(x0, bounds.x0), min(x1, bounds.x1)
        y0, y1 = max(y0, bounds.y0), min(y1, bounds.y1)
    return Box(x0, y0, x1, y1)


# ---------------------------------------------------------------------------
# rasterization


def rasterize_mask(polygons, height: int, width: int) -> np.ndarray:
    """Fill polygons into a boolean mask (union over polygons).

    A pixel is foreground iff its center lies inside a polygon under the
    even-odd rule; centers exactly on an edge count as inside.
    """
    out = np.zeros((height, width), dtype=bool)
    if isinstance(polygons, np.ndarray) and polygons.ndim == 2:
        polygons = [polygons]
    for poly in polygons:
        v = validate_polygon(poly)
        j0 = max(int(math.floor(v[:, 0].min() - 0.5)), 0)
        j1 = min(int(math.ceil(v[:, 0].max() - 0.5)) + 1, width)
        i0 = max(int(math.floor(v[:, 1].min() - 0.5)), 0)
        i1 = min(int(math.ceil(v[:, 1].max() - 0.5)) + 1, height)
        if j0 >= j1 or i0 >= i1:
            continue
        xc = np.arange(j0, j1, dtype=np.float64) + 0.5
        yc = np.arange(i0, i1, dtype=np.float64) + 0.5
        inside = np.zeros((i1 - i0, j1 - j0), dtype=bool)
        on_edge = np.zeros_like(inside)
        nxt = np.roll(v, -1, axis=0)
        for (x1, y1), (x2, y2) in zip(v, nxt):
            crossing = (y1 <= yc) != (y2 <= yc)
            if crossing.any():
                with np.errstate(divide="ignore", invalid="ignore"):
                    xcross = x1 + (yc - y1) * (x2 - x1) / (y2 - y1)
                inside ^= crossing[:, None] & (xc[None, :] < xcross[:, None])
            on_edge |= _near_segment(xc, yc, x1, y1, x2, y2)
        out[i0:i1, j0:j1] |= inside | on_edge
    return out


def _near_segment(xc, yc, x1, y1, x2, y2, eps: float = 1e-9) -> np.ndarray:
    ex, ey = x2 - x1, y2 - y1
    px = xc[None, :] - x1
    py = yc[:, None] - y1
    seg2 = ex * ex + ey * ey
    if seg2 == 0.0:
        return (px * px + py * py) <= eps * eps
    t = np.clip((px * ex + py * ey) / seg2, 0.0, 1.0)
    dx = px - t * ex
    dy = py - t * ey
    return (dx * dx + dy * dy) <= eps * eps


def edge_sample_params(vertices, step: float = 1.0):
    """Per-edge sampling plan: (start index, end index, fraction) per sample.

    Edge k gets max(1, ceil(len_k / step)) samples at uniform fractions
    starting at t=0, so consecutive samples along the closed polygon are at
    most `step` apart and every vertex is itself a sample.
    """
    if step <= 0:
        raise GeometryError(f"step must be positive, got {step}")
    v = validate_polygon(vertices)
    n = v.shape[0]
    arcs = _chain_arcs(v)
    counts = np.maximum(1, np.ceil(arcs / step - 1e-9).astype(np.int64))
    ia = np.repeat(np.arange(n, dtype=np.int64), counts)
    ib = (ia + 1) % n
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(counts.sum(), dtype=np.float64) - np.repeat(offsets, counts)
    ts = within / np.repeat(counts, counts)
    return ia, ib, ts


def rasterize_edges(vertices, step: float = 1.0) -> np.ndarray:
    """Uniform point samples along all edges of a closed polygon."""
    v = validate_polygon(vertices)
    ia, ib, t = edge_sample_params(v, step)
    return (1.0 - t)[:, None] * v[ia] + t[:, None] * v[ib]


# ---------------------------------------------------------------------------
# serialization


def instances_to_json(instances: list[Instance]) -> dict:
    return {
        "instances": [
            {
                "label": inst.label,
                "score": float(inst.score),
                "polygons": [np.asarray(p, dtype=float).tolist() for p in inst.polygons],
            }
            for inst in instances
        ]
    }


def instances_from_json(doc: dict) -> list[Instance]:
    if not isinstance(doc, dict) or "instances" not in doc:
        raise GeometryError("polygon document must contain an 'instances' list")
    out = []
    for rec in doc["instances"]:
        polys = [validate_polygon(p) for p in rec["polygons"]]
        out.append(Instance(label=str(rec["label"]), score=float(rec["score"]), polygons=polys))
    return out


def save_instances(path, instances: list[Instance]) -> None:
    Path(path).write_text(json.dumps(instances_to_json(instances)))


def load_instances(path) -> list[Instance]:
    return instances_from_json(json.loads(Path(path).read_text()))


def save_mask_png(path, mask) -> None:
    arr = (as_mask(mask).astype(np.uint8)) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 127


def save_image_png(path, image) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255).round().astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def mask_to_polygon_instance(mask, label: str = "object", score: float = 1.0,
                             spacing: float = 10.0) -> Instance | None:
    """Build an Instance from a mask; None when no usable contour exists."""
    polys = extract_polygons(mask, spacing)
    if not polys:
        return None
    return Instance(label=label, score=score, polygons=polys)

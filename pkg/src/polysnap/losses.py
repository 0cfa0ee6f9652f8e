"""Training objective: Chamfer polygon loss plus edge-length regularizer.

Both polygons are turned into dense edge-point samples; the Chamfer term
averages nearest-neighbor distances both ways between the two sample sets.
Only the predicted side carries gradients.  In annotation mode, sample
terms whose true nearest distance is below a pixel threshold are zeroed
(value and gradient) so near-perfect initializations are left alone.

Distances use the stabilized form sqrt(d^2 + eps) - sqrt(eps), which is
differentiable at zero and exactly zero for coincident points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import edge_sample_params

SQRT_EPS = 1e-8

# at desk scale a full distance matrix beats the grid index; the index takes
# over for large sample sets (interactive sessions on dense polygons)
BRUTE_FORCE_LIMIT = 4_000_000


class DegeneratePolygonError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    w_chamfer: float = 1.0
    w_std: float = 0.1
    chamfer_mask_px: float = 0.0  # 0 disables masking; 2 in annotation mode
    edge_sample_step: float = 1.0

    def __post_init__(self):
        if self.w_chamfer < 0 or self.w_std < 0 or self.chamfer_mask_px < 0:
            raise ValueError(f"loss weights and mask must be >= 0: {self}")

    def to_json(self) -> dict:
        return {"w_chamfer": self.w_chamfer, "w_std": self.w_std,
                "chamfer_mask_px": self.chamfer_mask_px,
                "edge_sample_step": self.edge_sample_step}

    @classmethod
    def from_json(cls, doc: dict) -> "LossConfig":
        return cls(**{k: float(doc[k]) for k in
                      ("w_chamfer", "w_std", "chamfer_mask_px", "edge_sample_step") if k in doc})


@dataclass
class LossBreakdown:
    total: Tensor
    chamfer: Tensor
    std: Tensor
    w_chamfer: float
    w_std: float

    @property
    def total_value(self) -> float:
        return self.total.item()

    @property
    def chamfer_value(self) -> float:
        return self.chamfer.item()

    @property
    def std_value(self) -> float:
        return self.std.item()

    @property
    def weighted(self) -> dict[str, float]:
        return {"chamfer": self.w_chamfer * self.chamfer_value,
                "std": self.w_std * self.std_value}


def _check_not_degenerate(vertices: np.ndarray, name: str) -> None:
    if np.ptp(vertices, axis=0).max() < 1e-9:
        raise DegeneratePolygonError(f"{name}: all vertices coincide")


def _as_vertex_tensor(polygon) -> Tensor:
    if isinstance(polygon, Tensor):
        return polygon
    return Tensor(np.asarray(polygon, dtype=np.float64))


# ---------------------------------------------------------------------------
# nearest-neighbor matching


class GridIndex:
    """Uniform-grid point index with ring search; ties resolve to lowest index."""

    def __init__(self, points: np.ndarray, cell: float | None = None):
        self.points = np.asarray(points, dtype=np.float64)
        n = self.points.shape[0]
        if cell is None:
            span = np.ptp(self.points, axis=0)
            cell = max(float(np.sqrt(max(span[0] * span[1], 1e-12) / n)), 1e-6)
        self.cell = cell
        self.cells: dict[tuple[int, int], list[int]] = {}
        keys = np.floor(self.points / cell).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            self.cells.setdefault(key, []).append(i)
        lo, hi = keys.min(axis=0), keys.max(axis=0)
        self._max_ring = int(max(hi[0] - lo[0], hi[1] - lo[1])) + 2

    def query(self, q: np.ndarray) -> int:
        cx, cy = int(math.floor(q[0] / self.cell)), int(math.floor(q[1] / self.cell))
        best_d2 = np.inf
        best_i = -1
        r = 0
        while True:
            cand: list[int] = []
            if r == 0:
                cand = self.cells.get((cx, cy), [])
            else:
                for dx in range(-r, r + 1):
                    for dy in (-r, r):
                        cand += self.cells.get((cx + dx, cy + dy), [])
                for dy in range(-r + 1, r):
                    for dx in (-r, r):
                        cand += self.cells.get((cx + dx, cy + dy), [])
            if cand:
                idx = np.sort(np.asarray(cand))
                d = self.points[idx] - q
                d2 = d[:, 0] ** 2 + d[:, 1] ** 2
                k = int(np.argmin(d2))
                if d2[k] < best_d2 or (d2[k] == best_d2 and idx[k] < best_i):
                    best_d2 = float(d2[k])
                    best_i = int(idx[k])
            # any point in a ring not yet scanned sits >= r*cell away, so the
            # strict inequality also protects lowest-index tie-breaking
            if best_i >= 0 and (r * self.cell) ** 2 > best_d2:
                return best_i
            r += 1
            if r > self._max_ring + abs(cx) + abs(cy):
                return best_i  # pragma: no cover - safety net


def nearest_indices(points: np.ndarray, queries: np.ndarray,
                    method: str = "auto") -> np.ndarray:
    """Index of the nearest point for each query; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if method not in ("auto", "brute", "grid"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        method = "brute" if points.shape[0] * queries.shape[0] <= BRUTE_FORCE_LIMIT else "grid"
    if method == "brute":
        # |q - p|^2 expanded through one BLAS product; only the argmin is
        # consumed, so the last-ulp noise of the expansion cannot leak into
        # loss values (distances are recomputed exactly on the matched pairs)
        d2 = ((queries * queries).sum(axis=1)[:, None]
              + (points * points).sum(axis=1)[None, :]
              - 2.0 * (queries @ points.T))
        return d2.argmin(axis=1)
    index = GridIndex(points)
    return np.array([index.query(q) for q in queries], dtype=np.int64)


# ---------------------------------------------------------------------------
# loss terms


def differentiable_edge_samples(vertices: Tensor, step: float) -> Tensor:
    """Edge-point samples that stay linear in the vertex coordinates."""
    ia, ib, t = edge_sample_params(vertices.data, step)
    two_t = np.repeat(t[:, None], 2, axis=1)
    a = ad.mul(ad.gather_rows(vertices, ia), Tensor((1.0 - two_t).astype(vertices.dtype)))
    b = ad.mul(ad.gather_rows(vertices, ib), Tensor(two_t.astype(vertices.dtype)))
    return ad.add(a, b)


def _stabilized_distances(samples: Tensor, targets: np.ndarray) -> Tensor:
    diff = ad.sub(samples, Tensor(targets.astype(samples.dtype)))
    d2 = ad.tsum(ad.mul(diff, diff), axis=1)
    return ad.sub(ad.sqrt_eps(d2, SQRT_EPS), Tensor(np.asarray(math.sqrt(SQRT_EPS), dtype=samples.dtype)))


def _gt_edge_samples(gt, step: float) -> np.ndarray:
    polys = gt if isinstance(gt, (list, tuple)) else [gt]
    chunks = []
    for poly in polys:
        arr = np.asarray(poly, dtype=np.float64)
        _check_not_degenerate(arr, "ground-truth polygon")
        ia, ib, t = edge_sample_params(arr, step)
        chunks.append((1.0 - t)[:, None] * arr[ia] + t[:, None] * arr[ib])
    return np.concatenate(chunks, axis=0)


def chamfer_loss(pred, gt, cfg: LossConfig = LossConfig(), method: str = "auto") -> Tensor:
    """Symmetric average nearest-neighbor distance between edge samples.

    `pred` may be an (N, 2) array or a graph-connected vertex Tensor; only
    the predicted side receives gradients.  `gt` is a polygon or a list of
    polygons (their edge samples pool together).  With chamfer_mask_px > 0,
    any term whose true nearest distance is below the threshold is zeroed.
    """
    pv = _as_vertex_tensor(pred)
    _check_not_degenerate(pv.data, "predicted polygon")
    p_samples = differentiable_edge_samples(pv, cfg.edge_sample_step)
    q_points = _gt_edge_samples(gt, cfg.edge_sample_step)
    p_points = p_samples.data

    idx_q = nearest_indices(q_points, p_points, method)   # nearest gt for each pred
    idx_p = nearest_indices(p_points, q_points, method)   # nearest pred for each gt

    d_pred = _stabilized_distances(p_samples, q_points[idx_q])
    matched = ad.gather_rows(p_samples, idx_p)
    d_gt = _stabilized_distances(matched, q_points)

    if cfg.chamfer_mask_px > 0:
        thr2 = cfg.chamfer_mask_px ** 2
        keep_p = (((p_points - q_points[idx_q]) ** 2).sum(axis=1) >= thr2)
        keep_q = (((p_points[idx_p] - q_points) ** 2).sum(axis=1) >= thr2)
        d_pred = ad.mul(d_pred, Tensor(keep_p.astype(p_samples.dtype)))
        d_gt = ad.mul(d_gt, Tensor(keep_q.astype(p_samples.dtype)))

    term_p = ad.scale(ad.tsum(d_pred), 1.0 / p_points.shape[0])
    term_q = ad.scale(ad.tsum(d_gt), 1.0 / q_points.shape[0])
    return ad.add(term_p, term_q)


def std_loss(pred) -> Tensor:
    """Population standard deviation of the closed polygon's edge lengths."""
    pv = _as_vertex_tensor(pred)
    n = pv.shape[0]
    if n < 3:
        raise DegeneratePolygonError(f"polygon needs >= 3 vertices, got {n}")
    nxt = ad.gather_rows(pv, np.roll(np.arange(n), -1))
    diff = ad.sub(nxt, pv)
    lengths = ad.sqrt_eps(ad.tsum(ad.mul(diff, diff), axis=1), SQRT_EPS)
    dev = ad.sub(lengths, ad.tmean(lengths))
    return ad.sqrt_eps(ad.tmean(ad.mul(dev, dev)), SQRT_EPS)


def total_loss(pred, gt, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Weighted sum of the Chamfer and edge-regularity terms."""
    chamfer = chamfer_loss(pred, gt, cfg)
    std = std_loss(pred)
    total = ad.add(ad.scale(chamfer, cfg.w_chamfer), ad.scale(std, cfg.w_std))
    return LossBreakdown(total=total, chamfer=chamfer, std=std,
                         w_chamfer=cfg.w_chamfer, w_std=cfg.w_std)

"""Query initialization: heatmap peaks to lifted proto-centers with queries.

Peak cells are strict local maxima of the BEV score. A score-modulated
farthest-point sweep spreads K seeds over the candidates, dividing raw
cell distance by (epsilon + score^gamma); a small tail quota comes from
the lowest-score decile first. Each seed is lifted to 3-D by a linear
vote head over its cell feature, the dense map is refined by a small
residual conv stack, and the query token is formed from the bilinearly
sampled refined feature concatenated with the seed's original feature.

The distance reweighting has two selectable readings (see FpsConfig.mode):
"as-written" divides by the candidate's own score term, which pulls
high-score candidates closer together; "prose-consistent" divides by the
already-selected seed's term so strong seeds push others away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import BEVHeatmap, conv2d

FPS_MODES = ("as-written", "prose-consistent")


@dataclass(frozen=True)
class Candidate:
    """One heatmap peak: integer cell, its score, its feature row."""

    cell: tuple
    score: float
    feature: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cell", (int(self.cell[0]), int(self.cell[1])))
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64))


@dataclass(frozen=True)
class FpsConfig:
    k: int = 256
    gamma: float = 1.0
    epsilon: float = 1e-6
    tail_fraction: float = 0.1
    mode: str = "as-written"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if not 0 <= self.tail_fraction < 1:
            raise ValueError("tail_fraction must lie in [0, 1)")
        if self.mode not in FPS_MODES:
            raise ValueError(f"mode must be one of {FPS_MODES}")


@dataclass
class ProtoCenter:
    """A lifted seed: anchor + vote offset, plus its query feature."""

    anchor: np.ndarray
    offset: np.ndarray
    lifted: np.ndarray
    query: np.ndarray | None = None
    cell: tuple = (0, 0)

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.lifted = np.asarray(self.lifted, dtype=np.float64)
        if not np.array_equal(self.lifted, self.anchor + self.offset):
            raise ValueError("lifted must equal anchor + offset componentwise")


def heatmap_nms(heat: BEVHeatmap, min_dist: int, score_thresh: float) -> list[Candidate]:
    """Strict local maxima of the score within a Chebyshev window of radius
    min_dist, at or above score_thresh; sorted by descending score with
    row-major ties."""
    if min_dist < 1:
        raise ValueError("min_dist must be >= 1")
    score = heat.score_value
    data = heat.data_value
    w, h = score.shape
    out = []
    for u in range(w):
        for v in range(h):
            s = score[u, v]
            if s < score_thresh:
                continue
            lo_u, hi_u = max(0, u - min_dist), min(w, u + min_dist + 1)
            lo_v, hi_v = max(0, v - min_dist), min(h, v + min_dist + 1)
            window = score[lo_u:hi_u, lo_v:hi_v]
            if (window < s).sum() == window.size - 1:
                out.append(Candidate(cell=(u, v), score=float(s), feature=data[u, v]))
    out.sort(key=lambda c: (-c.score, c.cell[0], c.cell[1]))
    return out


def _reweighted_distance(cand: Candidate, seed: Candidate, cfg: FpsConfig) -> float:
    d = float(np.hypot(cand.cell[0] - seed.cell[0], cand.cell[1] - seed.cell[1]))
    source = cand if cfg.mode == "as-written" else seed
    return d / (cfg.epsilon + source.score**cfg.gamma)


def score_modulated_fps(cands: list[Candidate], cfg: FpsConfig) -> list[Candidate]:
    """Select min(k, |C|) candidates by reweighted farthest-point sampling.

    floor(tail_fraction * k) seeds are drawn first from the lowest-score
    decile (uniformly, seeded), the highest-score candidate joins, then the
    argmax-min sweep fills the rest. Ties break by candidate index.
    """
    if not cands:
        return []
    n = len(cands)
    target = min(cfg.k, n)
    chosen: list[int] = []
    in_set = np.zeros(n, dtype=bool)

    n_tail = int(np.floor(cfg.tail_fraction * cfg.k))
    if n_tail > 0:
        decile = max(1, n // 10)
        order = sorted(range(n), key=lambda i: (cands[i].score, i))
        pool = order[:decile]
        rng = np.random.default_rng(cfg.seed)
        picks = rng.choice(len(pool), size=min(n_tail, len(pool), target), replace=False)
        for p in sorted(picks):
            chosen.append(pool[p])
            in_set[pool[p]] = True

    if len(chosen) < target:
        best = max(range(n), key=lambda i: (cands[i].score, -i))
        if not in_set[best]:
            chosen.append(best)
            in_set[best] = True

    # min reweighted distance to the chosen set, maintained incrementally
    min_dist = np.full(n, np.inf)
    for j in chosen:
        for i in range(n):
            if not in_set[i]:
                min_dist[i] = min(min_dist[i], _reweighted_distance(cands[i], cands[j], cfg))

    while len(chosen) < target:
        best_i, best_d = -1, -np.inf
        for i in range(n):
            if in_set[i]:
                continue
            if min_dist[i] > best_d:
                best_i, best_d = i, min_dist[i]
        chosen.append(best_i)
        in_set[best_i] = True
        for i in range(n):
            if not in_set[i]:
                min_dist[i] = min(
                    min_dist[i], _reweighted_distance(cands[i], cands[best_i], cfg)
                )
    return [cands[i] for i in chosen]


def lift(seeds: list[Candidate], z_a: float, vote_weights, heat: BEVHeatmap) -> list[ProtoCenter]:
    """Pair each seed with anchor (cell center, z_a) and add the vote offset.

    vote_weights is (weight (C, 3), bias (3,)); the offset is the linear
    head applied to the seed's cell feature.
    """
    weight, bias = vote_weights
    weight = ad.as_tensor(weight)
    bias = ad.as_tensor(bias)
    out = []
    for seed in seeds:
        u, v = seed.cell
        if not (0 <= u < heat.width and 0 <= v < heat.height):
            raise ValueError(f"seed cell {seed.cell} outside the heatmap")
        cx, cy = heat.cell_center(u, v)
        anchor = np.array([cx, cy, z_a])
        offset = ad.value_of(ad.as_tensor(seed.feature).reshape(1, -1) @ weight + bias)[0]
        out.append(
            ProtoCenter(anchor=anchor, offset=offset, lifted=anchor + offset, cell=seed.cell)
        )
    return out


def refine_weight_shapes(channels: int) -> dict:
    """Four 3x3 convs with per-cell channel norm: C -> C/2 -> C/2 -> C/2 -> C."""
    hidden = max(1, channels // 2)
    path = [channels, hidden, hidden, hidden, channels]
    shapes = {}
    for i in range(4):
        shapes[f"refine.conv{i + 1}.k"] = (3, 3, path[i], path[i + 1])
        shapes[f"refine.conv{i + 1}.b"] = (path[i + 1],)
        shapes[f"refine.norm{i + 1}.gamma"] = (path[i + 1],)
        shapes[f"refine.norm{i + 1}.beta"] = (path[i + 1],)
    return shapes


def densify_refine(heat: BEVHeatmap, refine_weights: dict) -> BEVHeatmap:
    """Residual refinement of the dense BEV features.

    Four 3x3 conv + per-cell channel-norm + ReLU layers, then a skip add
    of the input. Normalization is per spatial cell over channels, which
    keeps each output cell's receptive field at 9x9.
    """
    expected = refine_weight_shapes(heat.channels)
    for name, shape in expected.items():
        got = ad.value_of(refine_weights[name]).shape
        if got != shape:
            raise ValueError(f"{name} must have shape {shape}, got {got}")
    x = ad.as_tensor(heat.data)
    y = x
    for i in range(1, 5):
        y = conv2d(y, refine_weights[f"refine.conv{i}.k"], refine_weights[f"refine.conv{i}.b"])
        y = ad.layer_norm(
            y, refine_weights[f"refine.norm{i}.gamma"], refine_weights[f"refine.norm{i}.beta"]
        )
        y = ad.relu(y)
    out = x + y
    return BEVHeatmap(
        data=out, score=heat.score, cell_size=heat.cell_size, origin=heat.origin
    )


def bilinear_sample(heatmap: BEVHeatmap, x: float, y: float):
    """4-neighbor bilinear interpolation of the feature grid at meters (x, y).

    Continuous cell coordinates clamp to the border so off-grid queries
    return border features.
    """
    data = ad.as_tensor(heatmap.data)
    w, h = heatmap.width, heatmap.height
    cu = (x - heatmap.origin[0]) / heatmap.cell_size - 0.5
    cv = (y - heatmap.origin[1]) / heatmap.cell_size - 0.5
    cu = min(max(cu, 0.0), w - 1.0)
    cv = min(max(cv, 0.0), h - 1.0)
    u0, v0 = int(np.floor(cu)), int(np.floor(cv))
    u1, v1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1)
    fu, fv = cu - u0, cv - v0
    top = data[u0, v0] * (1 - fu) + data[u1, v0] * fu
    bottom = data[u0, v1] * (1 - fu) + data[u1, v1] * fu
    return top * (1 - fv) + bottom * fv


def form_query(proto: ProtoCenter, seed_feature, sampled_feature, reduce_weights):
    """Concatenate (sampled, seed) features and reduce linearly to the query
    width; the result is stored on the proto-center and returned."""
    weight, bias = reduce_weights
    weight = ad.as_tensor(weight)
    sampled = ad.as_tensor(sampled_feature)
    seed = ad.as_tensor(seed_feature)
    joint = ad.concatenate([sampled, seed], axis=0)
    if joint.shape[0] != weight.shape[0]:
        raise ValueError(
            f"reduce weight expects width {weight.shape[0]}, got {joint.shape[0]}"
        )
    query = joint.reshape(1, -1) @ weight + ad.as_tensor(bias)
    query = query.reshape(weight.shape[1])
    proto.query = query
    return query

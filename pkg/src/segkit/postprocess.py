"""From probability maps to binary masks, connected components and lesion centroids."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

THRESHOLD = 0.3
MIN_AREA = 300
CONNECTIVITY = 8
MATCH_RADIUS = 30.0


@dataclass
class Component:
    label: int
    area: int
    centroid: tuple[float, float]  # (row, col)
    bbox: tuple[int, int, int, int]  # (top, left, height, width)


@dataclass
class Detection:
    present: bool
    lesions: list[Component] = field(default_factory=list)

    def records(self) -> list[dict]:
        # external reports use image coordinates: x = col, y = row
        return [{"x": c.centroid[1], "y": c.centroid[0], "area": c.area} for c in self.lesions]


def binarize(p, threshold: float = THRESHOLD) -> np.ndarray:
    """Pixels strictly above ``threshold`` become 255, everything else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    p = np.asarray(p)
    return np.where(p > threshold, 255, 0).astype(np.uint8)


def _row_runs(row: np.ndarray):
    d = np.diff(np.concatenate(([0], row.view(np.int8), [0])))
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1) - 1


def label(mask, connectivity: int = CONNECTIVITY) -> tuple[np.ndarray, list[Component]]:
    """Two-pass union-find labeling over horizontal runs.

    Labels are 1..K in order of each component's first pixel in a row-major scan.
    Returns the label image (0 = background) and per-component statistics.
    """
    if connectivity not in (4, 8):
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    fg = np.asarray(mask) > 0
    if fg.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {fg.shape}")
    slack = 1 if connectivity == 8 else 0

    parent: list[int] = []
    runs: list[tuple[int, int, int]] = []  # (row, start, end), end inclusive

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri < rj:
            parent[rj] = ri
        elif rj < ri:
            parent[ri] = rj

    prev_s, prev_e, prev_ids = (), (), []
    for r in range(fg.shape[0]):
        starts, ends = _row_runs(fg[r])
        ids = []
        j = 0
        for s, e in zip(starts.tolist(), ends.tolist()):
            rid = len(parent)
            parent.append(rid)
            runs.append((r, s, e))
            ids.append(rid)
            while j < len(prev_ids) and prev_e[j] + slack < s:
                j += 1
            k = j
            while k < len(prev_ids) and prev_s[k] <= e + slack:
                union(rid, prev_ids[k])
                k += 1
        prev_s, prev_e, prev_ids = starts.tolist(), ends.tolist(), ids

    labels = np.zeros(fg.shape, dtype=np.int32)
    final: dict[int, int] = {}
    stats: list[list[int]] = []  # area, sum_r, sum_c, top, left, bottom, right
    for rid, (r, s, e) in enumerate(runs):
        root = find(rid)
        lab = final.get(root)
        if lab is None:
            lab = final[root] = len(final) + 1
            stats.append([0, 0, 0, r, s, r, e])
        st = stats[lab - 1]
        n = e - s + 1
        st[0] += n
        st[1] += r * n
        st[2] += (s + e) * n // 2
        st[4] = min(st[4], s)
        st[5] = r
        st[6] = max(st[6], e)
        labels[r, s : e + 1] = lab

    comps = [
        Component(i + 1, area, (sr / area, sc / area), (top, left, bottom - top + 1, right - left + 1))
        for i, (area, sr, sc, top, left, bottom, right) in enumerate(stats)
    ]
    return labels, comps


def connected_components_with_stats(mask, connectivity: int = CONNECTIVITY) -> list[Component]:
    return label(mask, connectivity)[1]


def filter_components(cs: list[Component], min_area: int = MIN_AREA) -> list[Component]:
    return [c for c in cs if c.area >= min_area]


def detect(p, threshold: float = THRESHOLD, connectivity: int = CONNECTIVITY,
           min_area: int = MIN_AREA) -> Detection:
    kept = filter_components(connected_components_with_stats(binarize(p, threshold), connectivity), min_area)
    return Detection(present=bool(kept), lesions=kept)


def detect_mask(mask, connectivity: int = CONNECTIVITY, min_area: int = MIN_AREA) -> Detection:
    """Detection on an already binarized {0, 255} mask."""
    kept = filter_components(connected_components_with_stats(mask, connectivity), min_area)
    return Detection(present=bool(kept), lesions=kept)


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]]  # (prediction index, truth label, distance)

    def __iter__(self):
        return iter((self.tp, self.fp, self.fn, self.pairs))


def match_lesions(predicted, truth_mask, radius: float = MATCH_RADIUS,
                  connectivity: int = CONNECTIVITY) -> MatchResult:
    """One-to-one greedy matching of predicted (row, col) centroids to truth components.

    A prediction is eligible for a component when it falls inside it (distance 0)
    or within ``radius`` pixels of its nearest member pixel. Eligible pairs are
    taken nearest first; ties go to the smaller distance to the component centroid.
    """
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    labels, truth = label(truth_mask, connectivity)
    predicted = [tuple(map(float, p)) for p in predicted]
    h, w = labels.shape
    candidates = []
    for pi, (pr, pc) in enumerate(predicted):
        ir, ic = int(round(pr)), int(round(pc))
        inside = labels[ir, ic] if 0 <= ir < h and 0 <= ic < w else 0
        for comp in truth:
            if inside == comp.label:
                d = 0.0
            else:
                top, left, hh, ww = comp.bbox
                # cheap reject on the bounding box before touching pixels
                dr = max(top - pr, 0.0, pr - (top + hh - 1))
                dc = max(left - pc, 0.0, pc - (left + ww - 1))
                if np.hypot(dr, dc) > radius:
                    continue
                rr, cc = np.nonzero(labels[top:top + hh, left:left + ww] == comp.label)
                d = float(np.sqrt(((rr + top - pr) ** 2 + (cc + left - pc) ** 2).min()))
                if d > radius:
                    continue
            cd = float(np.hypot(pr - comp.centroid[0], pc - comp.centroid[1]))
            candidates.append((d, cd, pi, comp.label))
    candidates.sort()
    used_p, used_t, pairs = set(), set(), []
    for d, _, pi, tl in candidates:
        if pi in used_p or tl in used_t:
            continue
        used_p.add(pi)
        used_t.add(tl)
        pairs.append((pi, tl, d))
    tp = len(pairs)
    return MatchResult(tp, len(predicted) - tp, len(truth) - tp, pairs)

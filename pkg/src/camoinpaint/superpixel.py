"""Foreground-restricted SLIC on latent condition features.

Labels are ``-1`` on background cells (latent mask 1) and ``0..s'-1`` on
foreground cells (latent mask 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray  # (h, w) int64
    spatial_centers: np.ndarray  # (s', 2) row, col
    feature_centers: np.ndarray  # (s', c)
    objective_history: tuple = field(default=(), compare=False)

    @property
    def n_labels(self) -> int:
        return len(self.spatial_centers)

    @property
    def foreground(self) -> np.ndarray:
        return self.labels >= 0


def _centers(labels, features, n):
    rows, cols = np.nonzero(labels >= 0)
    lab = labels[rows, cols]
    counts = np.bincount(lab, minlength=n).astype(np.float64)
    sp = np.stack([np.bincount(lab, rows, n), np.bincount(lab, cols, n)], 1) / counts[:, None]
    feat = features[rows, cols]
    fc = np.stack([np.bincount(lab, feat[:, k], n) for k in range(feat.shape[1])], 1) / counts[:, None]
    return sp, fc


def _relabel(labels):
    """Compact labels to 0..n-1 in order of first appearance (row-major)."""
    out = np.full_like(labels, -1)
    fg = labels >= 0
    _, first, inv = np.unique(labels[fg], return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    out[fg] = order[inv]
    return out, len(first)


def _make_map(labels, features, history=()):
    labels, n = _relabel(labels)
    sp, fc = _centers(labels, features, n)
    return SuperpixelMap(labels, sp, fc, tuple(history))


def _init_centers(fg, s, rng):
    h, w = fg.shape
    rows, cols = np.nonzero(fg)
    n_fg = len(rows)
    step = np.sqrt(n_fg / s)
    r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
    ny = max(1, int(round((r1 - r0 + 1) / step)))
    nx = max(1, int(round((c1 - c0 + 1) / step)))
    gy = r0 + (np.arange(ny) + 0.5) * (r1 - r0 + 1) / ny - 0.5
    gx = c0 + (np.arange(nx) + 0.5) * (c1 - c0 + 1) / nx - 0.5
    gy, gx = (a.ravel() for a in np.meshgrid(gy, gx, indexing="ij"))
    grid = np.stack([np.rint(gy), np.rint(gx)], 1).astype(np.int64)
    on_fg = fg[grid[:, 0], grid[:, 1]]
    # spillover grid points snap to the nearest foreground cell (lowest index on ties)
    cells = np.stack([rows, cols], 1)
    d2 = ((grid[:, None, :] - cells[None, :, :]) ** 2).sum(-1)
    snapped = cells[d2.argmin(1)]
    flat = snapped[:, 0] * w + snapped[:, 1]
    _, keep = np.unique(flat, return_index=True)
    keep = np.sort(keep)
    snapped, on_fg = snapped[keep], on_fg[keep]
    if len(snapped) > s:
        # prefer grid points that were already on the foreground
        pri = np.nonzero(on_fg)[0]
        sec = np.nonzero(~on_fg)[0]
        if len(pri) >= s:
            pick = np.sort(rng.choice(pri, s, replace=False))
        else:
            pick = np.sort(np.concatenate([pri, rng.choice(sec, s - len(pri), replace=False)]))
        snapped = snapped[pick]
    elif len(snapped) < s:
        # top up by farthest-point sampling over the foreground
        chosen = list(snapped)
        d = ((cells[:, None, :] - np.array(chosen)[None]) ** 2).sum(-1).min(1)
        while len(chosen) < s:
            i = int(d.argmax())
            chosen.append(cells[i])
            d = np.minimum(d, ((cells - cells[i]) ** 2).sum(-1))
        snapped = np.array(chosen)
    return snapped.astype(np.float64)


def joint_distance_sq(features, coords, feat_c, sp_c, step, compactness):
    """Squared SLIC distance d_feat^2 + (d_xy / S)^2 m^2 from every cell to every center."""
    df = ((features[:, None, :] - feat_c[None]) ** 2).sum(-1)
    dxy = ((coords[:, None, :] - sp_c[None]) ** 2).sum(-1)
    return df + dxy * (compactness / step) ** 2


def slic_foreground(features, fg_mask, s, compactness=10.0, iterations=10, seed=0,
                    enforce=True, min_size=None) -> SuperpixelMap:
    """Cluster the foreground cells of ``features`` (h, w, c) into at most ``s`` superpixels.

    ``fg_mask`` is the latent-resolution mask with 0 on the object. Each
    iteration assigns every foreground cell to the center of minimum joint
    distance and moves centers to the mean of their cells, so the summed
    squared joint distance (recorded in ``objective_history``) never
    increases. With ``enforce`` the result is passed through
    :func:`enforce_connectivity`.
    """
    features = np.asarray(features, dtype=np.float64)
    fg = np.asarray(fg_mask) == 0
    if not fg.any():
        raise ValueError("empty foreground")
    if s < 1 or iterations < 1:
        raise ValueError("need s >= 1 and iterations >= 1")
    rows, cols = np.nonzero(fg)
    n_fg = len(rows)
    s_eff = min(s, n_fg)
    step = np.sqrt(n_fg / s_eff)
    rng = np.random.default_rng(seed)
    coords = np.stack([rows, cols], 1).astype(np.float64)
    feat = features[rows, cols]

    sp_c = _init_centers(fg, s_eff, rng)
    idx = sp_c.astype(np.int64)
    feat_c = features[idx[:, 0], idx[:, 1]].copy()

    history = []
    for _ in range(iterations):
        d = joint_distance_sq(feat, coords, feat_c, sp_c, step, compactness)
        assign = d.argmin(1)
        history.append(float(d[np.arange(n_fg), assign].sum()))
        counts = np.bincount(assign, minlength=s_eff)
        live = counts > 0
        for k in range(2):
            sp_c[live, k] = np.bincount(assign, coords[:, k], s_eff)[live] / counts[live]
        for k in range(feat.shape[1]):
            feat_c[live, k] = np.bincount(assign, feat[:, k], s_eff)[live] / counts[live]
    d = joint_distance_sq(feat, coords, feat_c, sp_c, step, compactness)
    assign = d.argmin(1)
    history.append(float(d[np.arange(n_fg), assign].sum()))

    labels = np.full(fg.shape, -1, dtype=np.int64)
    labels[rows, cols] = assign
    spx = _make_map(labels, features, history)
    if enforce:
        if min_size is None:
            min_size = n_fg / (4 * s)
        spx = enforce_connectivity(spx, features, min_size, max_labels=s)
    return spx


def components(labels):
    """List of (label, cell mask) for every 4-connected piece of every label."""
    out = []
    for lab in np.unique(labels[labels >= 0]):
        comp, n = ndimage.label(labels == lab, structure=_FOUR)
        for k in range(1, n + 1):
            out.append((int(lab), comp == k))
    return out


def enforce_connectivity(spx: SuperpixelMap, features, min_size, max_labels=None) -> SuperpixelMap:
    """Make every label 4-connected without exceeding ``max_labels`` labels.

    The largest piece of a label keeps it. A stray piece merges into the
    4-adjacent label whose feature centroid is nearest its own mean when it
    is smaller than ``min_size`` or the label budget is used up; otherwise
    it becomes a new label. A stray that is a whole foreground component
    (no adjacent foreground) gets a new label if the budget allows. With the
    budget used up, the smallest label touching another label is merged
    away to make room. Only when the foreground has more components than
    ``max_labels`` does an island join the label with the nearest feature
    centroid and stay split.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = spx.labels.copy()
    if max_labels is None:
        max_labels = np.inf
    settled = set()  # first flat index of islands already placed
    while True:
        by_label = {}
        for lab, m in components(labels):
            key = int(np.flatnonzero(m)[0])
            if key not in settled:
                by_label.setdefault(lab, []).append(m)
        strays = []
        for lab, ms in by_label.items():
            keep = int(np.argmax([m.sum() for m in ms]))
            strays += [(lab, m) for i, m in enumerate(ms) if i != keep]
        if not strays:
            break
        n_labels = len(np.unique(labels[labels >= 0]))
        full = n_labels >= max_labels
        lab, piece = min(strays, key=lambda x: (x[1].sum(), int(np.flatnonzero(x[1])[0])))
        ring = ndimage.binary_dilation(piece, structure=_FOUR) & ~piece
        nbrs = np.unique(labels[ring & (labels >= 0)])
        if len(nbrs) and (piece.sum() < min_size or full):
            labels[piece] = _nearest_label(features, labels, piece, nbrs)
        elif len(nbrs) or not full:
            labels[piece] = labels.max() + 1
        else:
            freed = _free_label(features, labels, piece)
            if freed is not None:
                labels[piece] = freed
            else:
                others = np.unique(labels[(labels >= 0) & ~piece])
                labels[piece] = _nearest_label(features, labels, piece, others)
                settled.add(int(np.flatnonzero(piece)[0]))
    return _make_map(labels, features, spx.objective_history)


def _free_label(features, labels, piece):
    """Merge the smallest connected label that touches another label into its nearest neighbour.

    Returns the freed label, or None when every label is its own foreground
    component (nothing can merge without breaking connectivity).
    """
    rest = labels.copy()
    rest[piece] = -1
    best = None
    for lab in np.unique(rest[rest >= 0]):
        cells = rest == lab
        if ndimage.label(cells, structure=_FOUR)[1] != 1:
            continue
        ring = ndimage.binary_dilation(cells, structure=_FOUR) & ~cells
        nbrs = np.unique(rest[ring & (rest >= 0)])
        if len(nbrs) and (best is None or cells.sum() < best[0]):
            best = (int(cells.sum()), int(lab), nbrs)
    if best is None:
        return None
    _, lab, nbrs = best
    cells = rest == lab
    labels[cells] = _nearest_label(features, labels, cells, nbrs)
    return lab


def _nearest_label(features, labels, piece, candidates):
    mean = features[piece].mean(0)
    cents = np.stack([features[(labels == n) & ~piece].mean(0) for n in candidates])
    return candidates[int(((cents - mean) ** 2).sum(1).argmin())]


def fill_index(spx: SuperpixelMap) -> np.ndarray:
    """Per-cell superpixel index for spreading one vector per superpixel over the grid.

    Foreground cells take their own label. Background cells take the label
    whose spatial centroid is nearest (lowest label on ties).
    """
    h, w = spx.labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[..., None] - spx.spatial_centers[:, 0]) ** 2 + (xx[..., None] - spx.spatial_centers[:, 1]) ** 2
    idx = d2.argmin(-1)
    return np.where(spx.labels >= 0, spx.labels, idx).astype(np.int64)


def label_image(spx: SuperpixelMap):
    """Indexed-colour PIL image of a label grid for debugging. Background is black."""
    from PIL import Image

    rng = np.random.default_rng(0)
    palette = rng.integers(40, 256, size=(max(spx.n_labels, 1), 3), dtype=np.uint8)
    pal = np.zeros((256, 3), dtype=np.uint8)
    pal[1 : 1 + len(palette)] = palette[:255]
    im = Image.fromarray((spx.labels + 1).astype(np.uint8), mode="P")
    im.putpalette(pal.ravel().tolist())
    return im

"""Evaluation metrics: Dice score, average precision, instance extraction
from objectness/contour maps, and spatial adhesion statistics.

All functions are pure over immutable inputs.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .maskdb import STRUCTURE_4, STRUCTURE_8, extract_regions


@dataclass
class BinaryMask:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) bool

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr).astype(bool)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)


@dataclass
class Detection:
    bbox: tuple  # (x, y, w, h)
    score: float


@dataclass
class InstanceExtraction:
    labels: np.ndarray  # (h, w) int32 instance ids, 0 = background
    components: list  # dicts {id, bbox, area}

    @property
    def count(self):
        return len(self.components)


def dice(prediction, target):
    """Dice score 2|p.t| / (|p|^2 + |t|^2) over binary masks.

    Two empty masks score 1.0 (perfect silence on an empty image).
    """
    p = prediction.pixels if isinstance(prediction, BinaryMask) else np.asarray(prediction, bool)
    t = target.pixels if isinstance(target, BinaryMask) else np.asarray(target, bool)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {t.shape}")
    np_count = int(p.sum())
    nt_count = int(t.sum())
    if np_count == 0 and nt_count == 0:
        return 1.0
    inter = int((p & t).sum())
    return 2.0 * inter / (np_count + nt_count)


def _iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix0, iy0 = max(ax, bx), max(ay, by)
    ix1, iy1 = min(ax + aw, bx + bw), min(ay + ah, by + bh)
    iw, ih = max(0, ix1 - ix0), max(0, iy1 - iy0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def match_and_ap(detections, ground_truth, iou_threshold=0.5):
    """Greedy one-to-one matching plus all-point interpolated AP.

    Detections are processed in descending score order (input order breaks
    ties); each is matched to the unmatched ground-truth box of highest IoU
    at or above the threshold.  Returns (AP, list of (recall, precision)
    points).  Empty ground truth with detections gives AP 0; both empty
    gives AP 1.
    """
    n_gt = len(ground_truth)
    if not detections:
        return (1.0 if n_gt == 0 else 0.0), []
    if n_gt == 0:
        return 0.0, [(0.0, 0.0)] * len(detections)

    order = sorted(
        range(len(detections)), key=lambda i: -detections[i].score
    )
    gt_used = [False] * n_gt
    tp = np.zeros(len(detections))
    for rank, di in enumerate(order):
        det = detections[di]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(ground_truth):
            if gt_used[j]:
                continue
            iou = _iou(det.bbox, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            gt_used[best_j] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    recalls = cum_tp / n_gt
    precisions = cum_tp / np.arange(1, len(detections) + 1)

    # all-point interpolation: area under the precision envelope
    envelope = np.maximum.accumulate(precisions[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recalls, envelope):
        ap += (r - prev_recall) * p
        prev_recall = r
    return float(ap), list(zip(recalls.tolist(), precisions.tolist()))


def extract_instances(
    objectness,
    contour,
    tau_objectness=0.5,
    tau_contour=0.5,
    min_blob_size=50,
    contour_width=2,
):
    """Recover individual instances from objectness and contour predictions.

    Foreground = high objectness AND low contour; its 8-connected blobs are
    the instance cores.  Cores below ``min_blob_size`` are dropped, then the
    survivors are grown back over the contour band (one radius-1 step per
    band pixel, nearest core wins, never leaving the objectness foreground)
    so boundary pixels are re-attributed without merging instances.
    """
    objectness = np.asarray(objectness, dtype=float)
    contour = np.asarray(contour, dtype=float)
    if objectness.shape != contour.shape:
        raise ValueError(
            f"dimension mismatch: {objectness.shape} vs {contour.shape}"
        )
    obj_fg = objectness >= tau_objectness
    core = obj_fg & (contour < tau_contour)
    labels, n = ndimage.label(core, structure=STRUCTURE_8)
    if n:
        counts = np.bincount(labels.ravel(), minlength=n + 1)
        keep = np.flatnonzero(counts[1:] >= min_blob_size) + 1
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[keep] = np.arange(1, len(keep) + 1)
        labels = remap[labels]

    if labels.any() and contour_width > 0:
        # chessboard distance = iterated radius-1 (3x3) dilations
        dist, (iy, ix) = ndimage.distance_transform_cdt(
            labels == 0, metric="chessboard", return_indices=True
        )
        grown = labels[iy, ix]
        grow_zone = (labels == 0) & (dist <= contour_width) & obj_fg
        labels = np.where(grow_zone, grown, labels)

    components = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        blob = labels[sl] == idx
        components.append(
            {
                "id": idx,
                "bbox": (
                    sl[1].start,
                    sl[0].start,
                    sl[1].stop - sl[1].start,
                    sl[0].stop - sl[0].start,
                ),
                "area": int(blob.sum()),
            }
        )
    return InstanceExtraction(labels=labels.astype(np.int32), components=components)


@dataclass
class AdhesionStats:
    touch_fraction: float
    nn_center_distances: list
    cluster_sizes: list

    def to_dict(self):
        return {
            "n_cells": int(np.sum(self.cluster_sizes)) if self.cluster_sizes else 0,
            "touch_fraction": self.touch_fraction,
            "nn_center_distances": self.nn_center_distances,
            "cluster_sizes": self.cluster_sizes,
        }


def adhesion_stats(mask):
    """Quantify cell clustering in an instance mask.

    touch_fraction is the share of cells 8-adjacent to at least one other
    cell; clusters are connected groups under the touching relation;
    nearest-neighbor distances are between cell centroids.
    """
    labels, regions = extract_regions(mask)
    n = len(regions)
    if n == 0:
        return AdhesionStats(0.0, [], [])

    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    touching = np.zeros(n, dtype=bool)
    height, width = labels.shape
    for idx, reg in enumerate(regions):
        h, w = reg.bitmap.shape
        y0, x0 = max(0, reg.y0 - 1), max(0, reg.x0 - 1)
        y1, x1 = min(height, reg.y0 + h + 1), min(width, reg.x0 + w + 1)
        expanded = np.zeros((y1 - y0, x1 - x0), dtype=bool)
        expanded[
            reg.y0 - y0 : reg.y0 - y0 + h, reg.x0 - x0 : reg.x0 - x0 + w
        ] = reg.bitmap
        halo = ndimage.binary_dilation(expanded, structure=STRUCTURE_8)
        neighbors = np.unique(labels[y0:y1, x0:x1][halo])
        for lab in neighbors:
            if lab > 0 and lab - 1 != idx:
                touching[idx] = True
                ra, rb = find(idx), find(int(lab) - 1)
                if ra != rb:
                    parent[ra] = rb

    cluster_sizes = {}
    for i in range(n):
        root = find(i)
        cluster_sizes[root] = cluster_sizes.get(root, 0) + 1

    if n > 1:
        centroids = np.array([reg.centroid_xy for reg in regions])
        tree = cKDTree(centroids)
        dists, _ = tree.query(centroids, k=2)
        nn_distances = dists[:, 1].tolist()
    else:
        nn_distances = []

    return AdhesionStats(
        touch_fraction=float(touching.mean()),
        nn_center_distances=nn_distances,
        cluster_sizes=sorted(cluster_sizes.values(), reverse=True),
    )


def interior_and_contour_maps(mask, contour_width=2):
    """Derive ideal objectness/contour maps from an instance mask.

    Objectness is every cell pixel; the contour map marks, per cell, the
    pixels within ``contour_width`` radius-1 erosion steps of the cell's
    boundary (including boundaries between touching cells).
    """
    labels, regions = extract_regions(mask)
    objectness = (labels > 0).astype(float)
    contour = np.zeros_like(objectness)
    height, width = labels.shape
    for idx, reg in enumerate(regions, start=1):
        h, w = reg.bitmap.shape
        pad = contour_width + 1
        y0, x0 = reg.y0 - pad, reg.x0 - pad
        canvas = np.zeros((h + 2 * pad, w + 2 * pad), dtype=bool)
        canvas[pad : pad + h, pad : pad + w] = reg.bitmap
        interior = ndimage.binary_erosion(
            canvas, structure=STRUCTURE_8, iterations=contour_width
        )
        band = canvas & ~interior
        ys, xs = np.nonzero(band)
        ys, xs = ys + y0, xs + x0
        ok = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
        contour[ys[ok], xs[ok]] = 1.0
    return objectness, contour

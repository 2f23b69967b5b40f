"""Fracture probability maps along edge candidates, and their clustering."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .convnet import MICRO_BATCH, ConvNetModel
from .edgemap import EdgeMap
from .errors import EmptyEdgeMapError, IoError
from .orientation import DEFAULT_WINDOW_RADIUS
from .patches import PatchExtractor, Strategy
from .volume import Annotation, Volume

_EXTRACT_CHUNK = 256


@dataclass(eq=False)
class ProbabilityMap:
    indices: np.ndarray  # (n, 3) x, y, z
    probabilities: np.ndarray
    source_dims: tuple[int, int, int]

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.source_dims = tuple(int(d) for d in self.source_dims)

    def __len__(self):
        return len(self.indices)

    def entries(self):
        return [(tuple(int(c) for c in i), float(p)) for i, p in zip(self.indices, self.probabilities)]


def predict_map(model: ConvNetModel, v: Volume, edges: EdgeMap, strategy, batch_size: int = MICRO_BATCH,
                window_radius: int = DEFAULT_WINDOW_RADIUS, orient_mode: str = "tangent") -> ProbabilityMap:
    """Fracture probability at every edge voxel (patches are never mirrored here)."""
    if len(edges) == 0:
        raise EmptyEdgeMapError("cannot predict on an empty edge map")
    strategy = Strategy.parse(strategy)
    extractor = PatchExtractor(v)
    probs = np.empty(len(edges), dtype=np.float64)
    for start in range(0, len(edges), _EXTRACT_CHUNK):
        idx = edges.indices[start : start + _EXTRACT_CHUNK]
        batch = np.stack([extractor.inference_patch(e, strategy, window_radius, orient_mode).planes for e in idx])
        probs[start : start + len(idx)] = model.predict_proba(batch, batch_size)
    return ProbabilityMap(edges.indices.copy(), probs, edges.source_dims)


@dataclass(eq=False)
class Detection:
    position: tuple[float, float, float]  # mm, probability-weighted centroid
    score: float
    member_voxels: list[tuple[int, int, int]]
    matched_annotation: Annotation | None = None
    member_probabilities: list[float] = field(default_factory=list, repr=False)


_CONNECT26 = np.ones((3, 3, 3), dtype=bool)


def cluster_detections(pmap: ProbabilityMap, v: Volume, prob_threshold: float) -> list[Detection]:
    """26-connected components of voxels with probability >= threshold."""
    if not 0 < prob_threshold < 1:
        raise ValueError("prob_threshold must lie in (0, 1)")
    keep = pmap.probabilities >= prob_threshold
    if not keep.any():
        return []
    idx = pmap.indices[keep]
    prob = pmap.probabilities[keep]
    nx, ny, nz = pmap.source_dims
    grid = np.zeros((nz, ny, nx), dtype=bool)
    grid[idx[:, 2], idx[:, 1], idx[:, 0]] = True
    labels, _ = ndimage.label(grid, structure=_CONNECT26)
    comp = labels[idx[:, 2], idx[:, 1], idx[:, 0]]

    # order-independent grouping: members sorted by (z, y, x) inside each component
    order = np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2], comp))
    idx, prob, comp = idx[order], prob[order], comp[order]
    bounds = np.flatnonzero(np.diff(comp)) + 1
    detections = []
    for members, p in zip(np.split(idx, bounds), np.split(prob, bounds)):
        world = v.world(members)
        centroid = (world * p[:, None]).sum(axis=0) / p.sum()
        detections.append(
            Detection(tuple(float(c) for c in centroid), float(p.max()),
                      [tuple(int(c) for c in m) for m in members], None, p.tolist())
        )
    detections.sort(key=lambda d: (-d.score, d.position[2], d.position[1], d.position[0]))
    return detections


def save_probability_map(pmap: ProbabilityMap, csv_path) -> None:
    try:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "prob"])
            for (x, y, z), p in zip(pmap.indices.tolist(), pmap.probabilities):
                w.writerow([x, y, z, repr(float(p))])
    except OSError as exc:
        raise IoError(f"cannot write probability map {csv_path}: {exc}") from exc


def load_probability_map(csv_path, source_dims) -> ProbabilityMap:
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if table.size == 0:
        table = np.zeros((0, 4))
    return ProbabilityMap(table[:, :3].astype(np.int64), table[:, 3], source_dims)


def save_detections(detections, csv_path) -> None:
    try:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x_mm", "y_mm", "z_mm", "score", "n_voxels", "matched"])
            for d in detections:
                matched = "" if d.matched_annotation is None else d.matched_annotation.process_label.value
                w.writerow([*(repr(c) for c in d.position), repr(d.score), len(d.member_voxels), matched])
    except OSError as exc:
        raise IoError(f"cannot write detections {csv_path}: {exc}") from exc


def load_detections(csv_path) -> list[Detection]:
    out = []
    with Path(csv_path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            pos = (float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"]))
            out.append(Detection(pos, float(row["score"]), [None] * int(row["n_voxels"])))
    return out

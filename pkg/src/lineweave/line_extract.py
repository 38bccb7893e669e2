"""Component-to-blob-line assignment by graph-cut energy minimization.

Every 8-connected component of the binary page is assigned a blob-line
label by minimizing a data + Potts-smoothness energy with alpha-expansion.
Components that touch several blob lines are split per pixel.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree, ConvexHull

BRUTE_FORCE_LIMIT = 10**6


@dataclass
class Component:
    id: int
    pixels: np.ndarray  # (n, 2) int rows/cols
    centroid: tuple[float, float]
    area: int


@dataclass
class NeighborGraph:
    """Symmetric nearest-neighbour graph on component centroids.

    beta is the inverse of twice the mean edge distance; it is None when
    there are no edges (single component).
    """

    nodes: list[int]
    edges: list[tuple[int, int]]  # component ids, i < j
    distances: np.ndarray  # per edge, centroid Euclidean distance
    beta: float | None


@dataclass
class Labeling:
    labels: dict[int, int]  # component id -> blob label (1-based)
    energy: float


@dataclass
class SegmentationResult:
    label_map: np.ndarray  # (h, w) int32, 0 background
    pixel_counts: dict[int, int]
    polygons: dict[int, list[tuple[int, int]]]
    fallback: bool = False


def extract_components(mask: np.ndarray) -> list[Component]:
    """8-connected components, ids ordered by first pixel in row-major scan."""
    m = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    lab, n = ndimage.label(m, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    flat = lab.ravel()
    raw_ids, first = np.unique(flat, return_index=True)
    order = [int(i) for i in raw_ids[np.argsort(first)] if i != 0]

    rows, cols = np.nonzero(lab)
    at = lab[rows, cols]
    comps = []
    for new_id, raw in enumerate(order, start=1):
        sel = at == raw
        pix = np.column_stack([rows[sel], cols[sel]]).astype(np.int64)
        centroid = (float(pix[:, 0].mean()), float(pix[:, 1].mean()))
        comps.append(Component(new_id, pix, centroid, len(pix)))
    return comps


def build_neighbors(comps: list[Component], k: int = 4) -> NeighborGraph:
    """Symmetric closure of the k-nearest-neighbour relation on centroids."""
    if not comps:
        raise ValueError("need at least one component")
    nodes = [c.id for c in comps]
    if len(comps) == 1:
        return NeighborGraph(nodes, [], np.zeros(0), None)

    pts = np.array([c.centroid for c in comps], dtype=np.float64)
    kk = min(k, len(comps) - 1)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=kk + 1)
    pairs = set()
    for i in range(len(comps)):
        for j in idx[i, 1:]:
            a, b = sorted((nodes[i], nodes[int(j)]))
            pairs.add((a, b))
    edges = sorted(pairs)
    by_id = {c.id: np.asarray(c.centroid) for c in comps}
    dist = np.array([np.linalg.norm(by_id[a] - by_id[b]) for a, b in edges])
    mean = float(dist.mean())
    beta = math.inf if mean == 0.0 else 1.0 / (2.0 * mean)
    return NeighborGraph(nodes, edges, dist, beta)


def data_cost(comp: Component, blob_pixels: np.ndarray) -> float:
    """Euclidean distance from the component centroid to the nearest blob pixel."""
    blob = np.asarray(blob_pixels, dtype=np.float64)
    if blob.size == 0:
        raise ValueError("blob line has no pixels")
    tree = cKDTree(blob)
    d, _ = tree.query(np.asarray(comp.centroid, dtype=np.float64))
    return float(d)


def smoothness_weight(distance: float, beta: float) -> float:
    """Potts edge weight exp(-beta * centroid distance); 1.0 at zero distance."""
    if distance < 0:
        raise ValueError("distance must be non-negative")
    if distance == 0.0:
        return 1.0
    return math.exp(-beta * distance)


def data_cost_matrix(comps: list[Component], blobs: list[np.ndarray]) -> np.ndarray:
    """(components x labels) matrix of centroid-to-nearest-blob-pixel distances."""
    cents = np.array([c.centroid for c in comps], dtype=np.float64)
    cost = np.empty((len(comps), len(blobs)), dtype=np.float64)
    for j, blob in enumerate(blobs):
        tree = cKDTree(np.asarray(blob, dtype=np.float64))
        cost[:, j], _ = tree.query(cents)
    return cost


def _edge_arrays(comps, graph):
    index = {c.id: i for i, c in enumerate(comps)}
    if not graph.edges:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    e = np.array([[index[a], index[b]] for a, b in graph.edges], dtype=np.int64)
    w = np.array(
        [smoothness_weight(float(d), graph.beta) for d in graph.distances], dtype=np.float64
    )
    return e, w


def _energy(cost, edges, weights, f):
    e = float(cost[np.arange(len(f)), f].sum())
    if len(edges):
        e += float(weights[f[edges[:, 0]] != f[edges[:, 1]]].sum())
    return e


class _Dinic:
    """Augmenting-path max-flow (Dinic) on an adjacency-list residual graph."""

    EPS = 1e-12

    def __init__(self, n):
        self.n = n
        self.head = [[] for _ in range(n)]
        self.to = []
        self.cap = []

    def add_edge(self, u, v, cap_uv, cap_vu=0.0):
        self.head[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(float(cap_uv))
        self.head[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(float(cap_vu))

    def _bfs(self, s, t):
        level = [-1] * self.n
        level[s] = 0
        queue = [s]
        for u in queue:
            for eid in self.head[u]:
                v = self.to[eid]
                if level[v] < 0 and self.cap[eid] > self.EPS:
                    level[v] = level[u] + 1
                    queue.append(v)
        self.level = level
        return level[t] >= 0

    def _dfs(self, u, t, pushed):
        if u == t:
            return pushed
        while self.it[u] < len(self.head[u]):
            eid = self.head[u][self.it[u]]
            v = self.to[eid]
            if self.cap[eid] > self.EPS and self.level[v] == self.level[u] + 1:
                got = self._dfs(v, t, min(pushed, self.cap[eid]))
                if got > self.EPS:
                    self.cap[eid] -= got
                    self.cap[eid ^ 1] += got
                    return got
            self.it[u] += 1
        return 0.0

    def max_flow(self, s, t):
        flow = 0.0
        while self._bfs(s, t):
            self.it = [0] * self.n
            while True:
                pushed = self._dfs(s, t, math.inf)
                if pushed <= self.EPS:
                    break
                flow += pushed
        return flow

    def min_cut_source_side(self, s):
        seen = [False] * self.n
        seen[s] = True
        queue = [s]
        for u in queue:
            for eid in self.head[u]:
                v = self.to[eid]
                if not seen[v] and self.cap[eid] > self.EPS:
                    seen[v] = True
                    queue.append(v)
        return seen


def _expand(alpha, f, cost, edges, weights):
    """Optimal single alpha-expansion move via an exact s-t min cut.

    Binary variable x_i = 1 means component i switches to alpha. The Potts
    pairwise table is submodular (triangle inequality), so the standard
    quadratic-pseudo-boolean reduction applies without auxiliary nodes.
    """
    n = len(f)
    src, snk = n, n + 1
    g = _Dinic(n + 2)
    u0 = cost[np.arange(n), f].copy()  # cost when keeping the current label
    u1 = cost[:, alpha].copy()  # cost when taking alpha

    for (i, j), w in zip(edges, weights):
        a = w * (f[i] != f[j])  # E(0,0)
        b = w * (f[i] != alpha)  # E(0,1)
        c = w * (alpha != f[j])  # E(1,0)
        u1[i] += c - a
        u1[j] += -c  # E(1,1) = 0
        nl = b + c - a
        if nl > 0:
            g.add_edge(i, j, nl)

    for i in range(n):
        base = min(u0[i], u1[i])
        # source->i is cut when i ends on the sink side (x_i = 1)
        g.add_edge(src, i, u1[i] - base)
        g.add_edge(i, snk, u0[i] - base)

    g.max_flow(src, snk)
    reach = g.min_cut_source_side(src)
    f2 = f.copy()
    for i in range(n):
        if not reach[i]:
            f2[i] = alpha
    return f2


def minimize_energy(
    comps: list[Component], graph: NeighborGraph, blobs: list[np.ndarray]
) -> Labeling:
    """Alpha-expansion over blob labels, sweeping until no sweep improves.

    Starts from the per-component data-cost argmin (ties to the lower
    label). A move is accepted only when the recomputed energy strictly
    decreases, which keeps ties resolved toward the incumbent labeling.
    """
    if not blobs:
        raise ValueError("no blob lines to label against")
    if not comps:
        raise ValueError("no components to label")
    cost = data_cost_matrix(comps, blobs)
    if not np.isfinite(cost).all():
        raise ValueError("non-finite data costs")
    edges, weights = _edge_arrays(comps, graph)

    f = np.argmin(cost, axis=1)
    energy = _energy(cost, edges, weights, f)
    if len(blobs) > 1:
        improved = True
        while improved:
            improved = False
            for alpha in range(len(blobs)):
                f2 = _expand(alpha, f, cost, edges, weights)
                e2 = _energy(cost, edges, weights, f2)
                if e2 < energy:
                    f, energy = f2, e2
                    improved = True
    labels = {c.id: int(f[i]) + 1 for i, c in enumerate(comps)}
    return Labeling(labels, energy)


def brute_force_labeling(
    comps: list[Component], graph: NeighborGraph, blobs: list[np.ndarray]
) -> Labeling:
    """Exact minimum by enumeration; ties go to the lexicographically
    smallest label vector. Test oracle for minimize_energy."""
    n_labels = len(blobs)
    if not blobs or not comps:
        raise ValueError("need components and blob lines")
    if n_labels ** len(comps) > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"instance too large for enumeration: {n_labels}^{len(comps)} labelings"
        )
    cost = data_cost_matrix(comps, blobs)
    edges, weights = _edge_arrays(comps, graph)
    best_f = None
    best_e = math.inf
    for assignment in itertools.product(range(n_labels), repeat=len(comps)):
        f = np.array(assignment, dtype=np.int64)
        e = _energy(cost, edges, weights, f)
        if e < best_e:
            best_e, best_f = e, f
    labels = {c.id: int(best_f[i]) + 1 for i, c in enumerate(comps)}
    return Labeling(labels, best_e)


def _touching_blobs(comp: Component, blobs: list[np.ndarray], width_hint: int) -> list[int]:
    keys = comp.pixels[:, 0] * width_hint + comp.pixels[:, 1]
    out = []
    for j, blob in enumerate(blobs):
        bk = np.asarray(blob)[:, 0] * width_hint + np.asarray(blob)[:, 1]
        if np.isin(keys, bk, assume_unique=False).any():
            out.append(j + 1)
    return out


def split_touching(
    comp: Component, assigned_label: int, blobs: list[np.ndarray], width_hint: int = 1 << 20
) -> np.ndarray:
    """Per-pixel labels for one component.

    A component whose pixels intersect two or more blob lines is split:
    each pixel takes the label of the blob line with the nearest pixel
    (ties to the lower label). Otherwise every pixel keeps the component's
    assigned label.
    """
    touching = _touching_blobs(comp, blobs, width_hint)
    if len(touching) < 2:
        return np.full(len(comp.pixels), assigned_label, dtype=np.int32)
    pts = comp.pixels.astype(np.float64)
    dists = np.empty((len(blobs), len(pts)))
    for j, blob in enumerate(blobs):
        tree = cKDTree(np.asarray(blob, dtype=np.float64))
        dists[j], _ = tree.query(pts)
    # argmin returns the first (lowest label) index on exact ties
    return (np.argmin(dists, axis=0) + 1).astype(np.int32)


def line_polygon(pixels: np.ndarray) -> list[tuple[int, int]]:
    """Convex outer polygon (x, y vertices) around a set of line pixels.

    Built from pixel corner points so rasterizing the polygon back covers
    every pixel center.
    """
    pix = np.asarray(pixels)
    rows, cols = pix[:, 0], pix[:, 1]
    corners = np.concatenate(
        [
            np.column_stack([cols, rows]),
            np.column_stack([cols + 1, rows]),
            np.column_stack([cols, rows + 1]),
            np.column_stack([cols + 1, rows + 1]),
        ]
    ).astype(np.float64)
    hull = ConvexHull(corners)
    return [(int(round(x)), int(round(y))) for x, y in corners[hull.vertices]]


def assemble_segmentation(
    comps: list[Component],
    labeling: Labeling,
    blobs: list[np.ndarray],
    dims: tuple[int, int],
    fallback: bool = False,
) -> SegmentationResult:
    """Paint per-pixel line labels, splitting components that touch
    several blob lines, and derive per-line counts and outer polygons."""
    h, w = dims
    label_map = np.zeros((h, w), dtype=np.int32)
    for comp in comps:
        px_labels = split_touching(comp, labeling.labels[comp.id], blobs, width_hint=w)
        label_map[comp.pixels[:, 0], comp.pixels[:, 1]] = px_labels

    counts: dict[int, int] = {}
    polygons: dict[int, list[tuple[int, int]]] = {}
    for lab in np.unique(label_map):
        if lab == 0:
            continue
        sel = np.argwhere(label_map == lab)
        counts[int(lab)] = len(sel)
        polygons[int(lab)] = line_polygon(sel)
    return SegmentationResult(label_map, counts, polygons, fallback=fallback)


def extract_lines(ink, blob_map, k_neighbors: int = 4) -> SegmentationResult:
    """Full extraction stage: components -> graph -> energy minimum -> pixels.

    With an empty blob map the whole page becomes a single flagged line so
    the pipeline stays total.
    """
    mask = np.asarray(getattr(ink, "mask", ink), dtype=bool)
    comps = extract_components(mask)
    dims = mask.shape
    if not comps:
        return SegmentationResult(np.zeros(dims, dtype=np.int32), {}, {}, fallback=True)
    blob_count = int(getattr(blob_map, "count", 0))
    if blob_count == 0:
        label_map = np.zeros(dims, dtype=np.int32)
        label_map[mask] = 1
        pix = np.argwhere(mask)
        return SegmentationResult(
            label_map, {1: int(mask.sum())}, {1: line_polygon(pix)}, fallback=True
        )
    blobs = [blob_line_pixels_of(blob_map, i) for i in range(1, blob_count + 1)]
    graph = build_neighbors(comps, k=k_neighbors)
    labeling = minimize_energy(comps, graph, blobs)
    return assemble_segmentation(comps, labeling, blobs, dims)


def blob_line_pixels_of(blob_map, blob_id: int) -> np.ndarray:
    """Pixel coordinates of one blob line from a BlobLineMap-like object."""
    labels = np.asarray(blob_map.labels)
    count = int(blob_map.count)
    if not 1 <= blob_id <= count:
        raise ValueError(f"blob id {blob_id} out of range 1..{count}")
    return np.argwhere(labels == blob_id)

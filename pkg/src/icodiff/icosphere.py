"""Hierarchical icosahedral sphere meshes and region atlases.

The vertex ordering is the load-bearing property: subdividing an order-k mesh
appends the new edge-midpoint vertices after all order-k vertices, midpoints
ranked by the sorted (min, max) index pair of their parent edge. Vertices
``0 .. 10*4**k + 1`` of any finer mesh therefore *are* the order-k mesh, which
turns pooling into a prefix slice and up-pooling into zero padding.

Neighbor rings are stored as 7 slots per vertex: the 5 or 6 distinct 1-ring
neighbors in counterclockwise order (seen from outside the sphere), starting
from the smallest neighbor index, followed by a repeat of the first neighbor
to close the fan. The 12 pentagon vertices additionally duplicate their first
neighbor into slot 6 so a fixed 7-tap filter can be applied everywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import stream

MAX_ORDER = 8

_PHI = (1.0 + np.sqrt(5.0)) / 2.0

# Canonical base icosahedron: three golden-ratio rectangles, axis aligned.
# The index order of this table (and of _BASE_FACES) is frozen; every
# downstream vertex index depends on it.
_BASE_VERTICES = np.array(
    [
        (-1.0, _PHI, 0.0),
        (1.0, _PHI, 0.0),
        (-1.0, -_PHI, 0.0),
        (1.0, -_PHI, 0.0),
        (0.0, -1.0, _PHI),
        (0.0, 1.0, _PHI),
        (0.0, -1.0, -_PHI),
        (0.0, 1.0, -_PHI),
        (_PHI, 0.0, -1.0),
        (_PHI, 0.0, 1.0),
        (-_PHI, 0.0, -1.0),
        (-_PHI, 0.0, 1.0),
    ],
    dtype=np.float64,
)

_BASE_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)

_ATLAS_MAGIC = b"ICRA"
_ATLAS_VERSION = 1


def prefix_count(order: int) -> int:
    """Vertex count of the order-``order`` icosphere: 10*4**order + 2."""
    order = int(order)
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    return 10 * 4**order + 2


@dataclass(frozen=True)
class IcosphereMesh:
    """Immutable icosphere of a given subdivision order.

    vertices: (V, 3) float64 unit vectors.
    faces: (F, 3) int64 triangles.
    neighbors: (V, 7) int64 ring table (see module docstring).
    prefix_counts: vertex counts of orders 0..order.
    """

    order: int
    vertices: np.ndarray
    faces: np.ndarray
    neighbors: np.ndarray
    prefix_counts: tuple[int, ...]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]


@dataclass(frozen=True)
class ROIAtlas:
    """Per-vertex parcellation into ``roi_count`` regions."""

    order: int
    roi_count: int
    labels: np.ndarray  # (V,) int64 in [0, roi_count)

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.shape != (prefix_count(self.order),):
            raise ValueError("label count does not match mesh order")
        if labels.min() < 0 or labels.max() >= self.roi_count:
            raise ValueError("labels outside [0, roi_count)")
        present = np.bincount(labels, minlength=self.roi_count) > 0
        if not present.all():
            missing = int(np.flatnonzero(~present)[0])
            raise ValueError(f"ROI {missing} has no vertices")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)


def _subdivide(vertices: np.ndarray, faces: np.ndarray):
    """One subdivision step; appends edge midpoints after parent vertices."""
    nv = vertices.shape[0]
    edges = np.vstack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)  # lexicographic order
    mids = vertices[edges[:, 0]] + vertices[edges[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    new_vertices = np.vstack([vertices, mids])

    keys = edges[:, 0] << 32 | edges[:, 1]

    def mid_index(a, b):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        return nv + np.searchsorted(keys, lo << 32 | hi)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    mab, mbc, mca = mid_index(a, b), mid_index(b, c), mid_index(c, a)
    new_faces = np.concatenate(
        [
            np.stack([a, mab, mca], axis=1),
            np.stack([b, mbc, mab], axis=1),
            np.stack([c, mca, mbc], axis=1),
            np.stack([mab, mbc, mca], axis=1),
        ],
        axis=0,
    )
    return new_vertices, new_faces


def _dedup_rows(mat: np.ndarray):
    """Per-row unique of an index matrix padded with -1.

    Returns (out, counts): ``out`` row-wise descending-sorted unique entries,
    -1 padded on the right.
    """
    s = np.sort(mat, axis=1)[:, ::-1]
    keep = np.ones_like(s, dtype=bool)
    keep[:, 1:] = s[:, 1:] != s[:, :-1]
    keep &= s >= 0
    counts = keep.sum(axis=1)
    width = int(counts.max())
    out = np.full((s.shape[0], width), -1, dtype=np.int64)
    rows = np.nonzero(keep)[0]
    cols = (np.cumsum(keep, axis=1) - 1)[keep]
    out[rows, cols] = s[keep]
    return out, counts


def _ordered_neighbor_table(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Build the (V, 7) counterclockwise ring table with the pentagon rule."""
    n_verts = vertices.shape[0]
    directed = np.vstack(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]],
         faces[:, [1, 0]], faces[:, [2, 1]], faces[:, [0, 2]]]
    )
    directed = np.unique(directed, axis=0)
    src, dst = directed[:, 0], directed[:, 1]
    degree = np.bincount(src, minlength=n_verts)
    offsets = np.zeros(n_verts + 1, dtype=np.int64)
    np.cumsum(degree, out=offsets[1:])
    slot = np.arange(len(src)) - offsets[src]
    padded = np.full((n_verts, 6), -1, dtype=np.int64)
    padded[src, slot] = dst

    # Tangent-plane angles. (e1, e2, normal) is right handed, so increasing
    # atan2 angle is counterclockwise seen from outside the sphere.
    normal = vertices
    ref = np.where(np.abs(normal[:, 2:3]) > 0.9, (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    e1 = ref - normal * (normal * ref).sum(axis=1, keepdims=True)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(normal, e1)

    rel = vertices[np.maximum(padded, 0)] - vertices[:, None, :]
    ang = np.arctan2((rel * e2[:, None, :]).sum(-1), (rel * e1[:, None, :]).sum(-1))
    ang[padded < 0] = np.inf
    ring = np.take_along_axis(padded, np.argsort(ang, axis=1), axis=1)

    table = np.empty((n_verts, 7), dtype=np.int64)
    for deg in (5, 6):
        sel = degree == deg
        cyc = ring[sel, :deg]
        start = np.argmin(cyc, axis=1)
        rolled = np.take_along_axis(
            cyc, (start[:, None] + np.arange(deg)) % deg, axis=1
        )
        block = np.empty((rolled.shape[0], 7), dtype=np.int64)
        block[:, :deg] = rolled
        block[:, deg:] = rolled[:, :1]  # pentagon pad + fan closure
        table[sel] = block
    return table


@lru_cache(maxsize=None)
def build_icosphere(order: int) -> IcosphereMesh:
    """Construct the canonical order-``order`` icosphere.

    Deterministic: the same order always yields bit-identical arrays. Raises
    ValueError for order outside [0, MAX_ORDER].
    """
    order = int(order)
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in [0, {MAX_ORDER}], got {order}")
    vertices = _BASE_VERTICES / np.linalg.norm(_BASE_VERTICES, axis=1, keepdims=True)
    faces = _BASE_FACES.copy()
    for _ in range(order):
        vertices, faces = _subdivide(vertices, faces)
    neighbors = _ordered_neighbor_table(vertices, faces)
    for arr in (vertices, faces, neighbors):
        arr.setflags(write=False)
    return IcosphereMesh(
        order=order,
        vertices=vertices,
        faces=faces,
        neighbors=neighbors,
        prefix_counts=tuple(prefix_count(k) for k in range(order + 1)),
    )


def ordered_ring(mesh: IcosphereMesh, v: int) -> np.ndarray:
    """The 7-slot neighbor ring of vertex ``v`` (copy of the mesh table)."""
    v = int(v)
    if not 0 <= v < mesh.n_vertices:
        raise IndexError(f"vertex {v} out of range for order-{mesh.order} mesh")
    return mesh.neighbors[v].copy()


def conv_indices(mesh: IcosphereMesh) -> np.ndarray:
    """(V, 7) gather table for 1-ring filters: self tap then ring slots 0..5."""
    own = np.arange(mesh.n_vertices, dtype=np.int64)[:, None]
    return np.concatenate([own, mesh.neighbors[:, :6]], axis=1)


@lru_cache(maxsize=None)
def _ring_window_cached(order: int, radius: int):
    mesh = build_icosphere(order)
    window = np.arange(mesh.n_vertices, dtype=np.int64)[:, None]
    for _ in range(radius):
        nb = mesh.neighbors[np.maximum(window, 0)][..., :6]
        nb = np.where((window >= 0)[:, :, None], nb, -1)
        window = np.concatenate([window, nb.reshape(mesh.n_vertices, -1)], axis=1)
        window, counts = _dedup_rows(window)
    if radius == 0:
        counts = np.ones(mesh.n_vertices, dtype=np.int64)
    for arr in (window, counts):
        arr.setflags(write=False)
    return window, counts


def ring_window(mesh: IcosphereMesh, radius: int):
    """Vertex indices within ``radius`` edge hops of each vertex.

    Returns (indices, counts): indices is (V, K) int64 padded with -1; entries
    are deduplicated and include the vertex itself.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    return _ring_window_cached(mesh.order, int(radius))


def voronoi_atlas(mesh: IcosphereMesh, roi_count: int, seed: int) -> ROIAtlas:
    """Partition the mesh into ``roi_count`` nearest-seed-vertex parcels.

    Seed vertices are drawn without replacement from a Philox stream keyed by
    ``seed``; each vertex is labeled by the seed of smallest great-circle
    distance (arccos of the clamped dot product), ties to the lowest ROI id.
    """
    if not 1 <= roi_count <= mesh.n_vertices:
        raise ValueError(
            f"roi_count must be in [1, {mesh.n_vertices}], got {roi_count}"
        )
    rng = stream(seed, 101)
    for _ in range(32):
        seeds = rng.choice(mesh.n_vertices, size=roi_count, replace=False)
        dots = np.clip(mesh.vertices @ mesh.vertices[seeds].T, -1.0, 1.0)
        labels = np.argmin(np.arccos(dots), axis=1).astype(np.int64)
        if (np.bincount(labels, minlength=roi_count) > 0).all():
            return ROIAtlas(order=mesh.order, roi_count=roi_count, labels=labels)
    raise RuntimeError("could not draw seeds producing nonempty ROIs")


def save_atlas(atlas: ROIAtlas, path) -> None:
    header = struct.pack(
        "<4sIII", _ATLAS_MAGIC, _ATLAS_VERSION, atlas.order, atlas.roi_count
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(atlas.labels.astype("<u4").tobytes())


def load_atlas(path) -> ROIAtlas:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated atlas header")
        magic, version, order, roi_count = struct.unpack("<4sIII", header)
        if magic != _ATLAS_MAGIC:
            raise ValueError(f"{path}: not an ICRA atlas file")
        if version != _ATLAS_VERSION:
            raise ValueError(f"{path}: unsupported ICRA version {version}")
        raw = fh.read()
    n_verts = prefix_count(order)
    labels = np.frombuffer(raw, dtype="<u4")
    if labels.shape[0] != n_verts:
        raise ValueError(f"{path}: expected {n_verts} labels, got {labels.shape[0]}")
    return ROIAtlas(order=order, roi_count=roi_count, labels=labels.astype(np.int64))

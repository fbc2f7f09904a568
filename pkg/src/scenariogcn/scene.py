"""Per-frame ego-centric graphs and their assembly into time-aligned batches.

Vertex order inside a frame is ego, agents by ascending track id, then
waypoints in lane-graph order.  Five relations connect them:

    suc, pre   waypoint -> next / previous waypoint (directed)
    W2A        waypoint - agent within ``d``   (undirected)
    E2W        ego - waypoint within ``d``     (undirected)
    E2A        ego - agent within ``d``        (undirected)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lanes import LaneGraph, build_directional_relation, id_key, wrap_angle
from .tensor import SparseRelation

RELATIONS = ("suc", "pre", "W2A", "E2W", "E2A")
DISTANCE_THRESHOLD = 30.0
MIN_WEIGHT_DISTANCE = 0.5


@dataclass(frozen=True)
class AgentState:
    track_id: object
    x: float
    y: float
    phi: float
    v: float

    def __post_init__(self):
        vals = (self.x, self.y, self.phi, self.v)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"agent {self.track_id!r}: non-finite state")
        if self.v < 0:
            raise ValueError(f"agent {self.track_id!r}: negative speed {self.v}")


@dataclass(frozen=True)
class EgoPose:
    x: float
    y: float
    phi: float
    v: float

    def __post_init__(self):
        if not all(math.isfinite(float(v)) for v in (self.x, self.y, self.phi, self.v)):
            raise ValueError("ego pose must be finite")


def ego_transform(pose: EgoPose, x, y, phi, v=0.0):
    """Express map-frame states in the frame of ``pose`` (ego heading along +x).

    Works on scalars or equal-length arrays; speeds pass through unchanged.
    """
    dx = np.asarray(x, dtype=np.float64) - pose.x
    dy = np.asarray(y, dtype=np.float64) - pose.y
    c, s = math.cos(pose.phi), math.sin(pose.phi)
    xe = c * dx + s * dy
    ye = -s * dx + c * dy
    phe = wrap_angle(np.asarray(phi, dtype=np.float64) - pose.phi)
    if np.ndim(xe) == 0:
        return float(xe), float(ye), float(phe), float(v)
    return xe, ye, phe, np.broadcast_to(np.asarray(v, dtype=np.float64), xe.shape).copy()


# ---------------------------------------------------------------- normalization


def add_self_loops(rel: SparseRelation, anchors=()) -> SparseRelation:
    """``A + I`` restricted to vertices that touch an edge (plus ``anchors``).

    Vertices with no incident edge keep an all-zero row and column, so they
    stay silent through propagation unless explicitly anchored.
    """
    n = rel.n_vertices
    keep = rel.incident()
    anchors = np.asarray(anchors)
    if anchors.dtype == bool:
        keep |= anchors
    elif anchors.size:
        keep[anchors.astype(np.int64)] = True
    src, dst, w = rel.src, rel.dst, rel.weight
    if rel.undirected:
        off = src != dst
        src, dst, w = (
            np.concatenate([src, dst[off]]),
            np.concatenate([dst, src[off]]),
            np.concatenate([w, w[off]]),
        )
    loops = np.flatnonzero(keep)
    src = np.concatenate([src, loops])
    dst = np.concatenate([dst, loops])
    w = np.concatenate([w, np.ones(len(loops))])
    # merge an explicit self edge with the added identity
    key = src * n + dst
    uniq, inv = np.unique(key, return_inverse=True)
    w = np.bincount(inv, weights=w, minlength=len(uniq))
    return SparseRelation(n, uniq // n, uniq % n, w)


def normalize_relation(rel: SparseRelation, anchors=()) -> SparseRelation:
    """Symmetric GCN normalization ``D^-1/2 (A + I) D^-1/2``.

    ``D`` holds the row sums of the symmetrized ``(Ã + Ãᵀ) / 2`` so directed
    relations use the same formula; for undirected ones it is the plain degree.
    """
    if rel.normalized:
        raise ValueError("relation is already normalized")
    tilde = add_self_loops(rel, anchors)
    n = tilde.n_vertices
    src, dst, w = tilde.src, tilde.dst, tilde.weight
    deg = 0.5 * (np.bincount(src, weights=w, minlength=n) + np.bincount(dst, weights=w, minlength=n))
    wn = w / np.sqrt(deg[src] * deg[dst])
    return SparseRelation(n, src, dst, wn, normalized=True)


# ---------------------------------------------------------------- scene graph


@dataclass(frozen=True)
class SceneGraph:
    vertices: np.ndarray
    edges: dict
    relations: dict
    track_ids: tuple
    n_waypoints: int
    ego_index: int = 0

    @property
    def n_agents(self) -> int:
        return len(self.track_ids)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def agent_slice(self) -> slice:
        return slice(1, 1 + self.n_agents)

    @property
    def waypoint_slice(self) -> slice:
        return slice(1 + self.n_agents, self.n_vertices)


def relation_anchors(name: str, n_agents: int, n_waypoints: int) -> np.ndarray:
    """Vertices that keep a self-loop in ``name`` even without an edge.

    The ego always keeps its own state in ego-centred relations, agents keep
    theirs through W2A, and every waypoint takes part in suc/pre.
    """
    n = 1 + n_agents + n_waypoints
    mask = np.zeros(n, dtype=bool)
    if name in ("suc", "pre"):
        mask[1 + n_agents:] = True
    elif name == "W2A":
        mask[: 1 + n_agents] = True
    elif name in ("E2A", "E2W", "merged"):
        mask[0] = True
    else:
        raise ValueError(f"unknown relation {name!r}")
    return mask


def _pairs_within(a_xy, b_xy, d):
    if len(a_xy) == 0 or len(b_xy) == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    dist = np.hypot(a_xy[:, None, 0] - b_xy[None, :, 0], a_xy[:, None, 1] - b_xy[None, :, 1])
    i, j = np.nonzero(dist <= d)
    return i, j, dist[i, j]


def build_scene_graph(
    pose: EgoPose,
    agents,
    lanes: LaneGraph,
    d: float = DISTANCE_THRESHOLD,
    weighted: bool = False,
    d_min: float = MIN_WEIGHT_DISTANCE,
) -> SceneGraph:
    """Build the ego-centred graph of one frame.

    Distances are Euclidean in the plane.  With ``weighted`` the proximity
    relations carry ``1 / max(distance, d_min)`` instead of unit weights.
    """
    agents = sorted(agents, key=lambda a: id_key(a.track_id))
    ids = tuple(a.track_id for a in agents)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate track_id within one frame")
    na = len(agents)
    wp = lanes.waypoint_array()
    nw = len(wp)
    n = 1 + na + nw

    verts = np.zeros((n, 4))
    verts[0] = (0.0, 0.0, 0.0, pose.v)
    if na:
        st = np.array([(a.x, a.y, a.phi, a.v) for a in agents])
        verts[1: 1 + na] = np.column_stack(ego_transform(pose, st[:, 0], st[:, 1], st[:, 2], st[:, 3]))
    if nw:
        verts[1 + na:] = np.column_stack(ego_transform(pose, wp[:, 0], wp[:, 1], wp[:, 2], 0.0))

    ego_xy = verts[:1, :2]
    ag_xy = verts[1: 1 + na, :2]
    wp_xy = verts[1 + na:, :2]

    def weights(dist):
        if weighted:
            return 1.0 / np.maximum(dist, d_min)
        return np.ones(len(dist))

    off_a, off_w = 1, 1 + na
    edges = {}
    for name in ("suc", "pre"):
        r = build_directional_relation(lanes, name)
        edges[name] = SparseRelation(n, r.src + off_w, r.dst + off_w, r.weight)
    i, j, dist = _pairs_within(wp_xy, ag_xy, d)
    edges["W2A"] = SparseRelation(n, i + off_w, j + off_a, weights(dist), undirected=True)
    _, j, dist = _pairs_within(ego_xy, wp_xy, d)
    edges["E2W"] = SparseRelation(n, np.zeros_like(j), j + off_w, weights(dist), undirected=True)
    _, j, dist = _pairs_within(ego_xy, ag_xy, d)
    edges["E2A"] = SparseRelation(n, np.zeros_like(j), j + off_a, weights(dist), undirected=True)

    rels = {k: normalize_relation(edges[k], relation_anchors(k, na, nw)) for k in RELATIONS}
    return SceneGraph(verts, edges, rels, ids, nw)


# ---------------------------------------------------------------- sequences


@dataclass
class SequenceBatch:
    """A scenario laid out on the union vertex set of all its frames.

    ``features`` is ``(N, 4, T)``; ``edges[name][t]`` holds frame ``t``'s raw
    (unnormalized) relation in union indices.
    """

    features: np.ndarray
    mask: np.ndarray
    edges: dict
    labels: list
    track_ids: tuple
    n_waypoints: int
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_frames(self) -> int:
        return self.features.shape[2]

    @property
    def n_vertices(self) -> int:
        return self.features.shape[0]

    @property
    def n_agents(self) -> int:
        return len(self.track_ids)

    def relation(self, name: str, t: int) -> SparseRelation:
        """Normalized relation of frame ``t`` in union indices."""
        anchors = relation_anchors(name, self.n_agents, self.n_waypoints) & self.mask[:, t]
        return normalize_relation(self.edges[name][t], anchors)


def assemble_sequence(frames, labels) -> SequenceBatch:
    """Align per-frame graphs on ego + every track id seen + all waypoints."""
    frames = list(frames)
    labels = [int(c) for c in labels]
    if not frames or len(frames) != len(labels):
        raise ValueError(f"need T >= 1 frames and as many labels ({len(frames)} vs {len(labels)})")
    nw = frames[0].n_waypoints
    all_ids = set()
    for f in frames:
        if len(set(f.track_ids)) != len(f.track_ids):
            raise ValueError("duplicate track_id within one frame")
        if f.n_waypoints != nw:
            raise ValueError("frames of one sequence must share the lane graph")
        all_ids.update(f.track_ids)
    ids = tuple(sorted(all_ids, key=id_key))
    slot = {tid: 1 + k for k, tid in enumerate(ids)}
    n = 1 + len(ids) + nw
    t_len = len(frames)
    feats = np.zeros((n, 4, t_len))
    mask = np.zeros((n, t_len), dtype=bool)
    edges = {k: [] for k in RELATIONS}
    for t, f in enumerate(frames):
        remap = np.empty(f.n_vertices, dtype=np.int64)
        remap[0] = 0
        remap[f.agent_slice] = [slot[tid] for tid in f.track_ids]
        remap[f.waypoint_slice] = np.arange(1 + len(ids), n)
        feats[remap, :, t] = f.vertices
        mask[remap, t] = True
        for k in RELATIONS:
            r = f.edges[k]
            edges[k].append(
                SparseRelation(n, remap[r.src], remap[r.dst], r.weight, undirected=r.undirected)
            )
    return SequenceBatch(feats, mask, edges, labels, ids, nw)

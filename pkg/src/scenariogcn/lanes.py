"""Static lane map: centerline waypoints every 3 m and their topology."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import SparseRelation

WAYPOINT_INTERVAL = 3.0


def wrap_angle(phi):
    """Wrap angles into (-pi, pi]."""
    out = np.mod(np.asarray(phi, dtype=np.float64) + math.pi, 2 * math.pi) - math.pi
    out = np.where(out <= -math.pi, out + 2 * math.pi, out)
    return float(out) if np.ndim(out) == 0 else out


def id_key(v):
    """Sort key that orders ints numerically and keeps strings after ints."""
    return (isinstance(v, str), v)


@dataclass(frozen=True)
class LaneSegment:
    id: object
    centerline: np.ndarray
    successor_ids: tuple = ()
    predecessor_ids: tuple = ()

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError(f"lane segment {self.id!r}: centerline needs at least 2 points")
        if np.any(np.hypot(*np.diff(pts, axis=0).T) == 0):
            raise ValueError(f"lane segment {self.id!r}: repeated consecutive centerline point")
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "successor_ids", tuple(self.successor_ids))
        object.__setattr__(self, "predecessor_ids", tuple(self.predecessor_ids))

    @property
    def length(self) -> float:
        return float(np.hypot(*np.diff(self.centerline, axis=0).T).sum())


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    phi: float
    segment_id: object
    index_in_segment: int


def resample_centerline(segment: LaneSegment, interval: float = WAYPOINT_INTERVAL) -> list[Waypoint]:
    """Sample the centerline at arc lengths 0, interval, 2*interval, ...

    The final endpoint is always emitted so successor links attach to the
    true geometric end, even when the last gap is shorter than ``interval``.
    The last waypoint reuses the heading of the one before it.
    """
    if not interval > 0:
        raise ValueError(f"interval must be positive, got {interval}")
    pts = segment.centerline
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    total = s[-1]
    if total <= 1e-6:
        raise ValueError(f"lane segment {segment.id!r} has zero length")
    n = int(math.floor(total / interval + 1e-9))
    stations = np.arange(n + 1) * interval
    if total - stations[-1] > 1e-6:
        stations = np.append(stations, total)
    else:
        stations[-1] = total
    xs = np.interp(stations, s, pts[:, 0])
    ys = np.interp(stations, s, pts[:, 1])
    phis = np.arctan2(np.diff(ys), np.diff(xs))
    phis = np.append(phis, phis[-1])
    phis = wrap_angle(phis)
    return [
        Waypoint(float(x), float(y), float(p), segment.id, i)
        for i, (x, y, p) in enumerate(zip(xs, ys, phis))
    ]


@dataclass(frozen=True)
class LaneGraph:
    segments: tuple
    waypoints: tuple = field(init=False)

    def __post_init__(self):
        segs = tuple(sorted(self.segments, key=lambda s: id_key(s.id)))
        ids = [s.id for s in segs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate lane segment id")
        known = set(ids)
        for seg in segs:
            for ref in seg.successor_ids + seg.predecessor_ids:
                if ref not in known:
                    raise ValueError(f"lane segment {seg.id!r} references unknown segment {ref!r}")
        object.__setattr__(self, "segments", segs)
        wps = tuple(w for seg in segs for w in resample_centerline(seg))
        object.__setattr__(self, "waypoints", wps)

    @classmethod
    def from_segments(cls, segments):
        return cls(tuple(segments))

    @property
    def n_waypoints(self) -> int:
        return len(self.waypoints)

    def waypoint_array(self) -> np.ndarray:
        """``(M, 3)`` array of x, y, phi in map frame."""
        if not self.waypoints:
            return np.zeros((0, 3))
        return np.array([(w.x, w.y, w.phi) for w in self.waypoints])

    def segment_ranges(self) -> dict:
        """segment id -> (first waypoint index, last waypoint index)."""
        out = {}
        for i, w in enumerate(self.waypoints):
            lo, _ = out.get(w.segment_id, (i, i))
            out[w.segment_id] = (lo, i)
        return out


def build_directional_relation(graph: LaneGraph, direction: str) -> SparseRelation:
    """Waypoint-to-successor (``suc``) or waypoint-to-predecessor (``pre``) edges.

    Inside a segment each waypoint links to the next one; a segment's last
    waypoint links to the first waypoint of every successor segment, which
    covers forks.  ``pre`` is the exact transpose of ``suc``.
    """
    if direction not in ("suc", "pre"):
        raise ValueError(f"direction must be 'suc' or 'pre', got {direction!r}")
    ranges = graph.segment_ranges()
    src, dst = [], []
    for seg in graph.segments:
        lo, hi = ranges[seg.id]
        src.extend(range(lo, hi))
        dst.extend(range(lo + 1, hi + 1))
        for succ in seg.successor_ids:
            if succ not in ranges:
                raise ValueError(f"unresolved successor id {succ!r} of segment {seg.id!r}")
            src.append(hi)
            dst.append(ranges[succ][0])
    if direction == "pre":
        src, dst = dst, src
    return SparseRelation(graph.n_waypoints, src, dst, np.ones(len(src)))

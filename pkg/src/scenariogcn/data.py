"""Scenario sequences: file format, frequency alignment, extraction and splits.

One sequence per JSON line::

    {"id", "source", "hz",
     "frames": [{"t", "ego": {"x","y","phi","v"},
                 "agents": [{"id","x","y","phi","v"}], "label"}],
     "lanes": [{"id", "pts": [[x, y], ...], "suc": [...], "pre": [...]}]}
"""
from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .lanes import LaneGraph, LaneSegment, id_key, wrap_angle
from .scene import AgentState, EgoPose, SequenceBatch, assemble_sequence, build_scene_graph

SCENARIO_CLASSES = (
    "no-scenario",
    "cut-in",
    "stationary-vehicle-in-lane",
    "ego-lane-change-right",
    "ego-lane-change-left",
    "right-turn-at-crossing",
    "left-turn-at-crossing",
    "straight-ahead-at-crossing",
)
TARGET_HZ = 4
SUPPORTED_HZ = (2, 4, 10)
MAX_CONTEXT = 8


@dataclass(frozen=True)
class Frame:
    t: float
    ego: EgoPose
    agents: tuple = ()
    label: int | None = None


@dataclass(frozen=True)
class Sequence:
    id: str
    source: str
    hz: float
    frames: tuple
    lanes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "lanes", tuple(self.lanes))

    @property
    def labels(self) -> list:
        return [f.label for f in self.frames]

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def lane_graph(self) -> LaneGraph:
        return LaneGraph.from_segments(self.lanes)

    def validate(self):
        if not self.frames:
            raise ValueError(f"sequence {self.id}: no frames")
        ts = np.array([f.t for f in self.frames])
        if len(ts) > 1:
            dts = np.diff(ts)
            if np.any(dts <= 0):
                raise ValueError(f"sequence {self.id}: timestamps not strictly increasing")
            if np.max(np.abs(dts - 1.0 / self.hz)) > 1e-6:
                raise ValueError(f"sequence {self.id}: timestamps not uniform at {self.hz} Hz")
        for f in self.frames:
            ids = [a.track_id for a in f.agents]
            if len(set(ids)) != len(ids):
                raise ValueError(f"sequence {self.id}: duplicate track id at t={f.t}")
            if f.label is not None and not 0 <= f.label < len(SCENARIO_CLASSES):
                raise ValueError(f"sequence {self.id}: label {f.label} out of range")
        return self


# ---------------------------------------------------------------- JSON lines


def _num(x) -> float:
    """Round to at most 9 significant digits for serialization."""
    return float(f"{float(x):.9g}")


def sequence_to_dict(seq: Sequence) -> dict:
    return {
        "id": seq.id,
        "source": seq.source,
        "hz": seq.hz,
        "frames": [
            {
                "t": _num(f.t),
                "ego": {"x": _num(f.ego.x), "y": _num(f.ego.y), "phi": _num(f.ego.phi), "v": _num(f.ego.v)},
                "agents": [
                    {"id": a.track_id, "x": _num(a.x), "y": _num(a.y), "phi": _num(a.phi), "v": _num(a.v)}
                    for a in f.agents
                ],
                "label": f.label,
            }
            for f in seq.frames
        ],
        "lanes": [
            {
                "id": s.id,
                "pts": [[_num(x), _num(y)] for x, y in s.centerline],
                "suc": list(s.successor_ids),
                "pre": list(s.predecessor_ids),
            }
            for s in seq.lanes
        ],
    }


def sequence_from_dict(d: dict) -> Sequence:
    try:
        frames = tuple(
            Frame(
                t=float(f["t"]),
                ego=EgoPose(float(f["ego"]["x"]), float(f["ego"]["y"]), float(f["ego"]["phi"]), float(f["ego"]["v"])),
                agents=tuple(
                    AgentState(a["id"], float(a["x"]), float(a["y"]), float(a["phi"]), float(a["v"]))
                    for a in f.get("agents", [])
                ),
                label=None if f.get("label") is None else int(f["label"]),
            )
            for f in d["frames"]
        )
        lanes = tuple(
            LaneSegment(s["id"], s["pts"], tuple(s.get("suc", [])), tuple(s.get("pre", [])))
            for s in d.get("lanes", [])
        )
        hz = d["hz"]
        seq = Sequence(str(d["id"]), str(d.get("source", "")), hz, frames, lanes)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed sequence record: {exc!r}") from exc
    return seq.validate()


def dumps_sequence(seq: Sequence) -> str:
    return json.dumps(sequence_to_dict(seq), separators=(",", ":"))


def write_jsonl(sequences, path):
    with open(path, "w") as fh:
        for s in sequences:
            fh.write(dumps_sequence(s))
            fh.write("\n")


def read_jsonl(path) -> list[Sequence]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(sequence_from_dict(json.loads(line)))
            except (ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------- frequency alignment


def _lerp_angle(a, b, w):
    return wrap_angle(a + w * wrap_angle(b - a))


def _lerp_state(a, b, w):
    return (
        a.x + w * (b.x - a.x),
        a.y + w * (b.y - a.y),
        _lerp_angle(a.phi, b.phi, w),
        a.v + w * (b.v - a.v),
    )


def resample_to_4hz(seq: Sequence) -> Sequence:
    """Linearly interpolate a 2, 4 or 10 Hz sequence onto a 0.25 s grid.

    Headings follow the shortest arc; labels come from the nearest source
    frame (the earlier one on ties); an agent seen in only one of the two
    bracketing frames is copied from that frame.
    """
    if seq.hz not in SUPPORTED_HZ:
        raise ValueError(f"unsupported sample rate {seq.hz} Hz (expected one of {SUPPORTED_HZ})")
    seq.validate()
    if seq.hz == TARGET_HZ:
        return seq
    src = seq.frames
    ts = np.array([f.t for f in src])
    t0 = ts[0]
    n_out = int(math.floor((ts[-1] - t0) * TARGET_HZ + 1e-6)) + 1
    frames = []
    for k in range(n_out):
        tau = t0 + k / TARGET_HZ
        i = int(np.searchsorted(ts, tau + 1e-9, side="right")) - 1
        i = min(max(i, 0), len(src) - 1)
        if i == len(src) - 1 or abs(tau - ts[i]) < 1e-9:
            j, w = i, 0.0
        else:
            j = i + 1
            w = (tau - ts[i]) / (ts[j] - ts[i])
        a, b = src[i], src[j]
        ego = EgoPose(*_lerp_state(a.ego, b.ego, w))
        by_a = {ag.track_id: ag for ag in a.agents}
        by_b = {ag.track_id: ag for ag in b.agents}
        agents = []
        for tid in sorted(set(by_a) | set(by_b), key=id_key):
            if tid in by_a and tid in by_b:
                agents.append(AgentState(tid, *_lerp_state(by_a[tid], by_b[tid], w)))
            else:
                agents.append(by_a.get(tid) or by_b[tid])
        label = a.label if w <= 0.5 else b.label
        frames.append(Frame(float(tau), ego, tuple(agents), label))
    return replace(seq, hz=TARGET_HZ, frames=tuple(frames))


# ---------------------------------------------------------------- scenario extraction


def nonzero_runs(labels) -> list[tuple[int, int]]:
    """Maximal runs of non-zero labels as inclusive ``(start, end)``."""
    runs = []
    start = None
    for i, c in enumerate(list(labels) + [0]):
        if c and start is None:
            start = i
        elif not c and start is not None:
            runs.append((start, i - 1))
            start = None
    return runs


def extract_scenarios(seq: Sequence, seed: int, max_context: int = MAX_CONTEXT) -> list[Sequence]:
    """Cut every non-zero run out with 0..max_context random context frames per side."""
    if any(f.label is None for f in seq.frames):
        raise ValueError(f"sequence {seq.id}: extraction needs per-frame labels")
    rng = np.random.default_rng(seed)
    out = []
    n = seq.n_frames
    for k, (s, e) in enumerate(nonzero_runs(seq.labels)):
        left, right = (int(v) for v in rng.integers(0, max_context + 1, size=2))
        lo, hi = max(0, s - left), min(n - 1, e + right)
        out.append(replace(seq, id=f"{seq.id}#{k}", frames=seq.frames[lo: hi + 1]))
    return out


# ---------------------------------------------------------------- splits and statistics


def primary_class(labels) -> int:
    """Most frequent non-zero label (smallest id on ties), 0 if none."""
    counts = Counter(int(c) for c in labels if c)
    if not counts:
        return 0
    return min(counts, key=lambda c: (-counts[c], c))


def split(sequences, ratio: float, seed: int):
    """Stratified sequence-level train/val split.

    Every class with at least two sequences lands in both splits when the
    requested sizes allow it; singleton classes go to train with a warning.
    No class is moved entirely into val, even if that leaves val short.
    Returns ``(train_ids, val_ids)`` in input order.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    seqs = list(sequences)
    ids = [s.id for s in seqs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sequence ids")
    strata = {}
    for s in seqs:
        strata.setdefault(primary_class(s.labels), []).append(s.id)
    n_val = int(round((1.0 - ratio) * len(seqs) + 1e-9))
    classes = sorted(strata)
    quota = {c: (1.0 - ratio) * len(strata[c]) for c in classes}
    lo = {c: 1 if len(strata[c]) >= 2 else 0 for c in classes}
    hi = {c: len(strata[c]) - 1 if len(strata[c]) >= 2 else 0 for c in classes}
    for c in classes:
        if len(strata[c]) == 1:
            warnings.warn(f"class {c} has a single sequence; assigned to train only", stacklevel=2)
    alloc = {c: min(max(int(math.floor(quota[c])), lo[c]), hi[c]) for c in classes}
    # every class keeps a training sequence, so val may come out short
    while sum(alloc.values()) < n_val:
        cand = [c for c in classes if alloc[c] < hi[c]]
        if not cand:
            break
        c = max(cand, key=lambda c: (quota[c] - alloc[c], -c))
        alloc[c] += 1
    while sum(alloc.values()) > n_val:
        cand = [c for c in classes if alloc[c] > lo[c]] or [c for c in classes if alloc[c] > 0]
        c = min(cand, key=lambda c: (quota[c] - alloc[c], c))
        alloc[c] -= 1
    rng = np.random.default_rng(seed)
    val = set()
    for c in classes:
        members = list(strata[c])
        perm = rng.permutation(len(members))
        val.update(members[i] for i in perm[: alloc[c]])
    train_ids = [i for i in ids if i not in val]
    val_ids = [i for i in ids if i in val]
    return train_ids, val_ids


def class_statistics(sequences, hz: float = TARGET_HZ) -> dict:
    """Per-class frame counts, scenario-instance counts and durations (s)."""
    from .metrics import segmentize

    frames = Counter()
    durations = {}
    for s in sequences:
        labels = s.labels
        frames.update(int(c) for c in labels)
        for seg in segmentize(labels):
            if seg.cls:
                durations.setdefault(seg.cls, []).append((seg.end - seg.start + 1) / hz)
    out = {}
    for c in range(len(SCENARIO_CLASSES)):
        d = durations.get(c, [])
        out[c] = {
            "name": SCENARIO_CLASSES[c],
            "frames": int(frames.get(c, 0)),
            "instances": len(d),
            "mean_s": float(np.mean(d)) if d else None,
            "std_s": float(np.std(d)) if d else None,
        }
    return out


def build_manifest(sequences, train_ids, val_ids) -> dict:
    if set(train_ids) & set(val_ids):
        raise ValueError("train and val splits overlap")
    by_id = {s.id: s for s in sequences}
    missing = [i for i in list(train_ids) + list(val_ids) if i not in by_id]
    if missing:
        raise ValueError(f"manifest references unknown sequences {missing[:5]}")
    return {
        "train": list(train_ids),
        "val": list(val_ids),
        "class_statistics": {
            "train": class_statistics(by_id[i] for i in train_ids),
            "val": class_statistics(by_id[i] for i in val_ids),
        },
    }


def write_manifest(manifest: dict, path):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        m = json.load(fh)
    if set(m.get("train", [])) & set(m.get("val", [])):
        raise ValueError(f"{path}: train and val splits overlap")
    return m


# ---------------------------------------------------------------- graph batches


def sequence_to_batch(seq: Sequence, weighted: bool = False) -> SequenceBatch:
    """Build every frame's scene graph and align them into one batch."""
    if any(f.label is None for f in seq.frames):
        raise ValueError(f"sequence {seq.id}: every frame needs a label")
    lanes = seq.lane_graph()
    graphs = [build_scene_graph(f.ego, f.agents, lanes, weighted=weighted) for f in seq.frames]
    return assemble_sequence(graphs, seq.labels)

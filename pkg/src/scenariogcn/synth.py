"""Kinematic scenario templates on procedurally built lane graphs.

Classes 1-4 run on a straight two-lane road along +x (right lane at y=0,
left lane at y=3.5); classes 5-7 cross a four-way intersection approached
from the south.  Every sequence is sampled at 4 Hz with unlabeled lead-in
and lead-out, then moved by a random rigid transform of the whole map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Frame, Sequence
from .lanes import LaneSegment, wrap_angle
from .scene import AgentState, EgoPose

DT = 0.25
LANE_WIDTH = 3.5
BOX_HALF = 7.0
LANE_OFFSET = 1.75
ZONE_MARGIN = 8.0
LATERAL_SPEED_THRESHOLD = 0.2
MAX_DURATION = 17.0
MAP_MARGIN = 15.0
MIN_DURATION = 2.0

# mean and standard deviation (s) of the labeled phase per class
DURATIONS = {
    1: (4.7, 1.8),
    2: (8.1, 3.8),
    3: (4.3, 1.5),
    4: (4.6, 1.2),
    5: (7.0, 2.6),
    6: (6.7, 2.4),
    7: (5.1, 2.0),
}


@dataclass(frozen=True)
class Knobs:
    noise: float = 0.05          # position noise sigma (m)
    distractors: int = 1         # extra vehicles not involved in the scenario
    transform: bool = True       # random global rotation + translation


@dataclass
class _Track:
    xy: np.ndarray               # (T, 2), noise-free
    heading: np.ndarray | None = None
    speed: np.ndarray | None = None


def _duration(rng, cls) -> float:
    mean, sd = DURATIONS[cls]
    return float(np.clip(rng.normal(mean, sd), MIN_DURATION, MAX_DURATION))


def _cosine_step(t, t0, dur, amp):
    """Smooth 0 -> amp transition over [t0, t0 + dur]."""
    u = np.clip((t - t0) / dur, 0.0, 1.0)
    return amp * 0.5 * (1.0 - np.cos(math.pi * u))


def _heading_speed(xy, heading=None):
    vel = np.gradient(xy, DT, axis=0) if len(xy) > 1 else np.zeros_like(xy)
    speed = np.hypot(vel[:, 0], vel[:, 1])
    if heading is None:
        heading = np.zeros(len(xy))
        last = 0.0
        for k in range(len(xy)):
            if speed[k] > 1e-6:
                last = math.atan2(vel[k, 1], vel[k, 0])
            heading[k] = last
        # stationary at the very start: look ahead
        first = np.flatnonzero(speed > 1e-6)
        if first.size:
            heading[: first[0]] = heading[first[0]]
    speed[speed < 1e-9] = 0.0
    return heading, speed


# ---------------------------------------------------------------- maps


def straight_road(x0: float, x1: float):
    """Two parallel lanes split at the midpoint; ids 1-2 right lane, 3-4 left."""
    xm = 0.5 * (x0 + x1)
    lanes = []
    for base, y in ((1, 0.0), (3, LANE_WIDTH)):
        lanes.append(LaneSegment(base, [(x0, y), (xm, y)], (base + 1,), ()))
        lanes.append(LaneSegment(base + 1, [(xm, y), (x1, y)], (), (base,)))
    return lanes


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _arc(center, radius, a0, a1, n=8):
    a = np.linspace(a0, a1, n)
    return np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)])


def _south_connectors():
    """Connectors for traffic entering from the south (heading +y)."""
    s, o = BOX_HALF, LANE_OFFSET
    start = (o, -s)
    right = _arc((s, -s), s - o, math.pi, math.pi / 2)
    left = _arc((-s, -s), s + o, 0.0, math.pi / 2)
    straight = np.array([start, (o, s)])
    return {"right": right, "left": left, "straight": straight}


def intersection(arm: float = 30.0):
    """Four-way crossing of two-lane roads, right-hand traffic.

    Arm k (0 south, 1 east, 2 north, 3 west) has an inbound lane id
    ``100k+1`` and an outbound lane ``100k+2``; connectors from arm k are
    ``100k+10`` (right), ``+11`` (straight) and ``+12`` (left).
    """
    s, o = BOX_HALF, LANE_OFFSET
    tmpl = _south_connectors()
    inbound = np.array([(o, -s - arm), (o, -s)])
    outbound = np.array([(-o, -s), (-o, -s - arm)])
    # arm k is the south arm rotated by k * 90 degrees counter-clockwise
    turn_to = {"right": 1, "straight": 2, "left": 3}
    lanes = []
    for k in range(4):
        r = _rot(k * math.pi / 2)
        in_id, out_id = 100 * k + 1, 100 * k + 2
        conn_ids = {"right": 100 * k + 10, "straight": 100 * k + 11, "left": 100 * k + 12}
        lanes.append(LaneSegment(in_id, inbound @ r.T, tuple(conn_ids.values()), ()))
        feeders = tuple(100 * ((k - d) % 4) + 10 + i for d, i in ((1, 0), (2, 1), (3, 2)))
        lanes.append(LaneSegment(out_id, outbound @ r.T, (), feeders))
        for name, pts in tmpl.items():
            dest = (k + turn_to[name]) % 4
            lanes.append(LaneSegment(conn_ids[name], pts @ r.T, (100 * dest + 2,), (in_id,)))
    return lanes


def _polyline_at(pts, s):
    """Points at arc lengths ``s`` along ``pts`` (clamped, linear beyond ends)."""
    pts = np.asarray(pts, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.r_[0.0, np.cumsum(lens)]
    s = np.asarray(s, dtype=np.float64)
    i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lens) - 1)
    u = (s - cum[i]) / lens[i]
    return pts[i] + u[:, None] * seg[i]


def _path_length(pts):
    d = np.diff(np.asarray(pts, dtype=np.float64), axis=0)
    return float(np.hypot(d[:, 0], d[:, 1]).sum())


# ---------------------------------------------------------------- templates


def _lead(rng):
    return int(round(rng.uniform(1.0, 3.0) / DT)), int(round(rng.uniform(1.0, 3.0) / DT))


def _road_distractors(rng, n, t, ego_x, lanes_y, first_id=10):
    out = {}
    for k in range(n):
        y = lanes_y[int(rng.integers(len(lanes_y)))]
        v = rng.uniform(5.0, 10.0)
        x0 = ego_x[0] + rng.choice([-1.0, 1.0]) * rng.uniform(25.0, 45.0)
        out[first_id + k] = _Track(np.column_stack([x0 + v * t, np.full(len(t), y)]))
    return out


def _cut_in(rng, knobs):
    d = _duration(rng, 1)
    n_in, n_out = _lead(rng)
    n_lab = max(1, int(round(d / DT)))
    t = np.arange(n_in + n_lab + n_out) * DT
    t_a = n_in * DT
    v_e = rng.uniform(6.0, 10.0)
    ego = np.column_stack([v_e * t, np.zeros(len(t))])
    v_a = v_e + rng.uniform(0.5, 2.0)
    gap = rng.uniform(2.0, 8.0)
    ax = gap + v_a * (t - t_a)
    ay = LANE_WIDTH - _cosine_step(t, t_a, n_lab * DT, LANE_WIDTH)
    agents = {1: _Track(np.column_stack([ax, ay]))}
    agents.update(_road_distractors(rng, knobs.distractors, t, ego[:, 0], [LANE_WIDTH]))
    labels = np.zeros(len(t), dtype=int)
    labels[n_in: n_in + n_lab] = 1
    return ego, agents, labels


def _stationary(rng, knobs):
    d = _duration(rng, 2)
    n_in, n_out = _lead(rng)
    n_lab = max(1, int(round(d / DT)))
    n = n_in + n_lab + n_out
    t = np.arange(n) * DT
    t_a, t_b = n_in * DT, (n_in + n_lab) * DT
    v0 = rng.uniform(5.0, 9.0)
    stop_gap = rng.uniform(6.0, 10.0)
    # ego brakes uniformly during the first part of the labeled phase
    t_brake = rng.uniform(0.3, 0.7) * (t_b - t_a)
    brake_len = 0.5 * v0 * t_brake
    x_lead = 0.0
    x_stop = x_lead - stop_gap
    ex = np.empty(n)
    lx = np.empty(n)
    t_dec = t_a  # lead decelerates to 0 over the lead-in
    a_lead = v0 / t_dec
    a_go = 2.0
    for k, tk in enumerate(t):
        # lead vehicle
        if tk < t_a:
            r = t_a - tk
            lx[k] = x_lead - 0.5 * a_lead * r * r
        elif tk <= t_b:
            lx[k] = x_lead
        else:
            r = tk - t_b
            lx[k] = x_lead + 0.5 * a_go * r * r
        # ego
        if tk < t_a:
            ex[k] = x_stop - brake_len - v0 * (t_a - tk)
        elif tk < t_a + t_brake:
            r = tk - t_a
            ex[k] = x_stop - brake_len + v0 * r - 0.5 * (v0 / t_brake) * r * r
        elif tk <= t_b + 1.0:
            ex[k] = x_stop
        else:
            r = tk - t_b - 1.0
            ex[k] = x_stop + 0.5 * a_go * r * r
    ego = np.column_stack([ex, np.zeros(n)])
    lv = np.where(t < t_a, a_lead * (t_a - t), np.where(t <= t_b, 0.0, a_go * (t - t_b)))
    agents = {1: _Track(np.column_stack([lx, np.zeros(n)]), np.zeros(n), lv)}
    agents.update(_road_distractors(rng, knobs.distractors, t, ex, [LANE_WIDTH]))
    labels = np.zeros(n, dtype=int)
    labels[n_in: n_in + n_lab] = 2
    return ego, agents, labels


def _lane_change(rng, knobs, cls):
    d = _duration(rng, cls)
    n_in, n_out = _lead(rng)
    # the thresholded label is a little shorter than the manoeuvre itself
    n_move = max(2, int(round(d / DT)) + 1)
    n = n_in + n_move + n_out
    t = np.arange(n) * DT
    v_e = rng.uniform(6.0, 10.0)
    rightward = cls == 3
    y0, y1 = (LANE_WIDTH, 0.0) if rightward else (0.0, LANE_WIDTH)
    ey = y0 + _cosine_step(t, n_in * DT, n_move * DT, y1 - y0)
    ego = np.column_stack([v_e * t, ey])
    vy = (y1 - y0) * 0.5 * math.pi / (n_move * DT) * np.sin(
        math.pi * np.clip((t - n_in * DT) / (n_move * DT), 0.0, 1.0)
    )
    labels = np.zeros(n, dtype=int)
    moving = np.flatnonzero(np.abs(vy) > LATERAL_SPEED_THRESHOLD)
    if moving.size:
        start = moving[0]
        after = np.flatnonzero(np.abs(vy[start:]) <= LATERAL_SPEED_THRESHOLD)
        end = start + after[0] if after.size else n
        labels[start:end] = cls
    agents = _road_distractors(rng, knobs.distractors, t, ego[:, 0], [0.0, LANE_WIDTH], first_id=1)
    return ego, agents, labels


def _turn(rng, knobs, cls):
    name = {5: "right", 6: "left", 7: "straight"}[cls]
    d = _duration(rng, cls)
    n_in, n_out = _lead(rng)
    s, o, m = BOX_HALF, LANE_OFFSET, ZONE_MARGIN
    conn = _south_connectors()[name]
    exit_dir = {"right": np.array([1.0, 0.0]), "left": np.array([-1.0, 0.0]),
                "straight": np.array([0.0, 1.0])}[name]
    far = 200.0
    path = np.vstack([[(o, -s - far)], conn, [conn[-1] + far * exit_dir]])
    in_zone = m + _path_length(conn) + m
    v = float(np.clip(in_zone / d, 1.5, 15.0))
    n_lab = max(1, int(round(in_zone / v / DT)))
    v = in_zone / (n_lab * DT)
    n = n_in + n_lab + n_out
    t = np.arange(n) * DT
    # arc length from the path start; zone entry is at far - m
    s_arc = (far - m) + v * (t - n_in * DT) + 0.5 * v * DT
    ego = _polyline_at(path, s_arc)
    zone = s + m
    inside = (np.abs(ego[:, 0]) <= zone) & (np.abs(ego[:, 1]) <= zone)
    labels = np.where(inside, cls, 0)
    agents = {}
    for k in range(knobs.distractors):
        # cross traffic on the east-west through lanes
        arm = int(rng.choice([1, 3]))
        r = _rot(arm * math.pi / 2)
        lane = np.array([(o, -s - far), (o, s + far)]) @ r.T
        va = rng.uniform(4.0, 9.0)
        s0 = far - rng.uniform(30.0, 60.0)
        agents[1 + k] = _Track(_polyline_at(lane, s0 + va * t))
    return ego, agents, labels


# ---------------------------------------------------------------- assembly


def generate_synthetic(cls: int, seed: int, knobs: Knobs | None = None) -> Sequence:
    """One labeled 4 Hz sequence of scenario class ``cls`` (1-7)."""
    if cls not in DURATIONS:
        raise ValueError(f"synthetic generator supports classes 1-7, got {cls}")
    knobs = knobs or Knobs()
    rng = np.random.default_rng([int(seed), int(cls)])
    if cls == 1:
        ego, agents, labels = _cut_in(rng, knobs)
    elif cls == 2:
        ego, agents, labels = _stationary(rng, knobs)
    elif cls in (3, 4):
        ego, agents, labels = _lane_change(rng, knobs, cls)
    else:
        ego, agents, labels = _turn(rng, knobs, cls)

    if cls <= 4:
        lo, hi = ego[:, 0].min() - MAP_MARGIN, ego[:, 0].max() + MAP_MARGIN
        lanes = straight_road(math.floor(lo), math.ceil(hi))
    else:
        lanes = intersection(arm=MAP_MARGIN)
    return _finish(f"syn-c{cls}-s{seed}", rng, knobs, ego, agents, labels, lanes)


def _background(rng, knobs):
    n = int(round(rng.uniform(4.0, 8.0) / DT))
    t = np.arange(n) * DT
    v_e = rng.uniform(6.0, 10.0)
    ego = np.column_stack([v_e * t, np.zeros(n)])
    # a lead vehicle keeping its distance, plus the usual traffic
    gap = rng.uniform(15.0, 30.0)
    agents = {1: _Track(np.column_stack([gap + v_e * t, np.zeros(n)]))}
    agents.update(_road_distractors(rng, knobs.distractors, t, ego[:, 0], [0.0, LANE_WIDTH]))
    return ego, agents, np.zeros(n, dtype=int)


def generate_background(seed: int, knobs: Knobs | None = None) -> Sequence:
    """Plain lane following on the straight road; every frame is class 0."""
    knobs = knobs or Knobs()
    rng = np.random.default_rng([int(seed), 0])
    ego, agents, labels = _background(rng, knobs)
    lanes = straight_road(math.floor(ego[0, 0] - MAP_MARGIN), math.ceil(ego[-1, 0] + MAP_MARGIN))
    return _finish(f"syn-c0-s{seed}", rng, knobs, ego, agents, labels, lanes)


def _finish(sid, rng, knobs, ego, agents, labels, lanes) -> Sequence:
    """Add noise, move the whole scene by a random rigid transform, pack frames."""
    theta = rng.uniform(-math.pi, math.pi) if knobs.transform else 0.0
    shift = rng.uniform(-500.0, 500.0, size=2) if knobs.transform else np.zeros(2)
    rot = _rot(theta)

    def place(xy):
        return xy @ rot.T + shift

    ego_phi, ego_v = _heading_speed(ego)
    ego_xy = place(ego + rng.normal(0.0, knobs.noise, ego.shape)) if knobs.noise else place(ego)
    tracks = {}
    for tid, tr in agents.items():
        phi, v = _heading_speed(tr.xy, tr.heading)
        if tr.speed is not None:
            v = tr.speed
        xy = tr.xy + rng.normal(0.0, knobs.noise, tr.xy.shape) if knobs.noise else tr.xy
        tracks[tid] = (place(xy), wrap_angle(phi + theta), v)

    frames = []
    for k in range(len(labels)):
        ag = tuple(
            AgentState(tid, float(xy[k, 0]), float(xy[k, 1]), float(phi[k]), float(v[k]))
            for tid, (xy, phi, v) in sorted(tracks.items())
        )
        pose = EgoPose(float(ego_xy[k, 0]), float(ego_xy[k, 1]),
                       float(wrap_angle(ego_phi[k] + theta)), float(ego_v[k]))
        frames.append(Frame(round(k * DT, 6), pose, ag, int(labels[k])))
    placed = tuple(
        LaneSegment(l.id, place(np.asarray(l.centerline)), l.successor_ids, l.predecessor_ids)
        for l in lanes
    )
    return Sequence(sid, "synthetic", 4, tuple(frames), placed)


def generate_dataset(classes, per_class: int, seed: int, knobs: Knobs | None = None) -> list[Sequence]:
    """``per_class`` sequences of every class, interleaved class by class.

    Class 0 stands for background sequences without any scenario.
    """
    out = []
    for k in range(per_class):
        for cls in classes:
            sub = int(np.random.SeedSequence([int(seed), k]).generate_state(1)[0])
            if cls == 0:
                out.append(generate_background(sub, knobs))
            else:
                out.append(generate_synthetic(cls, sub, knobs))
    return out

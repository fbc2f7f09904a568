"""Spatio-temporal scenario classifier.

Spatial stage, applied to every frame at once on the stacked ``(T*N, C)``
vertex matrix:

    env_encode    two 4-layer GCN stacks over suc / pre, summed, linear
    agent_encode  W2A layer (raw features + env features) then 2 layers over E2A
    fuse          2 layers over E2W on env features; both branches through
                  their own linear layer, summed, final linear

Temporal stage: four dilated convolutions per vertex over time, SELU after
each, then a masked mean over vertices and a linear head to 8 logits.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .scene import RELATIONS, SequenceBatch, normalize_relation, relation_anchors
from .tensor import SparseRelation, Tensor

N_CLASSES = 8
N_FEATURES = 4
HIDDEN = 128
ENV_CHANNELS = (16, 64, 128, 128)
# (in, out, kernel, dilation, pad)
TEMPORAL_LAYERS = ((HIDDEN, 16, 3, 1, 1), (16, 16, 3, 2, 2), (16, 16, 3, 4, 4), (16, 16, 7, 1, 3))
RECEPTIVE_FIELD = 1 + sum((k - 1) * d for _, _, k, d, _ in TEMPORAL_LAYERS)

CHECKPOINT_FORMAT = "scenariogcn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    use_map: bool = True
    residual: bool = False
    weighted_adjacency: bool = False
    baseline: bool = False
    temporal: bool = True

    def __post_init__(self):
        if self.baseline and self.residual:
            raise ValueError("baseline model has no blocks to wrap with residual connections")
        if self.baseline and not self.use_map:
            raise ValueError("baseline model runs over all vertices and needs map data")


@dataclass
class ModelParams:
    config: ModelConfig
    seed: int
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray


# ---------------------------------------------------------------- parameters


def _gcn_specs(prefix, chain):
    out = []
    for i, (a, b) in enumerate(zip(chain[:-1], chain[1:])):
        out += [
            (f"{prefix}.gcn{i}.w", (a, b), "glorot"),
            (f"{prefix}.ln{i}.g", (b,), "ones"),
            (f"{prefix}.ln{i}.b", (b,), "zeros"),
        ]
    return out


def _linear_specs(prefix, a, b):
    return [(f"{prefix}.w", (a, b), "glorot"), (f"{prefix}.b", (b,), "zeros")]


def param_specs(config: ModelConfig):
    """Ordered ``(name, shape, init)`` triples for a configuration."""
    specs = []
    env_chain = (N_FEATURES,) + ENV_CHANNELS
    if config.baseline:
        specs += _gcn_specs("baseline", env_chain) + _linear_specs("baseline.fc", HIDDEN, HIDDEN)
    else:
        if config.use_map:
            for name in ("env_suc", "env_pre"):
                specs += _gcn_specs(name, env_chain) + _linear_specs(f"{name}.fc", HIDDEN, HIDDEN)
            specs += _linear_specs("env_merge", HIDDEN, HIDDEN)
        specs += [
            ("agent_w2a.w", (N_FEATURES, HIDDEN), "glorot"),
            ("agent_w2a.ln.g", (HIDDEN,), "ones"),
            ("agent_w2a.ln.b", (HIDDEN,), "zeros"),
        ]
        specs += _gcn_specs("agent_e2a", (HIDDEN, HIDDEN, HIDDEN))
        if config.use_map:
            specs += _gcn_specs("fusion_e2w", (HIDDEN, HIDDEN, HIDDEN))
            specs += _linear_specs("branch_env", HIDDEN, HIDDEN)
        specs += _linear_specs("branch_agent", HIDDEN, HIDDEN)
        specs += _linear_specs("final", HIDDEN, HIDDEN)
    if config.temporal:
        for i, (cin, cout, k, _, _) in enumerate(TEMPORAL_LAYERS):
            specs += [(f"tcn{i}.w", (cout, cin, k), "glorot"), (f"tcn{i}.b", (cout,), "zeros")]
        head_in = TEMPORAL_LAYERS[-1][1]
    else:
        head_in = HIDDEN
    specs += _linear_specs("cls", head_in, N_CLASSES)
    return specs


def glorot_limit(shape) -> float:
    if len(shape) == 3:
        cout, cin, k = shape
        fan_in, fan_out = cin * k, cout * k
    else:
        fan_in, fan_out = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(seed: int, config: ModelConfig | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind in param_specs(config):
        if kind == "glorot":
            lim = glorot_limit(shape)
            data = rng.uniform(-lim, lim, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, int(seed), tensors)


# ---------------------------------------------------------------- graph inputs


@dataclass
class GraphInputs:
    """Constant per-sequence inputs, rows stacked frame-major (``t*N + i``)."""

    x: np.ndarray
    n_vertices: int
    n_frames: int
    valid: np.ndarray
    waypoint_rows: np.ndarray
    mask: np.ndarray
    relations: dict
    # rows touched by a relation and the relation renumbered onto them
    active: dict = field(default_factory=dict)
    sub: dict = field(default_factory=dict)


def _stack(batch: SequenceBatch, name: str, drop=False) -> SparseRelation:
    n, t_len = batch.n_vertices, batch.n_frames
    frames = batch.edges[name]
    if drop:
        return SparseRelation.empty(n * t_len, undirected=frames[0].undirected)
    src = np.concatenate([r.src + t * n for t, r in enumerate(frames)])
    dst = np.concatenate([r.dst + t * n for t, r in enumerate(frames)])
    w = np.concatenate([r.weight for r in frames])
    return SparseRelation(n * t_len, src, dst, w, undirected=frames[0].undirected)


def _merge(rels) -> SparseRelation:
    n = rels[0].n_vertices
    src = np.concatenate([r.src for r in rels])
    dst = np.concatenate([r.dst for r in rels])
    w = np.concatenate([r.weight for r in rels])
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    keep = lo != hi
    key = lo[keep] * n + hi[keep]
    uniq, inv = np.unique(key, return_inverse=True)
    wm = np.zeros(len(uniq))
    np.maximum.at(wm, inv, w[keep])
    return SparseRelation(n, uniq // n, uniq % n, wm, undirected=True)


def prepare_inputs(batch: SequenceBatch, config: ModelConfig) -> GraphInputs:
    """Stack frames and normalize the relations the configuration uses.

    Results are cached on the batch, keyed by the parts of the config that
    change the graph.
    """
    key = ("inputs", config.use_map, config.baseline)
    if key in batch.cache:
        return batch.cache[key]
    n, t_len = batch.n_vertices, batch.n_frames
    na, nw = batch.n_agents, batch.n_waypoints
    is_wp = np.zeros(n, dtype=bool)
    is_wp[1 + na:] = True
    mask = batch.mask.copy()
    if not config.use_map:
        mask[is_wp] = False
    valid = mask.T.reshape(-1)
    x = batch.features.transpose(2, 0, 1).reshape(t_len * n, N_FEATURES)
    x = x * valid[:, None]

    def anchors(name):
        return np.tile(relation_anchors(name, na, nw), t_len) & valid

    rels = {}
    if config.baseline:
        merged = _merge([_stack(batch, k) for k in RELATIONS])
        rels["merged"] = normalize_relation(merged, anchors("merged"))
    else:
        names = RELATIONS if config.use_map else ("W2A", "E2A")
        for k in names:
            raw = _stack(batch, k, drop=(k == "W2A" and not config.use_map))
            rels[k] = normalize_relation(raw, anchors(k))
    out = GraphInputs(x, n, t_len, valid, np.tile(is_wp, t_len), mask, rels)
    for k in ("E2A", "E2W"):
        if k in rels:
            rows = np.flatnonzero(rels[k].incident())
            out.active[k] = rows
            out.sub[k] = rels[k].subgraph(rows)
    batch.cache[key] = out
    return out


# ---------------------------------------------------------------- forward


def _gcn(p: ModelParams, prefix: str, i: int, rel, h):
    z = tn.propagate(rel, tn.matmul(h, p[f"{prefix}.gcn{i}.w"]))
    return tn.relu(tn.layer_norm(z, p[f"{prefix}.ln{i}.g"], p[f"{prefix}.ln{i}.b"]))


def _linear(p, prefix, h):
    return tn.linear(h, p[f"{prefix}.w"], p[f"{prefix}.b"])


def env_encode(params: ModelParams, inp: GraphInputs) -> Tensor:
    """Waypoint features from the successor and predecessor stacks."""
    if not params.config.use_map:
        raise ValueError("env_encode needs use_map=True")
    wp = inp.waypoint_rows[:, None]
    xw = Tensor(inp.x * wp)
    total = None
    for name in ("suc", "pre"):
        prefix = f"env_{name}"
        h = xw
        skip = None
        for i in range(len(ENV_CHANNELS)):
            h = _gcn(params, prefix, i, inp.relations[name], h)
            if i == len(ENV_CHANNELS) - 2:
                skip = h
        h = _linear(params, f"{prefix}.fc", h)
        if params.config.residual:
            h = h + skip
        total = h if total is None else total + h
    return tn.scale(_linear(params, "env_merge", total), wp)


class Rows:
    """A ``(n, F)`` feature map stored as rows ``idx`` plus one shared ``fill`` row.

    A GCN block leaves every vertex its relation does not touch at
    ``relu(ln_bias)`` of its last layer, so only the touched rows are computed.
    """

    def __init__(self, part: Tensor, idx: np.ndarray, n: int, fill: Tensor):
        self.part, self.idx, self.n, self.fill = part, idx, n, fill

    def linear(self, w: Tensor, b: Tensor) -> "Rows":
        f = self.fill.shape[0]
        fill = tn.reshape(tn.linear(tn.reshape(self.fill, (1, f)), w, b), (w.shape[1],))
        return Rows(tn.linear(self.part, w, b), self.idx, self.n, fill)

    def full(self) -> Tensor:
        return tn.embed_rows(self.part, self.idx, self.n, self.fill)


def _dense_rows(h: Tensor) -> Rows:
    n, f = h.shape
    return Rows(h, np.arange(n), n, Tensor(np.zeros(f)))


def _gcn_block_rows(p: ModelParams, prefix: str, n_layers: int, inp: GraphInputs, name: str, h: Tensor) -> Rows:
    """GCN layers over relation ``name`` restricted to the rows it touches.

    ``h`` already holds only those rows.
    """
    for i in range(n_layers):
        h = _gcn(p, prefix, i, inp.sub[name], h)
    fill = tn.relu(p[f"{prefix}.ln{n_layers - 1}.b"])
    return Rows(h, inp.active[name], len(inp.x), fill)


def _agent_rows(params: ModelParams, env: Tensor | None, inp: GraphInputs) -> Rows:
    h0 = tn.matmul(Tensor(inp.x), params["agent_w2a.w"])
    if env is not None:
        h0 = h0 + env
    z = tn.propagate(inp.relations["W2A"], h0)
    g, b = params["agent_w2a.ln.g"], params["agent_w2a.ln.b"]
    if params.config.residual:
        # the skip term is non-constant on waypoints next to agents: run densely
        first = tn.relu(tn.layer_norm(z, g, b))
        h = first
        for i in range(2):
            h = _gcn(params, "agent_e2a", i, inp.relations["E2A"], h)
        return _dense_rows(h + first)
    first = tn.relu(tn.layer_norm(tn.take_rows(z, inp.active["E2A"]), g, b))
    return _gcn_block_rows(params, "agent_e2a", 2, inp, "E2A", first)


def agent_encode(params: ModelParams, env: Tensor | None, inp: GraphInputs) -> Tensor:
    """W2A update of the agents, then two GCN layers over E2A."""
    return _agent_rows(params, env, inp).full()


def _fusion_rows(params: ModelParams, env: Tensor, inp: GraphInputs) -> Rows:
    if params.config.residual:
        f = env
        for i in range(2):
            f = _gcn(params, "fusion_e2w", i, inp.relations["E2W"], f)
        return _dense_rows(f + env)
    return _gcn_block_rows(params, "fusion_e2w", 2, inp, "E2W", tn.take_rows(env, inp.active["E2W"]))


def fuse(params: ModelParams, env: Tensor | None, agent, inp: GraphInputs) -> Tensor:
    """Combine the agent branch with the ego-to-environment branch.

    ``agent`` is the agent-branch output, full or as ``Rows``.
    """
    if not isinstance(agent, Rows):
        agent = _dense_rows(agent)
    p = params
    merged = agent.linear(p["branch_agent.w"], p["branch_agent.b"]).full()
    if params.config.use_map:
        f = _fusion_rows(params, env, inp)
        merged = merged + f.linear(p["branch_env.w"], p["branch_env.b"]).full()
    out = _linear(params, "final", merged)
    return tn.scale(out, inp.valid[:, None])


def baseline_encode(params: ModelParams, inp: GraphInputs) -> Tensor:
    """Single GCN stack over the union of all relations."""
    h = Tensor(inp.x)
    for i in range(len(ENV_CHANNELS)):
        h = _gcn(params, "baseline", i, inp.relations["merged"], h)
    h = _linear(params, "baseline.fc", h)
    return tn.scale(h, inp.valid[:, None])


def spatial_encode(params: ModelParams, inp: GraphInputs) -> Tensor:
    """``(T*N, 128)`` spatial encoding of every vertex in every frame."""
    if params.config.baseline:
        return baseline_encode(params, inp)
    env = env_encode(params, inp) if params.config.use_map else None
    return fuse(params, env, _agent_rows(params, env, inp), inp)


def to_vertex_major(spatial: Tensor, n_vertices: int, n_frames: int) -> Tensor:
    """``(T*N, F)`` frame-major rows to ``(N, F, T)``."""
    f = spatial.shape[1]
    return tn.transpose(tn.reshape(spatial, (n_frames, n_vertices, f)), (1, 2, 0))


def temporal_forward(params: ModelParams, spatial: Tensor, mask: np.ndarray) -> Tensor:
    """Per-vertex dilated convolutions over time: ``(N, 128, T) -> (N, 16, T)``.

    Masked positions are zeroed before and after every layer.
    """
    m = np.asarray(mask, dtype=np.float64)[:, None, :]
    h = tn.scale(spatial, m)
    for i, (_, _, _, dil, pad) in enumerate(TEMPORAL_LAYERS):
        h = tn.conv1d_dilated(h, params[f"tcn{i}.w"], dil, pad, params[f"tcn{i}.b"])
        h = tn.scale(tn.selu(h), m)
    return h


def pool_vertices(h: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean over vertices: ``(N, F, T) -> (T, F)``."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=0)
    if np.any(counts == 0):
        raise ValueError(f"frame(s) {np.flatnonzero(counts == 0).tolist()} have no valid vertex")
    w = mask / counts[None, :]
    pooled = tn.sum_axis(tn.scale(h, w[:, None, :]), 0)
    return tn.transpose(pooled, (1, 0))


def head_logits(params: ModelParams, h: Tensor, mask: np.ndarray) -> Tensor:
    return _linear(params, "cls", pool_vertices(h, mask))


def classify(params: ModelParams, h: Tensor, mask: np.ndarray) -> Prediction:
    with tn.no_grad():
        logits = head_logits(params, h, mask).data
    return prediction_from_logits(logits)


def prediction_from_logits(logits: np.ndarray) -> Prediction:
    probs = tn.softmax(logits)
    return Prediction(logits, probs, probs.argmax(axis=1))


def forward_logits(params: ModelParams, inp: GraphInputs) -> Tensor:
    """Differentiable ``(T, 8)`` logits for one prepared sequence."""
    s = to_vertex_major(spatial_encode(params, inp), inp.n_vertices, inp.n_frames)
    if params.config.temporal:
        s = temporal_forward(params, s, inp.mask)
    return head_logits(params, s, inp.mask)


def model_forward(params: ModelParams, batch: SequenceBatch) -> Prediction:
    inp = prepare_inputs(batch, params.config)
    with tn.no_grad():
        logits = forward_logits(params, inp).data
    return prediction_from_logits(logits)


# ---------------------------------------------------------------- checkpoints


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_dict(params: ModelParams, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": params.seed,
        "config": asdict(params.config),
        "params": [
            {"name": k, "shape": list(t.shape), "data": _encode(t.data)} for k, t in params
        ],
        "extra": extra or {},
    }


def save_checkpoint(params: ModelParams, path, extra: dict | None = None):
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(params, extra), fh, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig(**doc["config"])
    expected = {name: tuple(shape) for name, shape, _ in param_specs(config)}
    tensors = {}
    for entry in doc["params"]:
        shape = tuple(entry["shape"])
        if expected.get(entry["name"]) != shape:
            raise ValueError(f"{path}: unexpected parameter {entry['name']} {shape}")
        tensors[entry["name"]] = Tensor(_decode(entry["data"], shape), requires_grad=True)
    if set(tensors) != set(expected):
        raise ValueError(f"{path}: missing parameters {sorted(set(expected) - set(tensors))}")
    return ModelParams(config, int(doc["seed"]), tensors)

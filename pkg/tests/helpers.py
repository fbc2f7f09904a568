"""Shared oracles for the test suite."""
import numpy as np

from scenariogcn import tensor as tn
from scenariogcn.tensor import Tensor

H = 1e-5


def rel_error(a, n, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor), initial=0.0))


def numeric_grad(f, arr, h=H, index=None):
    """Central differences of scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    idx = np.ndindex(arr.shape) if index is None else index
    for i in idx:
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op(op, arrays, seed=0):
    """Max relative error between tape gradients and finite differences.

    ``op`` maps input tensors to an output tensor; the scalar loss is a fixed
    random projection of that output so every output entry matters.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = rng.normal(size=out.shape)
    loss = tn.sum(tn.scale(out, proj))
    tn.backward(loss)
    worst = 0.0
    for t in tensors:
        def f(t=t):
            with tn.no_grad():
                return float(np.sum(op(*tensors).data * proj))
        worst = max(worst, rel_error(t.grad, numeric_grad(f, t.data)))
    return worst


def dense_normalize(a, anchors=()):
    """Brute-force ``D^-1/2 (A + I_incident) D^-1/2`` on a dense matrix."""
    a = np.array(a, dtype=np.float64)
    n = len(a)
    keep = (a != 0).any(axis=0) | (a != 0).any(axis=1)
    for i in np.atleast_1d(np.asarray(anchors, dtype=np.int64)) if len(anchors) else []:
        keep[i] = True
    at = a + np.diag(keep.astype(float))
    deg = 0.5 * (at.sum(axis=0) + at.sum(axis=1))
    out = np.zeros_like(at)
    for i in range(n):
        for j in range(n):
            if at[i, j] != 0:
                out[i, j] = at[i, j] / np.sqrt(deg[i] * deg[j])
    return out


def tiny_batch(seed=0, n_frames=3, weighted=False):
    """Ego, two agents and two waypoints over ``n_frames`` frames (5 vertices)."""
    from scenariogcn.lanes import LaneGraph, LaneSegment
    from scenariogcn.scene import AgentState, EgoPose, assemble_sequence, build_scene_graph

    rng = np.random.default_rng(seed)
    lane = LaneGraph.from_segments([LaneSegment(1, [(0.0, 0.0), (3.0, 0.0)])])
    frames = []
    for t in range(n_frames):
        pose = EgoPose(*rng.uniform(-2, 2, 2), rng.uniform(-0.3, 0.3), rng.uniform(1, 5))
        agents = [AgentState(k, *rng.uniform(-8, 8, 2), rng.uniform(-1, 1), rng.uniform(0, 6)) for k in (1, 2)]
        frames.append(build_scene_graph(pose, agents, lane, weighted=weighted))
    labels = rng.integers(0, 8, n_frames)
    return assemble_sequence(frames, labels)


def perturb_params(params, seed=0, scale=0.3):
    """Move every parameter off its initial value (biases away from ReLU kinks)."""
    rng = np.random.default_rng(seed)
    for _, t in params:
        t.data = t.data + scale * rng.normal(size=t.shape)
    return params


def model_gradcheck(params, batch, samples_per_tensor=3, seed=0):
    """Worst relative error over sampled entries and one random direction per tensor."""
    from scenariogcn.model import forward_logits, prepare_inputs
    from scenariogcn.training import compute_class_weights, weighted_cross_entropy

    rng = np.random.default_rng(seed)
    inp = prepare_inputs(batch, params.config)
    weights = compute_class_weights(np.bincount(batch.labels, minlength=8) + 1)

    def loss_value():
        with tn.no_grad():
            return float(weighted_cross_entropy(forward_logits(params, inp), batch.labels, weights).data)

    params.zero_grad()
    tn.backward(weighted_cross_entropy(forward_logits(params, inp), batch.labels, weights))
    worst = {}
    for name, t in params:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = rng.choice(t.size, size=min(samples_per_tensor, t.size), replace=False)
        idx = [np.unravel_index(i, t.shape) for i in flat]
        num = numeric_grad(loss_value, t.data, index=idx)
        # loss is O(1) and evaluated at h=1e-5, so differences below ~1e-10 are roundoff
        err = rel_error([analytic[i] for i in idx], [num[i] for i in idx], floor=1e-4)
        # directional derivative along a random unit direction
        d = rng.normal(size=t.shape)
        d /= np.linalg.norm(d)
        base = t.data.copy()
        t.data[...] = base + H * d
        fp = loss_value()
        t.data[...] = base - H * d
        fm = loss_value()
        t.data[...] = base
        err = max(err, rel_error(np.sum(analytic * d), (fp - fm) / (2 * H), floor=1e-4))
        worst[name] = err
    return worst


def dense_spatial_encode(params, inp):
    """Reference spatial encoder: every block runs on every row."""
    from scenariogcn.model import _gcn, _linear, baseline_encode, env_encode

    cfg = params.config
    if cfg.baseline:
        return baseline_encode(params, inp)
    env = env_encode(params, inp) if cfg.use_map else None
    h0 = tn.matmul(Tensor(inp.x), params["agent_w2a.w"])
    if env is not None:
        h0 = h0 + env
    z = tn.propagate(inp.relations["W2A"], h0)
    first = tn.relu(tn.layer_norm(z, params["agent_w2a.ln.g"], params["agent_w2a.ln.b"]))
    h = first
    for i in range(2):
        h = _gcn(params, "agent_e2a", i, inp.relations["E2A"], h)
    if cfg.residual:
        h = h + first
    merged = _linear(params, "branch_agent", h)
    if cfg.use_map:
        f = env
        for i in range(2):
            f = _gcn(params, "fusion_e2w", i, inp.relations["E2W"], f)
        if cfg.residual:
            f = f + env
        merged = merged + _linear(params, "branch_env", f)
    return tn.scale(_linear(params, "final", merged), inp.valid[:, None])

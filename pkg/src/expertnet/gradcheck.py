"""Central finite-difference verification of every analytic backward.

Each check builds float64 inputs at a generic (tie-free) point, computes
the analytic gradient once, then sweeps every scalar coordinate with
(f(x + eps) - f(x - eps)) / (2 eps) and reports the worst relative error
|analytic - numeric| / max(1e-8, |analytic| + |numeric|).
"""

from dataclasses import dataclass

import numpy as np

from . import ops, presets
from .errors import NumericError
from .model import build_network, parse_config
from .tensor import SeededRng

DEFAULT_EPS = 1e-5
OP_THRESHOLD = 1e-4
NETWORK_THRESHOLD = 1e-3
_RESAMPLE_TRIES = 200


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float
    worst: str = ""

    @property
    def passed(self):
        return self.max_rel_err < self.threshold


def relative_errors(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def numeric_gradient(f, arr, eps):
    """Finite-difference gradient of scalar f() w.r.t. every element of arr.

    arr is perturbed in place and restored; f must read it afresh on every
    call.
    """
    flat = arr.reshape(-1)
    grad = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = f()
        flat[i] = saved - eps
        lo = f()
        flat[i] = saved
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss while probing coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(arr.shape)


def _compare(name, threshold, loss_fn, labeled, eps):
    """labeled: (label, array to perturb, analytic gradient) triples."""
    worst_err = 0.0
    worst_desc = ""
    for label, arr, analytic in labeled:
        numeric = numeric_gradient(loss_fn, arr, eps)
        rel = relative_errors(analytic, numeric)
        idx = int(np.argmax(rel))
        if rel.flat[idx] >= worst_err:
            worst_err = float(rel.flat[idx])
            worst_desc = (f"{label}[{idx}]: analytic={analytic.flat[idx]:.6e} "
                          f"numeric={numeric.flat[idx]:.6e}")
    return CheckResult(name, worst_err, threshold, worst_desc)


def check_conv2d(seed=0, eps=None, stride=1):
    eps = DEFAULT_EPS if eps is None else eps
    rng = SeededRng(seed * 31 + stride)
    x = rng.normal(1 * 2 * 6 * 6).reshape(1, 2, 6, 6)
    weights = rng.normal(3 * 2 * 3 * 3).reshape(3, 2, 3, 3) * 0.5
    bias = rng.normal(3)
    params = ops.ConvParams(weights, bias, stride=stride)
    out = ops.conv2d(x, params)
    upstream = rng.normal(out.size).reshape(out.shape)

    def loss():
        return float((ops.conv2d(x, params) * upstream).sum())

    bundle = ops.conv2d_backward(x, params, upstream)
    return _compare(f"conv2d[stride{stride}]", OP_THRESHOLD, loss,
                    [("input", x, bundle.inputs[0]),
                     ("weights", weights, bundle.params[0]),
                     ("bias", bias, bundle.params[1])], eps)


def check_relu(seed=0, eps=None):
    eps = DEFAULT_EPS if eps is None else eps
    rng = SeededRng(seed + 7)
    for _ in range(_RESAMPLE_TRIES):
        x = rng.normal(2 * 3 * 5 * 5).reshape(2, 3, 5, 5)
        if np.abs(x).min() > 10 * eps:  # keep the kink at 0 out of reach
            break
    upstream = rng.normal(x.size).reshape(x.shape)

    def loss():
        return float((ops.relu(x) * upstream).sum())

    analytic = ops.relu_backward(x, upstream)
    return _compare("relu", OP_THRESHOLD, loss, [("input", x, analytic)], eps)


def _generic_branches(rng, shape, gap):
    """Four branch tensors with no max/min/argmin tie anywhere near gap."""
    count = int(np.prod(shape))
    for _ in range(_RESAMPLE_TRIES):
        stack = rng.normal(4 * count).reshape((4,) + tuple(shape)) * 2.0
        flat = stack.reshape(4, -1)
        ordered = np.sort(flat, axis=0)
        if np.diff(ordered, axis=0).min() <= gap:
            continue  # branch values too close: max/min/argmin unstable
        mid = 0.5 * (ordered[-1] + ordered[0])
        dist = np.sort(np.abs(mid[None] - flat), axis=0)
        if dist[0].min() > gap and (dist[1] - dist[0]).min() > gap:
            return [stack[k] for k in range(4)]
    raise NumericError("could not find a tie-free elective sample")


def check_elective(seed=0, eps=None, mode="literal"):
    eps = DEFAULT_EPS if eps is None else eps
    rng = SeededRng(seed + 11)
    branches = _generic_branches(rng, (1, 2, 4, 4), 10 * eps)
    upstream = rng.normal(branches[0].size).reshape(branches[0].shape)

    def loss():
        return float((ops.elective_fuse(branches, mode) * upstream).sum())

    bundle = ops.elective_backward(branches, upstream, mode)
    labeled = [(f"branch{k}", branches[k], bundle.inputs[k]) for k in range(4)]
    return _compare(f"elective[{mode}]", OP_THRESHOLD, loss, labeled, eps)


def check_additive(seed=0, eps=None):
    # The op is linear, so central differences are exact at any step; a
    # large step leaves rounding noise far below the 1e-12 ceiling.
    eps = 0.1 if eps is None else eps
    rng = SeededRng(seed + 13)
    a = rng.normal(2 * 3 * 4 * 4).reshape(2, 3, 4, 4)
    b = rng.normal(a.size).reshape(a.shape)
    upstream = rng.normal(a.size).reshape(a.shape)

    def loss():
        return float((ops.additive(a, b) * upstream).sum())

    bundle = ops.additive_backward(upstream)
    return _compare("additive", OP_THRESHOLD, loss,
                    [("a", a, bundle.inputs[0]), ("b", b, bundle.inputs[1])], eps)


def check_fc(seed=0, eps=None, activation="relu"):
    eps = DEFAULT_EPS if eps is None else eps
    rng = SeededRng(seed + 17)
    weights = rng.normal(5 * 9).reshape(5, 9) * 0.7
    bias = rng.normal(5) * 0.1
    params = ops.FcParams(weights, bias)
    for _ in range(_RESAMPLE_TRIES):
        z = rng.normal(9)
        pre = ops.fc_forward(z, params, "identity")
        if activation != "relu" or np.abs(pre).min() > 10 * eps:
            break
    upstream = rng.normal(5)

    def loss():
        return float((ops.fc_forward(z, params, activation) * upstream).sum())

    out = ops.fc_forward(z, params, activation)
    bundle = ops.fc_backward(z, params, upstream, activation, out=out)
    return _compare(f"fc[{activation}]", OP_THRESHOLD, loss,
                    [("z", z, bundle.inputs[0]),
                     ("weights", weights, bundle.params[0]),
                     ("bias", bias, bundle.params[1])], eps)


def check_softmax_xent(seed=0, eps=None):
    eps = DEFAULT_EPS if eps is None else eps
    rng = SeededRng(seed + 19)
    logits = rng.normal(7) * 2.0
    label = 3

    def loss():
        return ops.softmax_xent(logits, label)[0]

    _, analytic = ops.softmax_xent(logits, label)
    return _compare("softmax_xent", OP_THRESHOLD, loss,
                    [("logits", logits, analytic)], eps)


def check_network(seed=0, eps=None, coords=50, config_text=None):
    """Spot-check a composed desk-scale network, end to end.

    Samples parameter coordinates across all layers and compares the
    reverse-mode gradient of the mean cross-entropy against central
    differences of two full forward passes each.
    """
    # The composed net has thousands of relu and elective kinks; a small
    # step makes the 10 eps tie margin reachable by input resampling.
    eps = 1e-6 if eps is None else eps
    config = parse_config(config_text) if config_text else presets.desk_config()
    net = build_network(config, rng=SeededRng(seed + 23), dtype=np.float64)
    rng = SeededRng(seed + 29)
    batch = 2
    labels = np.array([k % config.num_classes for k in range(batch)])
    size = batch * config.in_c * config.in_h * config.in_w
    x = stats = None
    for _ in range(_RESAMPLE_TRIES):
        x = 0.5 + 0.25 * rng.normal(size).reshape(
            batch, config.in_c, config.in_h, config.in_w)
        stats = {}
        logits, tape = net.forward_tape(x, stats=stats)
        if stats["min_kink_margin"] > 10 * eps:  # no kink within reach
            break
    loss0, grad_logits = ops.softmax_xent_batch(logits, labels)
    analytic = net.backward(tape, grad_logits)
    params = net.parameters()

    def loss():
        lg, _ = net.forward(x)
        return ops.softmax_xent_batch(lg, labels)[0]

    total = sum(p.size for p in params)
    worst_err, worst_desc = 0.0, ""
    for _ in range(coords):
        pick = rng.integer(total)
        arr_idx = 0
        while pick >= params[arr_idx].size:
            pick -= params[arr_idx].size
            arr_idx += 1
        arr = params[arr_idx].reshape(-1)
        saved = arr[pick]
        arr[pick] = saved + eps
        hi = loss()
        arr[pick] = saved - eps
        lo = loss()
        arr[pick] = saved
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("non-finite loss during network gradcheck")
        numeric = (hi - lo) / (2.0 * eps)
        a = float(analytic[arr_idx].flat[pick])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if rel >= worst_err:
            worst_err = rel
            worst_desc = (f"param{arr_idx}[{pick}]: analytic={a:.6e} "
                          f"numeric={numeric:.6e}")
    return CheckResult("network", worst_err, NETWORK_THRESHOLD, worst_desc)


CHECK_GROUPS = {
    "conv2d": lambda seed, eps: [check_conv2d(seed, eps, 1),
                                 check_conv2d(seed, eps, 2)],
    "relu": lambda seed, eps: [check_relu(seed, eps)],
    "elective": lambda seed, eps: [check_elective(seed, eps, "literal"),
                                   check_elective(seed, eps, "nearest")],
    "additive": lambda seed, eps: [check_additive(seed, eps)],
    "fc": lambda seed, eps: [check_fc(seed, eps, "identity"),
                             check_fc(seed, eps, "relu")],
    "softmax_xent": lambda seed, eps: [check_softmax_xent(seed, eps)],
    "network": lambda seed, eps: [check_network(seed, eps)],
}


def run_gradcheck(seed=0, op=None, eps=None):
    """Run one named check group, or all of them; returns CheckResults."""
    if op is not None:
        if op not in CHECK_GROUPS:
            raise ValueError(f"unknown op {op!r}; choose from "
                             f"{', '.join(sorted(CHECK_GROUPS))}")
        return CHECK_GROUPS[op](seed, eps)
    results = []
    for name in CHECK_GROUPS:
        results.extend(CHECK_GROUPS[name](seed, eps))
    return results

"""Finite-difference verification of every analytic gradient.

Each registered check builds a small float64 problem, computes gradients
through the graph, and compares them against central differences with
step h = 1e-5.  The relative error uses max(|analytic|, |numeric|, 1) as
the denominator so tiny gradients do not blow up the ratio.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from . import layers
from .autograd import Tensor
from .model import SampleRnn, TierConfig

H_STEP = 1e-5
TOLERANCE = 1e-4


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, h: float = H_STEP) -> np.ndarray:
    """Central-difference gradient of the scalar f() wrt every element of
    ``param``; f is re-run twice per element."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f().data)
        flat[i] = orig - h
        lo = float(f().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(f: Callable[[], Tensor], params: list[Tensor], h: float = H_STEP) -> float:
    """Worst-case relative disagreement between graph and numeric gradients."""
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(f, p, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _relu_kink_gap(f: Callable[[], Tensor]) -> float:
    """Smallest |input| seen by any relu while evaluating f().

    Central differences are invalid within ~h of a relu kink, so checks on
    relu-bearing graphs redraw instances whose forward pass samples one.
    Rejection happens before any gradient comparison and therefore cannot
    hide a systematically wrong backward rule.
    """
    gaps = [np.inf]
    original = ag.relu

    def spy(t):
        if t.data.size:
            gaps.append(float(np.abs(t.data).min()))
        return original(t)

    ag.relu = spy
    try:
        with ag.no_grad():
            f()
    finally:
        ag.relu = original
    return min(gaps)


_KINK_GAP = 1e-3
_KINK_TRIES = 64


def _check_matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 5)
    return max_relative_error(lambda: ag.matmul(a, b).sum(), [a, b])


def _check_pointwise(rng):
    a, b = _t(rng, 2, 5), _t(rng, 5)  # broadcast over the leading axis
    def f():
        y = ag.tanh(a * b + a) + ag.sigmoid(b - a)
        return (y * y).sum()
    return max_relative_error(f, [a, b])


def _check_relu(rng):
    a = _t(rng, 4, 4)
    # keep inputs away from the kink where the derivative jumps
    a.data[np.abs(a.data) < 0.05] += 0.1
    return max_relative_error(lambda: ag.relu(a).sum(), [a])


def _check_exp_log_sqrt(rng):
    a = _t(rng, 3, 3)
    a.data = np.abs(a.data) + 0.5
    return max_relative_error(lambda: (ag.log(a) + ag.sqrt(a) + ag.exp(-a)).sum(), [a])


def _check_softmax_ce(rng):
    logits = _t(rng, 6, 5)
    targets = rng.integers(0, 5, size=6)
    weights = rng.random(6)
    weights[0] = 0.0
    return max_relative_error(
        lambda: ag.softmax_cross_entropy(logits, targets, weights), [logits]
    )


def _check_weight_norm(rng):
    layer = layers.WeightNormLinear(rng, 4, 3, dtype=np.float64)
    x = _t(rng, 5, 4)
    params = [layer.v, layer.g, layer.b, x]
    return max_relative_error(lambda: (layer(x) * layer(x)).sum(), params)


def _check_embedding(rng):
    table = _t(rng, 7, 3)
    idx = rng.integers(0, 7, size=(4, 5))
    return max_relative_error(
        lambda: (ag.embedding_lookup(table, idx) * 0.3 + 1.0).sum(), [table]
    )


def _check_gru(rng):
    cell = layers.GruCell(rng, 3, 4, dtype=np.float64)
    x, h = _t(rng, 2, 3), _t(rng, 2, 4)
    params = [cell.wx, cell.wh, cell.b, x, h]

    def f():
        hn = cell.step(x, h)
        return (hn * hn).sum()

    return max_relative_error(f, params)


def _check_lstm(rng):
    cell = layers.LstmCell(rng, 3, 4, dtype=np.float64)
    x, h, c = _t(rng, 2, 3), _t(rng, 2, 4), _t(rng, 2, 4)
    params = [cell.wx, cell.wh, cell.b, x, h, c]

    def f():
        hn, cn = cell.step(x, h, c)
        return (hn * hn).sum() + (cn * ag.tanh(cn)).sum()

    return max_relative_error(f, params)


def _check_mlp(rng):
    for _ in range(_KINK_TRIES):
        mlp = layers.Mlp(rng, 4, 6, 3, dtype=np.float64)
        x = _t(rng, 5, 4)
        f = lambda: (mlp(x) * mlp(x)).sum()
        if _relu_kink_gap(f) >= _KINK_GAP:
            break
    params = list(mlp.parameters().values()) + [x]
    return max_relative_error(f, params)


def _check_upsample(rng):
    layer = layers.WeightNormLinear(rng, 4, 3 * 4, dtype=np.float64)
    h = _t(rng, 2, 4)
    params = [layer.v, layer.g, layer.b, h]

    def f():
        out = layer(h)
        total = None
        for j in range(3):
            piece = (out[:, j * 4:(j + 1) * 4] * float(j + 1)).sum()
            total = piece if total is None else total + piece
        return total

    return max_relative_error(f, params)


def _check_gmm(rng):
    head = layers.GmmHead(3)
    params_t = _t(rng, 5, 9, scale=0.5)
    x = rng.standard_normal(5)
    weights = rng.random(5)
    return max_relative_error(
        lambda: layers.gmm_loss(head, params_t, x, weights), [params_t]
    )


def _check_micro_model(rng):
    cfg = TierConfig(
        tiers=2, frame_sizes=(2, 2), hidden=8, embed_dim=2, mlp_hidden=4, q=4
    )
    for _ in range(_KINK_TRIES):
        m = SampleRnn(cfg, dtype=np.float64, rng=rng)
        x = rng.integers(0, 4, size=(1, 16))

        def f():
            out, _ = m.forward(x, m.init_state(1))
            return m.loss(out, x)

        if _relu_kink_gap(f) >= _KINK_GAP:
            break
    return max_relative_error(f, list(m.parameters().values()))


CHECKS: dict[str, Callable] = {
    "matmul": _check_matmul,
    "pointwise": _check_pointwise,
    "relu": _check_relu,
    "exp_log_sqrt": _check_exp_log_sqrt,
    "softmax_ce": _check_softmax_ce,
    "weight_norm": _check_weight_norm,
    "embedding": _check_embedding,
    "gru_step": _check_gru,
    "lstm_step": _check_lstm,
    "mlp": _check_mlp,
    "upsample": _check_upsample,
    "gmm_nll": _check_gmm,
    "micro_model": _check_micro_model,
}

# instance counts tuned so the whole suite stays well under its time budget
INSTANCES = {name: 100 for name in CHECKS}
INSTANCES["micro_model"] = 100


def run_check(name: str, seed: int = 0, instances: int | None = None) -> float:
    fn = CHECKS[name]
    n = instances if instances is not None else INSTANCES[name]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        worst = max(worst, fn(rng))
    return worst


def run_all(seed: int = 0, instances: int | None = None):
    """Run every check; yields (name, worst_error, passed)."""
    for name in CHECKS:
        err = run_check(name, seed=seed, instances=instances)
        yield name, err, err < TOLERANCE

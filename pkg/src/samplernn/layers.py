"""Trainable building blocks: weight-normalized linears, embeddings,
recurrent cells, the sample-level MLP, and the output heads.

Recurrent steps are single fused graph nodes with hand-derived backward
passes; the finite-difference suite in ``gradcheck`` pins them against
numeric gradients, and scalar-loop oracles in the tests pin the forward
math.  Gate slice order is [r, z, c] for the GRU and [i, f, g, o] for the
LSTM.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from . import initializers
from .autograd import Tensor
from .errors import ConfigError, DimensionError, NumericError


class WeightNormLinear:
    """Linear layer y = x W^T + b with the weight reparameterized as
    W = g * v / ||v||, row-wise.  ``g`` starts at the row norms of ``v``
    so the effective weight initially equals the He-initialized ``v``."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        v = initializers.he_fan_in(rng, (out_dim, in_dim), dtype)
        self.v = Tensor(v, requires_grad=True)
        self.g = Tensor(np.linalg.norm(v.astype(np.float64), axis=1).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def weight(self) -> Tensor:
        return weight_norm_apply(self.v, self.g)

    def effective_weight(self) -> np.ndarray:
        """Plain-numpy effective weight, matching the graph path's numerics."""
        norms = np.sqrt((self.v.data * self.v.data).sum(axis=1, keepdims=True))
        return self.v.data * (self.g.data[:, None] / norms)

    def __call__(self, x: Tensor) -> Tensor:
        w = self.weight()
        return ag.matmul(x, ag.transpose(w, (1, 0))) + self.b

    def parameters(self) -> dict[str, Tensor]:
        return {"v": self.v, "g": self.g, "b": self.b}


def weight_norm_apply(v: Tensor, g: Tensor) -> Tensor:
    """Effective weight g_i * v_i / ||v_i||_2 per output row."""
    if v.ndim != 2 or g.ndim != 1 or g.shape[0] != v.shape[0]:
        raise DimensionError(f"weight norm expects v (out, in) and g (out,), got {v.shape} / {g.shape}")
    norm_sq = ag.tensor_sum(ag.mul(v, v), axis=1, keepdims=True)
    if np.any(norm_sq.data <= 0.0):
        raise NumericError("weight normalization hit a zero-norm row")
    norm = ag.sqrt(norm_sq)
    return ag.mul(v, ag.div(ag.reshape(g, (-1, 1)), norm))


class Embedding:
    """Lookup table (q, E), standard-normal init, never weight-normalized."""

    def __init__(self, rng: np.random.Generator, num: int, dim: int, dtype=np.float32):
        self.num = num
        self.dim = dim
        self.table = Tensor(initializers.standard_normal(rng, (num, dim), dtype), requires_grad=True)

    def __call__(self, indices: np.ndarray) -> Tensor:
        return ag.embedding_lookup(self.table, indices)

    def parameters(self) -> dict[str, Tensor]:
        return {"table": self.table}


def embed(embedding: Embedding, bins: np.ndarray) -> Tensor:
    return embedding(bins)


class GruCell:
    """Gated recurrent unit.  Update convention:

        r = sigmoid(x_r + (h U^T)_r)
        z = sigmoid(x_z + (h U^T)_z)
        c = tanh(x_c + r * (h U^T)_c)
        h' = (1 - z) * h + z * c

    so the reset gate scales the hidden-to-hidden term of the candidate and
    z = 1 means "take the candidate".
    """

    state_arity = 1

    def __init__(self, rng: np.random.Generator, input_dim: int, hidden: int, dtype=np.float32):
        self.input_dim = input_dim
        self.hidden = hidden
        self.wx = Tensor(initializers.he_fan_in(rng, (3 * hidden, input_dim), dtype), requires_grad=True)
        wh = np.concatenate([initializers.orthogonal(rng, (hidden, hidden), dtype) for _ in range(3)])
        self.wh = Tensor(wh, requires_grad=True)
        self.b = Tensor(np.zeros(3 * hidden, dtype=dtype), requires_grad=True)

    def input_pre(self, x: Tensor) -> Tensor:
        """Input-to-hidden projection; vectorizable over many steps at once."""
        return ag.matmul(x, ag.transpose(self.wx, (1, 0))) + self.b

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        return self.step_pre(self.input_pre(x), h)

    def step_pre(self, pre: Tensor, h: Tensor) -> Tensor:
        H = self.hidden
        if pre.shape[-1] != 3 * H or h.shape[-1] != H:
            raise DimensionError(f"gru step got pre {pre.shape}, h {h.shape} for hidden {H}")
        U = self.wh
        hu = h.data @ U.data.T
        r = _sigmoid_np(pre.data[:, :H] + hu[:, :H])
        z = _sigmoid_np(pre.data[:, H: 2 * H] + hu[:, H: 2 * H])
        hu_c = hu[:, 2 * H:]
        c = np.tanh(pre.data[:, 2 * H:] + r * hu_c)
        out = (1.0 - z) * h.data + z * c

        def backward(g):
            dz = g * (c - h.data)
            dc = g * z
            da_c = dc * (1.0 - c * c)
            dr = da_c * hu_c
            dhu_c = da_c * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            dpre = np.concatenate([da_r, da_z, da_c], axis=1)
            dhu = np.concatenate([da_r, da_z, dhu_c], axis=1)
            ag.accumulate_grad(pre, dpre)
            ag.accumulate_grad(h, g * (1.0 - z) + dhu @ U.data)
            ag.accumulate_grad(U, dhu.T @ h.data)

        return ag.make_node(out, (pre, h, U), backward)

    def parameters(self) -> dict[str, Tensor]:
        return {"wx": self.wx, "wh": self.wh, "b": self.b}


class LstmCell:
    """LSTM with forget-gate bias initialized to 3 so early training keeps
    its cell memory.  ``step`` takes and returns an (h, c) pair."""

    state_arity = 2

    def __init__(self, rng: np.random.Generator, input_dim: int, hidden: int, dtype=np.float32):
        self.input_dim = input_dim
        self.hidden = hidden
        self.wx = Tensor(initializers.he_fan_in(rng, (4 * hidden, input_dim), dtype), requires_grad=True)
        wh = np.concatenate([initializers.orthogonal(rng, (hidden, hidden), dtype) for _ in range(4)])
        self.wh = Tensor(wh, requires_grad=True)
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden: 2 * hidden] = 3.0
        self.b = Tensor(b, requires_grad=True)

    def input_pre(self, x: Tensor) -> Tensor:
        return ag.matmul(x, ag.transpose(self.wx, (1, 0))) + self.b

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return self.step_pre(self.input_pre(x), h, c)

    def step_pre(self, pre: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        H = self.hidden
        if pre.shape[-1] != 4 * H:
            raise DimensionError(f"lstm step got pre {pre.shape} for hidden {H}")
        U = self.wh
        p = pre.data + h.data @ U.data.T
        i = _sigmoid_np(p[:, :H])
        f = _sigmoid_np(p[:, H: 2 * H])
        g_ = np.tanh(p[:, 2 * H: 3 * H])
        o = _sigmoid_np(p[:, 3 * H:])
        c_new = f * c.data + i * g_
        t = np.tanh(c_new)
        h_new = o * t
        packed = np.concatenate([h_new, c_new], axis=1)

        def backward(gg):
            dh, dc_ext = gg[:, :H], gg[:, H:]
            do = dh * t
            dct = dc_ext + dh * o * (1.0 - t * t)
            dp = np.concatenate(
                [
                    dct * g_ * i * (1.0 - i),
                    dct * c.data * f * (1.0 - f),
                    dct * i * (1.0 - g_ * g_),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            ag.accumulate_grad(pre, dp)
            ag.accumulate_grad(h, dp @ U.data)
            ag.accumulate_grad(c, dct * f)
            ag.accumulate_grad(U, dp.T @ h.data)

        node = ag.make_node(packed, (pre, h, c, U), backward)
        return node[:, :H], node[:, H:]

    def parameters(self) -> dict[str, Tensor]:
        return {"wx": self.wx, "wh": self.wh, "b": self.b}


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gru_step(cell: GruCell, x: Tensor, h: Tensor) -> Tensor:
    return cell.step(x, h)


def lstm_step(cell: LstmCell, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    return cell.step(x, h, c)


class Mlp:
    """Three weight-normalized linear layers with ReLU after the first two.
    The third layer is the output head's linear map and has no activation."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int, dtype=np.float32):
        self.l1 = WeightNormLinear(rng, in_dim, hidden, dtype)
        self.l2 = WeightNormLinear(rng, hidden, hidden, dtype)
        self.l3 = WeightNormLinear(rng, hidden, out_dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = ag.relu(self.l1(x))
        h = ag.relu(self.l2(h))
        return self.l3(h)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in (("l1", self.l1), ("l2", self.l2), ("l3", self.l3)):
            for k, p in layer.parameters().items():
                out[f"{name}.{k}"] = p
        return out

    def head_parameter_names(self) -> set[str]:
        """Names (within this MLP) of the output-head layer's parameters."""
        return {f"l3.{k}" for k in self.l3.parameters()}


def mlp_forward(mlp: Mlp, x: Tensor) -> Tensor:
    return mlp(x)


class SoftmaxHead:
    """Categorical head: q logits per position."""

    kind = "softmax"

    def __init__(self, q: int):
        self.q = q
        self.out_dim = q


class MultiSoftmaxHead:
    """Frame-at-once head: FS(1) * q logits per frame, each q-slice an
    independent categorical over one sample of the frame.  With FS(1) = 1
    this degenerates to a plain softmax head."""

    kind = "multisoftmax"

    def __init__(self, frame_size: int, q: int):
        if frame_size < 1:
            raise ConfigError(f"multisoftmax frame size must be >= 1, got {frame_size}")
        self.frame_size = frame_size
        self.q = q
        self.out_dim = frame_size * q


def multisoftmax_forward(head: MultiSoftmaxHead, out: Tensor) -> list[Tensor]:
    """Split a (B, FS*q) head output into FS logit slices of width q."""
    if out.shape[-1] != head.out_dim:
        raise DimensionError(f"expected width {head.out_dim}, got {out.shape}")
    return [out[:, j * head.q: (j + 1) * head.q] for j in range(head.frame_size)]


class GmmHead:
    """Mixture-of-Gaussians head over real-valued samples: per position the
    linear map yields C mixing logits, C means, and C log-sigmas (clamped
    to [-7, 7] before exponentiation)."""

    kind = "gmm"
    LOG_SIGMA_BOUND = 7.0

    def __init__(self, components: int):
        if components < 1:
            raise ConfigError(f"gmm needs at least one component, got {components}")
        self.components = components
        self.out_dim = 3 * components


_LOG_2PI = math.log(2.0 * math.pi)


def _logsumexp_rows(t: Tensor) -> Tensor:
    # max is treated as a constant; the gradient is exact regardless
    m = Tensor(t.data.max(axis=1, keepdims=True))
    return ag.log(ag.tensor_sum(ag.exp(t - m), axis=1, keepdims=True)) + m


def gmm_nll(head: GmmHead, params: Tensor, x: np.ndarray) -> Tensor:
    """Per-position negative log density (nats) of x under the mixture.

    ``params`` is (N, 3C) raw head output, ``x`` an (N,) float array.
    """
    C = head.components
    if params.ndim != 2 or params.shape[1] != 3 * C:
        raise DimensionError(f"gmm params must be (N, {3 * C}), got {params.shape}")
    x = np.asarray(x, dtype=params.dtype).reshape(-1, 1)
    if x.shape[0] != params.shape[0]:
        raise DimensionError(f"{x.shape[0]} samples vs {params.shape[0]} parameter rows")
    logit_pi = params[:, :C]
    mu = params[:, C: 2 * C]
    log_sig = ag.clamp(params[:, 2 * C:], -head.LOG_SIGMA_BOUND, head.LOG_SIGMA_BOUND)
    log_pi = logit_pi - _logsumexp_rows(logit_pi)
    z = ag.div(Tensor(x) - mu, ag.exp(log_sig))
    comp = log_pi - log_sig - 0.5 * ag.mul(z, z) - 0.5 * _LOG_2PI
    ll = _logsumexp_rows(comp)
    return ag.reshape(-ll, (-1,))


def gmm_loss(head: GmmHead, params: Tensor, x: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Masked mean of ``gmm_nll`` in nats; zero total weight gives loss 0."""
    nll = gmm_nll(head, params, x)
    if not np.all(np.isfinite(nll.data)):
        raise NumericError("non-finite mixture NLL")
    if weights is None:
        return nll.mean()
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        return Tensor(np.zeros((), dtype=params.dtype))
    return ag.tensor_sum(ag.mul(nll, Tensor(weights.astype(params.dtype)))) * (1.0 / total)


def gmm_nll_per_position(components: int, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Plain-numpy float64 per-position mixture NLL (nats) for evaluation."""
    C = components
    p = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    logit_pi, mu, log_sig = p[:, :C], p[:, C: 2 * C], np.clip(p[:, 2 * C:], -7.0, 7.0)
    m = logit_pi.max(axis=1, keepdims=True)
    log_pi = logit_pi - (m + np.log(np.exp(logit_pi - m).sum(axis=1, keepdims=True)))
    z = (x - mu) / np.exp(log_sig)
    comp = log_pi - log_sig - 0.5 * z * z - 0.5 * _LOG_2PI
    cm = comp.max(axis=1, keepdims=True)
    return -(cm[:, 0] + np.log(np.exp(comp - cm).sum(axis=1)))

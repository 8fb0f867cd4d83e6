"""The tiered autoregressive waveform model.

A model with K tiers predicts sample x_i from everything before it.  Tier
k (k >= 2) is a stateful RNN that fires once every FS(k) samples: it
consumes the FS(k) real-valued samples immediately preceding its
prediction window (plus, below the top tier, a conditioning vector from
the tier above) and emits r(k) conditioning vectors through learned
per-slot linear projections, one per firing of the tier below.  Tier 1 is
a memoryless MLP over the last FS(1) quantized samples plus the tier-2
conditioning vector for the position.  With tiers=1 the model collapses
to a flat RNN over embedded samples, one step per sample.

Conventions pinned here and relied on by the tests:
  - tier k fires at positions congruent to 0 mod FS(k); its input frame for
    the firing at position i is samples [i - FS(k), i);
  - real-valued frame inputs are dequantized bin centers scaled to [-2, 2];
  - sample windows are flattened oldest-first;
  - fresh sequences start from the learnable per-layer initial states and a
    history window full of silence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from . import layers
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .quantize import QuantizerConfig, dequantize

REAL_INPUT_SCALE = 2.0  # frame inputs span [-2, 2]

_CELLS = {"gru": layers.GruCell, "lstm": layers.LstmCell}
_HEADS = ("softmax", "multisoftmax", "gmm")


@dataclass(frozen=True)
class TierConfig:
    tiers: int = 2
    frame_sizes: tuple = (2, 2)
    hidden: int = 64
    embed_dim: int = 32
    mlp_hidden: int = 0  # 0 means "same as hidden"
    cell: str = "gru"
    rnn_layers: int = 1
    head: str = "softmax"
    q: int = 256
    gmm_components: int = 4
    use_embedding: bool = True

    def __post_init__(self):
        object.__setattr__(self, "frame_sizes", tuple(int(f) for f in self.frame_sizes))
        if self.tiers < 1:
            raise ConfigError(f"tiers must be >= 1, got {self.tiers}")
        if len(self.frame_sizes) != self.tiers:
            raise ConfigError(
                f"frame_sizes has {len(self.frame_sizes)} entries for {self.tiers} tiers"
            )
        if any(f < 1 for f in self.frame_sizes):
            raise ConfigError(f"frame sizes must be >= 1, got {self.frame_sizes}")
        if self.tiers == 1 and self.frame_sizes != (1,):
            raise ConfigError("a flat (tiers=1) model requires frame_sizes=(1,)")
        for i in range(2, self.tiers):
            lo, hi = self.frame_sizes[i - 1], self.frame_sizes[i]
            if hi % lo != 0:
                raise ConfigError(
                    f"frame size chain must divide upward: FS({i + 1})={hi} "
                    f"is not a multiple of FS({i})={lo}"
                )
        if self.tiers >= 2 and self.frame_sizes[0] > self.frame_sizes[-1]:
            raise ConfigError(
                f"sample window FS(1)={self.frame_sizes[0]} exceeds the top frame "
                f"size FS({self.tiers})={self.frame_sizes[-1]}"
            )
        if self.cell not in _CELLS:
            raise ConfigError(f"unknown cell kind {self.cell!r}")
        if self.head not in _HEADS:
            raise ConfigError(f"unknown head kind {self.head!r}")
        if self.head == "multisoftmax" and self.tiers >= 2:
            if self.frame_sizes[1] % self.frame_sizes[0] != 0:
                raise ConfigError(
                    "multisoftmax needs FS(2) divisible by FS(1) so conditioning "
                    "exists at every frame start"
                )
        if self.head == "gmm" and self.use_embedding:
            raise ConfigError("the gmm head consumes real values; set use_embedding=False")
        if self.hidden < 1 or self.embed_dim < 1 or self.rnn_layers < 1:
            raise ConfigError("hidden, embed_dim and rnn_layers must be >= 1")
        if self.q < 2 or self.q % 2:
            raise ConfigError(f"q must be even and >= 2, got {self.q}")
        if self.mlp_hidden < 0:
            raise ConfigError(f"mlp_hidden must be >= 0, got {self.mlp_hidden}")

    @property
    def mlp_width(self) -> int:
        return self.mlp_hidden or self.hidden

    @property
    def top_frame_size(self) -> int:
        return self.frame_sizes[-1]

    @property
    def history_len(self) -> int:
        return max(self.frame_sizes)

    def ratio(self, k: int) -> int:
        """Upsampling ratio r(k) of tier k (2-based tier numbering)."""
        if k == 2:
            return self.frame_sizes[1]
        return self.frame_sizes[k - 1] // self.frame_sizes[k - 2]

    @property
    def real_input(self) -> bool:
        return self.head == "gmm"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "TierConfig":
        raw = json.loads(blob)
        raw["frame_sizes"] = tuple(raw["frame_sizes"])
        return cls(**raw)


@dataclass
class TierState:
    """Everything carried from one subsequence to the next: per-tier
    per-layer hidden tensors and the trailing window of input history."""

    hist_bins: np.ndarray | None
    hist_real: np.ndarray | None
    hidden: dict = field(default_factory=dict)

    @property
    def batch(self) -> int:
        hist = self.hist_bins if self.hist_bins is not None else self.hist_real
        return hist.shape[0]

    def detach(self) -> "TierState":
        out = {}
        for k, hs in self.hidden.items():
            out[k] = [tuple(t.detach() for t in h) if isinstance(h, tuple) else h.detach() for h in hs]
        return TierState(
            hist_bins=None if self.hist_bins is None else self.hist_bins.copy(),
            hist_real=None if self.hist_real is None else self.hist_real.copy(),
            hidden=out,
        )


class TierActivation:
    """Result of one frame-tier firing: the combined input, the new hidden
    stack, and the r conditioning vectors for the tier below."""

    def __init__(self, inp, hidden, cond):
        self.inp = inp
        self.hidden = hidden
        self.cond = cond


class FrameTier:
    def __init__(self, rng, cfg: TierConfig, k: int, dtype):
        self.k = k
        self.period = cfg.frame_sizes[k - 1]
        self.r = cfg.ratio(k)
        self.is_top = k == cfg.tiers
        H = cfg.hidden
        self.wx = None if self.is_top else layers.WeightNormLinear(rng, self.period, H, dtype)
        cell_cls = _CELLS[cfg.cell]
        self.cells = []
        self.h0 = []
        in_dim = self.period if self.is_top else H
        for _ in range(cfg.rnn_layers):
            cell = cell_cls(rng, in_dim, H, dtype)
            self.cells.append(cell)
            zeros = lambda: Tensor(np.zeros((1, H), dtype=dtype), requires_grad=True)
            self.h0.append((zeros(), zeros()) if cell.state_arity == 2 else zeros())
            in_dim = H
        self.up = layers.WeightNormLinear(rng, H, self.r * H, dtype)

    def combine_input(self, frame: Tensor, c_above: Tensor | None) -> Tensor:
        if self.is_top:
            if c_above is not None:
                raise ContractError(f"top tier {self.k} takes no conditioning input")
            return frame
        if c_above is None:
            raise ContractError(f"tier {self.k} needs conditioning from tier {self.k + 1}")
        return self.wx(frame) + c_above

    def step(self, frame: Tensor, c_above: Tensor | None, hidden: list) -> TierActivation:
        """One firing on a (B, period) frame; used directly by tests and the
        sampler while the training path runs the vectorized equivalent."""
        inp = self.combine_input(frame, c_above)
        new_hidden = []
        x = inp
        for cell, h in zip(self.cells, hidden):
            if cell.state_arity == 2:
                x, c = cell.step(x, h[0], h[1])
                new_hidden.append((x, c))
            else:
                x = cell.step(x, h)
                new_hidden.append(x)
        return TierActivation(inp, new_hidden, self.upsample(x))

    def upsample(self, h: Tensor) -> list[Tensor]:
        """The r conditioning vectors emitted by one firing."""
        out = self.up(h)
        H = h.shape[-1]
        return [out[:, j * H: (j + 1) * H] for j in range(self.r)]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.wx is not None:
            for n, p in self.wx.parameters().items():
                out[f"wx.{n}"] = p
        for i, cell in enumerate(self.cells):
            for n, p in cell.parameters().items():
                out[f"cell{i}.{n}"] = p
            h0 = self.h0[i]
            if isinstance(h0, tuple):
                out[f"cell{i}.h0"] = h0[0]
                out[f"cell{i}.c0"] = h0[1]
            else:
                out[f"cell{i}.h0"] = h0
        for n, p in self.up.parameters().items():
            out[f"up.{n}"] = p
        return out


def frame_tier_step(tier: FrameTier, frame: Tensor, c_above, hidden: list) -> TierActivation:
    return tier.step(frame, c_above, hidden)


def upsample(tier: FrameTier, h: Tensor) -> list[Tensor]:
    return tier.upsample(h)


class SampleRnn:
    def __init__(self, cfg: TierConfig, seed: int = 0, dtype=np.float32, rng=None):
        self.cfg = cfg
        self.dtype = dtype
        self.quant = QuantizerConfig(cfg.q)
        self.norm_stats = None  # set by the gmm training path
        rng = np.random.default_rng(seed) if rng is None else rng

        fs1 = cfg.frame_sizes[0]
        self.embedding = None
        if not cfg.real_input and cfg.use_embedding:
            self.embedding = layers.Embedding(rng, cfg.q, cfg.embed_dim, dtype)
            window_width = fs1 * cfg.embed_dim
        else:
            window_width = fs1

        if cfg.head == "softmax":
            self.head = layers.SoftmaxHead(cfg.q)
        elif cfg.head == "multisoftmax":
            self.head = layers.MultiSoftmaxHead(fs1, cfg.q)
        else:
            self.head = layers.GmmHead(cfg.gmm_components)

        self.tiers: dict[int, FrameTier] = {}
        self.flat_cells: list = []
        self.flat_h0: list = []
        if cfg.tiers >= 2:
            for k in range(cfg.tiers, 1, -1):
                self.tiers[k] = FrameTier(rng, cfg, k, dtype)
            self.sample_wx = layers.WeightNormLinear(rng, window_width, cfg.hidden, dtype)
            mlp_in = cfg.hidden
        else:
            cell_cls = _CELLS[cfg.cell]
            in_dim = cfg.embed_dim if self.embedding is not None else 1
            for _ in range(cfg.rnn_layers):
                cell = cell_cls(rng, in_dim, cfg.hidden, dtype)
                self.flat_cells.append(cell)
                zeros = lambda: Tensor(np.zeros((1, cfg.hidden), dtype=dtype), requires_grad=True)
                self.flat_h0.append((zeros(), zeros()) if cell.state_arity == 2 else zeros())
                in_dim = cfg.hidden
            self.sample_wx = None
            mlp_in = cfg.hidden
        self.mlp = layers.Mlp(rng, mlp_in, cfg.mlp_width, self.head.out_dim, dtype)

    # ---- parameters ----

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.embedding is not None:
            out["embed.table"] = self.embedding.table
        for k in sorted(self.tiers, reverse=True):
            for n, p in self.tiers[k].parameters().items():
                out[f"tier{k}.{n}"] = p
        for i, cell in enumerate(self.flat_cells):
            for n, p in cell.parameters().items():
                out[f"tier1.cell{i}.{n}"] = p
            h0 = self.flat_h0[i]
            if isinstance(h0, tuple):
                out[f"tier1.cell{i}.h0"] = h0[0]
                out[f"tier1.cell{i}.c0"] = h0[1]
            else:
                out[f"tier1.cell{i}.h0"] = h0
        if self.sample_wx is not None:
            for n, p in self.sample_wx.parameters().items():
                out[f"sample.wx.{n}"] = p
        for n, p in self.mlp.parameters().items():
            out[f"mlp.{n}"] = p
        return out

    def head_parameter_names(self) -> set[str]:
        return {f"mlp.{n}" for n in self.mlp.head_parameter_names()}

    # ---- state handling ----

    def silence_real(self) -> float:
        """The real-valued rendering of silence in the model's input space."""
        if self.norm_stats is None:
            return 0.0
        return float(-self.norm_stats.mean / self.norm_stats.std)

    def _h0_rows(self, origin, batch: int):
        ones = Tensor(np.ones((batch, 1), dtype=self.dtype))
        if isinstance(origin, tuple):
            return tuple(ag.mul(ones, t) for t in origin)
        return ag.mul(ones, origin)

    def _tier_layer_origins(self):
        if self.cfg.tiers >= 2:
            return {k: self.tiers[k].h0 for k in self.tiers}
        return {1: self.flat_h0}

    def init_state(self, batch: int) -> TierState:
        """Fresh state: learnable initial hiddens, history full of silence."""
        hl = self.cfg.history_len if self.cfg.tiers >= 2 else 1
        if self.cfg.real_input:
            hist_bins = None
            hist_real = np.full((batch, hl), self.silence_real(), dtype=np.float32)
        else:
            hist_bins = np.full((batch, hl), self.quant.silence_bin, dtype=np.int64)
            hist_real = None
        hidden = {
            k: [self._h0_rows(o, batch) for o in origins]
            for k, origins in self._tier_layer_origins().items()
        }
        return TierState(hist_bins=hist_bins, hist_real=hist_real, hidden=hidden)

    def carry_state(self, state: TierState, fresh_rows: np.ndarray) -> TierState:
        """Reset the given rows to the learnable initial state and silence
        history while carrying the rest; gradients flow into the initial
        state through the reset rows only."""
        fresh_rows = np.asarray(fresh_rows, dtype=bool)
        if not fresh_rows.any():
            return state
        B = state.batch
        m = Tensor(fresh_rows.astype(self.dtype).reshape(B, 1))
        keep = Tensor((~fresh_rows).astype(self.dtype).reshape(B, 1))

        def mix(carried, origin):
            return ag.mul(keep, carried) + ag.mul(m, origin)

        hidden = {}
        for k, origins in self._tier_layer_origins().items():
            hs = []
            for carried, origin in zip(state.hidden[k], origins):
                if isinstance(origin, tuple):
                    hs.append(tuple(mix(c, o) for c, o in zip(carried, origin)))
                else:
                    hs.append(mix(carried, origin))
            hidden[k] = hs
        hist_bins = None if state.hist_bins is None else state.hist_bins.copy()
        hist_real = None if state.hist_real is None else state.hist_real.copy()
        if hist_bins is not None:
            hist_bins[fresh_rows] = self.quant.silence_bin
        if hist_real is not None:
            hist_real[fresh_rows] = self.silence_real()
        return TierState(hist_bins=hist_bins, hist_real=hist_real, hidden=hidden)

    # ---- forward ----

    def tier_real_view(self, bins: np.ndarray) -> np.ndarray:
        """Dequantized bin centers scaled for frame-tier consumption."""
        return dequantize(bins, self.quant) * np.float32(REAL_INPUT_SCALE)

    def forward(self, x: np.ndarray, state: TierState, trace: dict | None = None):
        """Teacher-forced pass over a (B, L) batch of quantized bins (or
        standardized reals for the gmm head).  Position i of the output
        predicts x[:, i] from the history and everything before i.  Returns
        (out, new_state) where out is (B, L, q) logits for the categorical
        heads and (B, L, 3C) raw mixture parameters for the gmm head."""
        cfg = self.cfg
        x = np.asarray(x)
        if x.ndim != 2:
            raise DimensionError(f"batch must be (B, L), got {x.shape}")
        B, L = x.shape
        if state.batch != B:
            raise DimensionError(f"state batch {state.batch} != input batch {B}")
        top_fs = cfg.top_frame_size if cfg.tiers >= 2 else 1
        if L < 1 or L % top_fs != 0:
            raise ContractError(f"subsequence length {L} is not a positive multiple of FS(K)={top_fs}")

        if cfg.real_input:
            x = x.astype(np.float32, copy=False)
            full_real = np.concatenate([state.hist_real, x], axis=1)
            full_bins = None
            centers = full_real  # sample windows see the same values
            tier_real = full_real
        else:
            if not np.issubdtype(x.dtype, np.integer):
                raise ContractError("categorical paths take integer bins")
            full_bins = np.concatenate([state.hist_bins, x], axis=1)
            centers = dequantize(full_bins, self.quant)
            tier_real = centers * np.float32(REAL_INPUT_SCALE)
        if self.dtype == np.float64:
            centers = centers.astype(np.float64)
            tier_real = tier_real.astype(np.float64)

        hl = full_bins.shape[1] - L if full_bins is not None else full_real.shape[1] - L
        new_hidden: dict[int, list] = {}
        if cfg.tiers >= 2:
            cond = self._run_frame_tiers(tier_real, hl, B, L, state, new_hidden, trace)
            out = self._run_sample_level(full_bins, centers, hl, cond, B, L)
        else:
            out = self._run_flat(full_bins, centers, hl, B, L, state, new_hidden, trace)

        tail = 1 if cfg.tiers == 1 else cfg.history_len
        if cfg.real_input:
            new_state = TierState(None, full_real[:, -tail:].copy(), new_hidden)
        else:
            new_state = TierState(full_bins[:, -tail:].copy(), None, new_hidden)
        return out, new_state

    def _run_frame_tiers(self, tier_real, hl, B, L, state, new_hidden, trace):
        cond = None
        for k in range(self.cfg.tiers, 1, -1):
            tier = self.tiers[k]
            P = tier.period
            n = L // P
            frames_np = (
                tier_real[:, hl - P: hl + (n - 1) * P]
                .reshape(B, n, P)
                .transpose(1, 0, 2)
                .reshape(n * B, P)
            )
            frames = Tensor(frames_np)
            inp_all = frames if tier.is_top else tier.wx(frames) + cond
            series = inp_all
            new_hidden[k] = []
            for l, cell in enumerate(tier.cells):
                pre_all = cell.input_pre(series)
                hstate = state.hidden[k][l]
                hs = []
                if cell.state_arity == 2:
                    h, c = hstate
                    for t in range(n):
                        h, c = cell.step_pre(pre_all[t * B:(t + 1) * B], h, c)
                        hs.append(h)
                    new_hidden[k].append((h, c))
                else:
                    h = hstate
                    for t in range(n):
                        h = cell.step_pre(pre_all[t * B:(t + 1) * B], h)
                        hs.append(h)
                    new_hidden[k].append(h)
                series = ag.concat(hs, axis=0) if n > 1 else hs[0]
            up = tier.up(series)
            H = self.cfg.hidden
            cond = ag.reshape(
                ag.transpose(ag.reshape(up, (n, B, tier.r, H)), (0, 2, 1, 3)),
                (n * tier.r * B, H),
            )
            if trace is not None:
                trace[f"tier{k}_firings"] = n
                trace[f"tier{k}_cond"] = n * tier.r
        return cond

    def _window_features(self, full_bins, centers, hl, B, L, stride=1):
        """Flattened oldest-first sample windows for each predicted position
        (or each frame start when stride = FS(1))."""
        fs1 = self.cfg.frame_sizes[0]
        cols = L // stride
        if self.embedding is not None:
            parts = [
                ag.embedding_lookup(
                    self.embedding.table,
                    full_bins[:, hl - fs1 + s: hl - fs1 + s + L: stride],
                )
                for s in range(fs1)
            ]
            cat = ag.concat(parts, axis=2) if fs1 > 1 else parts[0]
            return ag.reshape(cat, (B * cols, fs1 * self.cfg.embed_dim))
        win = np.stack(
            [centers[:, hl - fs1 + s: hl - fs1 + s + L: stride] for s in range(fs1)],
            axis=2,
        )
        return Tensor(win.reshape(B * cols, fs1))

    def _run_sample_level(self, full_bins, centers, hl, cond, B, L):
        cfg = self.cfg
        H = cfg.hidden
        fs1 = cfg.frame_sizes[0]
        stride = fs1 if self.head.kind == "multisoftmax" else 1
        cols = L // stride
        # cond is t-major (L*B, H); pick frame starts, then go batch-major
        cond_bm = ag.reshape(cond, (L, B, H))
        if stride > 1:
            cond_bm = cond_bm[::stride]
        cond_bm = ag.reshape(ag.transpose(cond_bm, (1, 0, 2)), (B * cols, H))
        feats = self._window_features(full_bins, centers, hl, B, L, stride)
        inp = self.sample_wx(feats) + cond_bm
        out = self.mlp(inp)
        if self.head.kind == "multisoftmax":
            return ag.reshape(out, (B, L, self.head.q))
        return ag.reshape(out, (B, L, self.head.out_dim))

    def _run_flat(self, full_bins, centers, hl, B, L, state, new_hidden, trace):
        if self.embedding is not None:
            prev = full_bins[:, hl - 1: hl - 1 + L]
            emb = ag.embedding_lookup(self.embedding.table, prev)
            series = ag.reshape(ag.transpose(emb, (1, 0, 2)), (L * B, self.cfg.embed_dim))
        else:
            prev = centers[:, hl - 1: hl - 1 + L]
            series = Tensor(prev.T.reshape(L * B, 1))
        new_hidden[1] = []
        for l, cell in enumerate(self.flat_cells):
            pre_all = cell.input_pre(series)
            hstate = state.hidden[1][l]
            hs = []
            if cell.state_arity == 2:
                h, c = hstate
                for t in range(L):
                    h, c = cell.step_pre(pre_all[t * B:(t + 1) * B], h, c)
                    hs.append(h)
                new_hidden[1].append((h, c))
            else:
                h = hstate
                for t in range(L):
                    h = cell.step_pre(pre_all[t * B:(t + 1) * B], h)
                    hs.append(h)
                new_hidden[1].append(h)
            series = ag.concat(hs, axis=0) if L > 1 else hs[0]
        if trace is not None:
            trace["tier1_firings"] = L
        H = self.cfg.hidden
        feats = ag.reshape(ag.transpose(ag.reshape(series, (L, B, H)), (1, 0, 2)), (B * L, H))
        out = self.mlp(feats)
        return ag.reshape(out, (B, L, self.head.out_dim))

    # ---- losses ----

    def loss(self, out: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Masked mean NLL in nats over a (B, L) target batch."""
        B, L = targets.shape[0], targets.shape[1]
        weights = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(B * L)
        if self.head.kind == "gmm":
            params = ag.reshape(out, (B * L, self.head.out_dim))
            return layers.gmm_loss(self.head, params, np.asarray(targets).reshape(B * L), weights)
        logits = ag.reshape(out, (B * L, self.head.q))
        return ag.softmax_cross_entropy(logits, np.asarray(targets).reshape(B * L), weights)

    def nll_per_position(self, out_data: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """Float64 per-position NLL (nats) from raw forward output."""
        B, L = targets.shape
        flat = out_data.reshape(B * L, -1)
        if self.head.kind == "gmm":
            nll = layers.gmm_nll_per_position(
                self.head.components, flat, np.asarray(targets).reshape(-1)
            )
        else:
            nll = ag.cross_entropy_per_position(flat, np.asarray(targets).reshape(-1))
        return nll.reshape(B, L)

    # ---- single-position helpers (test/oracle surface) ----

    def sample_level_forward(self, window: np.ndarray, c: Tensor) -> Tensor:
        """Head input for one position: ``window`` is the FS(1) most recent
        quantized bins (oldest first), ``c`` the (1, H) tier-2 vector."""
        window = np.asarray(window).reshape(1, -1)
        if window.shape[1] != self.cfg.frame_sizes[0]:
            raise DimensionError(f"window must hold FS(1)={self.cfg.frame_sizes[0]} samples")
        if self.embedding is not None:
            emb = ag.embedding_lookup(self.embedding.table, window)
            feats = ag.reshape(emb, (1, -1))
        elif self.cfg.real_input:
            feats = Tensor(window.astype(self.dtype))
        else:
            feats = Tensor(dequantize(window, self.quant).astype(self.dtype))
        return self.mlp(self.sample_wx(feats) + c)


def model_forward(model: SampleRnn, x: np.ndarray, state: TierState, trace: dict | None = None):
    return model.forward(x, state, trace)


def baseline_rnn_forward(model: SampleRnn, x: np.ndarray, state: TierState):
    """Forward for the flat one-tier configuration (RNN baseline)."""
    if model.cfg.tiers != 1:
        raise ContractError("baseline_rnn_forward expects a tiers=1 model")
    return model.forward(x, state)


def count_params(model: SampleRnn) -> int:
    return int(sum(p.size for p in model.parameters().values()))

"""Sequential generation and the memory-retention probe.

Training runs through the autograd graph; generation walks one sample at
a time and needs no gradients, so it uses a plain-ndarray mirror of the
trained model with every weight-normalized layer collapsed to its
effective weight.  Teacher-forcing the generated samples back through
the graph model reproduces the head outputs the sampler drew from up to
float32 accumulation order (the graph batches positions into one matmul,
the sampler sees them one row at a time).

Silence injection replaces a span of the output with the zero-amplitude
token.  Injected positions consume no RNG draw, so two generations with
the same seed agree everywhere the forced spans allow.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .audio import estimate_f0
from .errors import ContractError, NumericError
from .layers import _sigmoid_np
from .model import REAL_INPUT_SCALE, SampleRnn
from .quantize import dequantize, destandardize

# Fundamentals of the two talkers in the retention corpus, and the probe's
# class boundary (their geometric midpoint).
SPEAKER_F0 = (125.3, 201.8)


def f0_split_hz(pair=SPEAKER_F0) -> float:
    return math.sqrt(pair[0] * pair[1])


class _Linear:
    """Effective-weight snapshot of a weight-normalized linear layer,
    applied with the same x @ W.T layout as the graph path."""

    def __init__(self, layer):
        self.wt = layer.effective_weight().T
        self.b = layer.b.data.copy()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.wt + self.b


class _GruStep:
    arity = 1

    def __init__(self, cell):
        self.H = cell.hidden
        self.wxt = cell.wx.data.copy().T
        self.wht = cell.wh.data.copy().T
        self.b = cell.b.data.copy()

    def __call__(self, x, h):
        H = self.H
        pre = x @ self.wxt + self.b
        hu = h @ self.wht
        r = _sigmoid_np(pre[:, :H] + hu[:, :H])
        z = _sigmoid_np(pre[:, H:2 * H] + hu[:, H:2 * H])
        c = np.tanh(pre[:, 2 * H:] + r * hu[:, 2 * H:])
        out = (1.0 - z) * h + z * c
        return out, out


class _LstmStep:
    arity = 2

    def __init__(self, cell):
        self.H = cell.hidden
        self.wxt = cell.wx.data.copy().T
        self.wht = cell.wh.data.copy().T
        self.b = cell.b.data.copy()

    def __call__(self, x, state):
        H = self.H
        h, c = state
        p = x @ self.wxt + self.b + h @ self.wht
        i = _sigmoid_np(p[:, :H])
        f = _sigmoid_np(p[:, H:2 * H])
        g = np.tanh(p[:, 2 * H:3 * H])
        o = _sigmoid_np(p[:, 3 * H:])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        return h_new, (h_new, c_new)


def _wrap_cell(cell):
    return _LstmStep(cell) if cell.state_arity == 2 else _GruStep(cell)


def _h0_arrays(origin):
    if isinstance(origin, tuple):
        return tuple(t.data.copy() for t in origin)
    return origin.data.copy()


def _copy_state(s):
    if isinstance(s, tuple):
        return tuple(t.copy() for t in s)
    return s.copy()


class _TierNet:
    def __init__(self, tier):
        self.period = tier.period
        self.r = tier.r
        self.wx = None if tier.wx is None else _Linear(tier.wx)
        self.up = _Linear(tier.up)
        self.cells = [_wrap_cell(c) for c in tier.cells]
        self.h0 = [_h0_arrays(o) for o in tier.h0]


@dataclass
class GenResult:
    """One generated clip.  ``amplitudes`` is the output waveform in
    [-1, 1] with injected silence rendered as exact zeros; ``bins`` /
    ``reals`` hold the model-space samples (quantized bins or standardized
    reals) that were actually fed back."""

    amplitudes: np.ndarray
    bins: np.ndarray | None
    reals: np.ndarray | None
    injected: np.ndarray
    trace: np.ndarray | None
    wall_seconds: float

    @property
    def samples_per_second(self) -> float:
        if self.wall_seconds <= 0:
            return float("inf")
        return len(self.amplitudes) / self.wall_seconds


class InferenceNet:
    """Graph-free mirror of a trained model for fast autoregressive
    sampling.  Weights are snapshotted at construction; mutating the model
    afterwards does not affect the net."""

    def __init__(self, model: SampleRnn):
        cfg = model.cfg
        if model.dtype != np.float32:
            raise ContractError("generation expects a float32 model")
        self.cfg = cfg
        self.head_kind = model.head.kind
        self.q = cfg.q
        self.fs1 = cfg.frame_sizes[0]
        self.hidden = cfg.hidden
        self.embedding = None if model.embedding is None else model.embedding.table.data.copy()
        self.sample_wx = None if model.sample_wx is None else _Linear(model.sample_wx)
        self.l1 = _Linear(model.mlp.l1)
        self.l2 = _Linear(model.mlp.l2)
        self.l3 = _Linear(model.mlp.l3)
        self.out_dim = model.head.out_dim
        self.tiers = {k: _TierNet(model.tiers[k]) for k in model.tiers}
        self.flat_cells = [_wrap_cell(c) for c in model.flat_cells]
        self.flat_h0 = [_h0_arrays(o) for o in model.flat_h0]
        self.norm_stats = model.norm_stats
        self.silence_real = np.float32(model.silence_real())
        self.silence_bin = model.quant.silence_bin
        self.gmm_components = cfg.gmm_components if model.head.kind == "gmm" else 0
        if not cfg.real_input:
            self.center_lut = dequantize(np.arange(cfg.q, dtype=np.int64), model.quant)
            self.tier_lut = self.center_lut * np.float32(REAL_INPUT_SCALE)

    def _mlp(self, x: np.ndarray) -> np.ndarray:
        h = self.l1(x)
        np.maximum(h, 0.0, out=h)
        h = self.l2(h)
        np.maximum(h, 0.0, out=h)
        return self.l3(h)

    def generate(self, n_samples: int, rng: np.random.Generator,
                 temperature: float = 1.0, silence: tuple | None = None,
                 collect: bool = False) -> GenResult:
        """Sample ``n_samples`` autoregressively.  ``silence`` is an
        optional (start, end) span of output positions forced to the
        zero-amplitude token; ``collect=True`` records the raw head output
        at every position (q logits per sample, or 3C mixture
        parameters)."""
        if n_samples < 1:
            raise ContractError(f"need a positive sample count, got {n_samples}")
        if not (temperature > 0.0):
            raise ContractError(f"temperature must be positive, got {temperature}")
        sil_lo, sil_hi = n_samples, n_samples
        if silence is not None:
            sil_lo, sil_hi = int(silence[0]), int(silence[1])
            if sil_lo < 0 or sil_hi < sil_lo:
                raise ContractError(f"bad silence span {silence}")

        cfg = self.cfg
        K = cfg.tiers
        hl = cfg.history_len if K >= 2 else 1
        total = hl + n_samples
        discrete = not cfg.real_input
        injected = np.zeros(n_samples, dtype=bool)
        if discrete:
            bins = np.full(total, self.silence_bin, dtype=np.int64)
            reals = None
        else:
            bins = None
            reals = np.full(total, self.silence_real, dtype=np.float32)
        trace = np.empty((n_samples, self.q if discrete else self.out_dim),
                         dtype=np.float32) if collect else None

        t0 = time.perf_counter()
        if K >= 2:
            self._run_tiered(bins, reals, injected, trace, rng, temperature,
                             hl, n_samples, sil_lo, sil_hi)
        else:
            self._run_flat_gen(bins, reals, injected, trace, rng, temperature,
                               hl, n_samples, sil_lo, sil_hi)
        wall = time.perf_counter() - t0

        if discrete:
            amp = self.center_lut[bins[hl:]].copy()
        else:
            body = reals[hl:]
            amp = destandardize(body, self.norm_stats) if self.norm_stats is not None else body.copy()
        amp[injected] = 0.0
        return GenResult(
            amplitudes=amp,
            bins=None if bins is None else bins[hl:].copy(),
            reals=None if reals is None else reals[hl:].copy(),
            injected=injected,
            trace=trace,
            wall_seconds=wall,
        )

    # ---- internals ----

    def _draw_bin(self, logits: np.ndarray, rng, temperature: float) -> int:
        z = logits.astype(np.float64)
        if temperature != 1.0:
            z /= temperature
        z -= z.max()
        cdf = np.cumsum(np.exp(z))
        total = cdf[-1]
        if not (total > 0.0 and math.isfinite(total)):
            raise NumericError("non-finite logits while sampling")
        b = int(np.searchsorted(cdf, rng.random() * total, side="right"))
        return min(b, self.q - 1)

    def _draw_real(self, params: np.ndarray, rng, temperature: float) -> float:
        C = self.gmm_components
        z = params.astype(np.float64)
        if not np.isfinite(z).all():
            raise NumericError("non-finite mixture parameters while sampling")
        logit_pi = z[:C] / temperature
        logit_pi -= logit_pi.max()
        cdf = np.cumsum(np.exp(logit_pi))
        comp = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), C - 1)
        # tempering a Gaussian scales its variance linearly in temperature
        sig = math.exp(min(max(z[2 * C + comp], -7.0), 7.0)) * math.sqrt(temperature)
        return z[C + comp] + sig * rng.standard_normal()

    def _fire_tiers(self, p: int, i: int, bins, reals, pend, hidden, fs):
        K = self.cfg.tiers
        for k in range(K, 1, -1):
            period = fs[k - 1]
            if p % period:
                continue
            tier = self.tiers[k]
            if reals is None:
                frame = self.tier_lut[bins[i - period:i]][None, :]
            else:
                frame = reals[i - period:i][None, :]
            if tier.wx is None:
                x = frame.astype(np.float32, copy=False)
            else:
                slot = (p % fs[k]) // period
                x = tier.wx(frame) + pend[k + 1][slot]
            hs = hidden[k]
            for idx, cell in enumerate(tier.cells):
                x, hs[idx] = cell(x, hs[idx])
            pend[k] = tier.up(x).reshape(tier.r, self.hidden)

    def _window(self, bins, reals, i: int) -> np.ndarray:
        fs1 = self.fs1
        if reals is not None:
            return reals[i - fs1:i][None, :]
        if self.embedding is not None:
            return self.embedding[bins[i - fs1:i]].reshape(1, -1)
        return self.center_lut[bins[i - fs1:i]][None, :]

    def _run_tiered(self, bins, reals, injected, trace, rng, temperature,
                    hl, n, sil_lo, sil_hi):
        cfg = self.cfg
        fs = cfg.frame_sizes
        fs1 = self.fs1
        fs2 = fs[1]
        q = self.q
        multi = self.head_kind == "multisoftmax"
        gmm = self.head_kind == "gmm"
        pend = {cfg.tiers + 1: None}
        hidden = {k: [_copy_state(h) for h in t.h0] for k, t in self.tiers.items()}
        sample_wx = self.sample_wx

        step = fs1 if multi else 1
        for p in range(0, n, step):
            i = hl + p
            if p % fs2 == 0:
                self._fire_tiers(p, i, bins, reals, pend, hidden, fs)

            if multi:
                frame_forced = sil_lo <= p and p + fs1 <= sil_hi
                if frame_forced and trace is None:
                    bins[i:i + fs1] = self.silence_bin
                    injected[p:p + fs1] = True
                    continue
                cond = pend[2][p % fs2]
                out = self._mlp(sample_wx(self._window(bins, reals, i)) + cond)[0]
                for j in range(fs1):
                    if trace is not None:
                        trace[p + j] = out[j * q:(j + 1) * q]
                    if sil_lo <= p + j < sil_hi:
                        bins[i + j] = self.silence_bin
                        injected[p + j] = True
                    else:
                        bins[i + j] = self._draw_bin(out[j * q:(j + 1) * q], rng, temperature)
                continue

            forced = sil_lo <= p < sil_hi
            if forced and trace is None:
                if bins is not None:
                    bins[i] = self.silence_bin
                else:
                    reals[i] = self.silence_real
                injected[p] = True
                continue
            cond = pend[2][p % fs2]
            out = self._mlp(sample_wx(self._window(bins, reals, i)) + cond)[0]
            if trace is not None:
                trace[p] = out
            if forced:
                if bins is not None:
                    bins[i] = self.silence_bin
                else:
                    reals[i] = self.silence_real
                injected[p] = True
            elif gmm:
                reals[i] = self._draw_real(out, rng, temperature)
            else:
                bins[i] = self._draw_bin(out, rng, temperature)

    def _run_flat_gen(self, bins, reals, injected, trace, rng, temperature,
                      hl, n, sil_lo, sil_hi):
        gmm = self.head_kind == "gmm"
        hidden = [_copy_state(h) for h in self.flat_h0]
        for p in range(n):
            i = hl + p
            if reals is not None:
                x = reals[i - 1:i][None, :]
            elif self.embedding is not None:
                x = self.embedding[bins[i - 1]][None, :]
            else:
                x = self.center_lut[bins[i - 1:i]][None, :]
            for idx, cell in enumerate(self.flat_cells):
                x, hidden[idx] = cell(x, hidden[idx])
            forced = sil_lo <= p < sil_hi
            if forced and trace is None:
                if bins is not None:
                    bins[i] = self.silence_bin
                else:
                    reals[i] = self.silence_real
                injected[p] = True
                continue
            out = self._mlp(x)[0]
            if trace is not None:
                trace[p] = out
            if forced:
                if bins is not None:
                    bins[i] = self.silence_bin
                else:
                    reals[i] = self.silence_real
                injected[p] = True
            elif gmm:
                reals[i] = self._draw_real(out, rng, temperature)
            else:
                bins[i] = self._draw_bin(out, rng, temperature)


def teacher_forcing_outputs(model: SampleRnn, seq: np.ndarray) -> np.ndarray:
    """Head outputs of the graph model when fed a generated sequence,
    aligned position-for-position with a collected generation trace."""
    x = np.asarray(seq)[None, :]
    out, _ = model.forward(x, model.init_state(1))
    return out.data[0]


# ---- the retention probe ----


@dataclass
class ProbeRun:
    index: int
    f0_head: float | None
    f0_tail: float | None
    label_head: str | None
    label_tail: str | None

    @property
    def match(self) -> bool | None:
        if self.label_head is None or self.label_tail is None:
            return None
        return self.label_head == self.label_tail


@dataclass
class ProbeResult:
    runs: list
    classified: int
    matches: int
    split_hz: float

    @property
    def consistency(self) -> float | None:
        if self.classified == 0:
            return None
        return self.matches / self.classified

    @property
    def inconclusive(self) -> bool:
        return self.classified == 0


def _label(f0: float | None, split: float) -> str | None:
    if f0 is None:
        return None
    return "low" if f0 < split else "high"


def run_probe(model: SampleRnn, runs: int = 50, seed: int = 0, rate: int = 16000,
              seconds: float = 5.0, silence=(2.0, 3.0), window: float = 2.0,
              split_hz: float | None = None) -> ProbeResult:
    """Does a generated voice survive a forced silence?  Each run samples
    ``seconds`` of audio with ``silence`` (in seconds) zeroed out, assigns
    the spans before and after the gap to a low/high fundamental class,
    and counts how often the two classes agree.  Runs whose head or tail
    is unvoiced are excluded; if every run is excluded the probe is
    inconclusive rather than failed."""
    if runs < 1:
        raise ContractError(f"need at least one probe run, got {runs}")
    split = f0_split_hz() if split_hz is None else float(split_hz)
    net = InferenceNet(model)
    n = int(round(seconds * rate))
    top = model.cfg.top_frame_size if model.cfg.tiers >= 2 else 1
    n -= n % top
    sil = (int(round(silence[0] * rate)), int(round(silence[1] * rate)))
    wn = int(round(window * rate))
    if wn < 1 or wn > sil[0] or n - wn < sil[1]:
        raise ContractError("classification windows must not overlap the forced silence")

    results = []
    classified = matches = 0
    for idx in range(runs):
        rng = np.random.default_rng([seed, idx])
        res = net.generate(n, rng, silence=sil)
        amp = res.amplitudes.astype(np.float64)
        f_head = estimate_f0(amp[:wn], rate, min_corr=0.0)
        f_tail = estimate_f0(amp[n - wn:], rate, min_corr=0.0)
        run = ProbeRun(idx, f_head, f_tail, _label(f_head, split), _label(f_tail, split))
        results.append(run)
        if run.match is not None:
            classified += 1
            matches += run.match
    return ProbeResult(runs=results, classified=classified, matches=matches, split_hz=split)


def chance_interval(n_trials: int, z: float = 1.96) -> tuple[float, float]:
    """Normal-approximation 95% interval around 0.5 for n fair coin flips."""
    if n_trials < 1:
        raise ContractError("interval needs at least one trial")
    half = z * math.sqrt(0.25 / n_trials)
    return 0.5 - half, 0.5 + half

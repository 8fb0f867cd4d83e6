"""Training: Adam, truncated-BPTT batch streaming, evaluation, and the
main loop.  Everything here is deterministic given the seeds, and the
full loop state (optimizer moments, stream cursors, carried hidden
state) can be snapshotted and resumed exactly.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .autograd import Tensor
from .errors import ConfigError, ContractError, NumericError
from .model import SampleRnn, TierState

LN2 = math.log(2.0)


@dataclass
class TrainConfig:
    subseq_len: int = 512
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    max_steps: int = 2000
    eval_every: int = 200
    patience: int = 0      # evals without improvement before stopping; 0 = never
    seed: int = 0

    def __post_init__(self):
        if self.subseq_len < 1 or self.batch_size < 1:
            raise ConfigError("subseq_len and batch_size must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.clip <= 0.0:
            raise ConfigError("gradient clip bound must be positive")


class Adam:
    """Standard Adam with bias correction.  Parameters whose gradient is
    None are skipped entirely (their moments do not decay)."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9,
                 beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class BatchStream:
    """Feeds fixed-length subsequences to a batch of independent rows.

    Each row works through one sequence at a time in consecutive
    ``subseq_len`` chunks; when its sequence is exhausted the row picks up
    the next one from a seeded permutation and is flagged fresh so the
    trainer resets its recurrent state.  Chunks never span sequences.
    Short trailing chunks are padded with ``pad_value`` and masked out.
    """

    def __init__(self, sequences, batch_size: int, subseq_len: int, seed: int,
                 pad_value=0):
        if not sequences:
            raise ContractError("batch stream needs at least one sequence")
        for i, s in enumerate(sequences):
            if len(s) < 1:
                raise ContractError(f"sequence {i} is empty")
        self.sequences = sequences
        self.batch_size = batch_size
        self.subseq_len = subseq_len
        self.seed = seed
        self.pad_value = pad_value
        self.epoch = 0
        self.next_ptr = 0
        self.row_seq = np.full(batch_size, -1, dtype=np.int64)
        self.row_off = np.zeros(batch_size, dtype=np.int64)
        self.order = self._permutation()

    def _permutation(self):
        return np.random.default_rng([self.seed, self.epoch]).permutation(
            len(self.sequences))

    def _advance(self, row: int):
        if self.next_ptr >= len(self.order):
            self.epoch += 1
            self.order = self._permutation()
            self.next_ptr = 0
        self.row_seq[row] = self.order[self.next_ptr]
        self.row_off[row] = 0
        self.next_ptr += 1

    def next_batch(self):
        """Returns (x (B, L), mask (B, L) float, fresh (B,) bool)."""
        B, L = self.batch_size, self.subseq_len
        dtype = np.asarray(self.sequences[0]).dtype
        x = np.full((B, L), self.pad_value, dtype=dtype)
        mask = np.zeros((B, L), dtype=np.float64)
        fresh = np.zeros(B, dtype=bool)
        for r in range(B):
            if self.row_seq[r] < 0 or self.row_off[r] >= len(self.sequences[self.row_seq[r]]):
                self._advance(r)
                fresh[r] = True
            seq = self.sequences[self.row_seq[r]]
            off = self.row_off[r]
            take = min(L, len(seq) - off)
            x[r, :take] = seq[off:off + take]
            mask[r, :take] = 1.0
            self.row_off[r] = off + take
        return x, mask, fresh

    def state_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "epoch": self.epoch,
            "next_ptr": int(self.next_ptr),
            "row_seq": self.row_seq.tolist(),
            "row_off": self.row_off.tolist(),
        })

    def restore_json(self, blob: str) -> None:
        st = json.loads(blob)
        if st["seed"] != self.seed or len(st["row_seq"]) != self.batch_size:
            raise ContractError("stream snapshot does not match this stream")
        self.epoch = st["epoch"]
        self.order = self._permutation()
        self.next_ptr = st["next_ptr"]
        self.row_seq = np.asarray(st["row_seq"], dtype=np.int64)
        self.row_off = np.asarray(st["row_off"], dtype=np.int64)


def tbptt_step(model: SampleRnn, opt: Adam, state: TierState, x, mask, fresh,
               clip: float = 1.0):
    """One truncated-BPTT update.  Returns (mean nats per position, new
    detached state).  Gradients stop at the subsequence boundary; fresh
    rows restart from the learnable initial state."""
    state = model.carry_state(state, fresh)
    out, new_state = model.forward(x, state)
    loss = model.loss(out, x, mask)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"training loss is not finite ({value})")
    opt.zero_grad()
    loss.backward()
    ag.clip_gradients(list(model.parameters().values()), clip)
    opt.step()
    return value, new_state.detach()


@dataclass
class EvalResult:
    nats: float
    bits: float
    positions: int


def evaluate_nll(model: SampleRnn, sequences, batch_size: int = 32,
                 subseq_len: int = 512) -> EvalResult:
    """Teacher-forced NLL over every position of every sequence, streamed
    in (batch, subseq) blocks with carried state.  Accumulates in float64;
    the result is invariant to both block sizes."""
    if not sequences:
        raise ContractError("evaluation needs at least one sequence")
    top = model.cfg.top_frame_size if model.cfg.tiers >= 2 else 1
    subseq_len = max(top, (subseq_len // top) * top)
    real = model.cfg.real_input
    pad = np.float32(0.0) if real else model.quant.silence_bin

    total = 0.0
    count = 0
    for lo in range(0, len(sequences), batch_size):
        group = [np.asarray(s) for s in sequences[lo:lo + batch_size]]
        B = len(group)
        state = model.init_state(B)
        longest = max(len(s) for s in group)
        pos = 0
        while pos < longest:
            L = min(subseq_len, ((longest - pos + top - 1) // top) * top)
            x = np.full((B, L), pad,
                        dtype=np.float32 if real else np.int64)
            mask = np.zeros((B, L), dtype=np.float64)
            for r, s in enumerate(group):
                take = max(0, min(L, len(s) - pos))
                if take:
                    x[r, :take] = s[pos:pos + take]
                    mask[r, :take] = 1.0
            with ag.no_grad():
                out, state = model.forward(x, state)
            nll = model.nll_per_position(out.data, x)
            total += float((nll * mask).sum())
            count += int(mask.sum())
            pos += L
    nats = total / count
    return EvalResult(nats=nats, bits=nats / LN2, positions=count)


# ---- training snapshots ----

def _state_tensors(state: TierState) -> dict:
    out = {}
    for k, layer_states in state.hidden.items():
        for l, entry in enumerate(layer_states):
            if isinstance(entry, tuple):
                out[f"state.tier{k}.layer{l}.h"] = entry[0].data
                out[f"state.tier{k}.layer{l}.c"] = entry[1].data
            else:
                out[f"state.tier{k}.layer{l}.h"] = entry.data
    if state.hist_bins is not None:
        out["state.hist"] = state.hist_bins.astype(np.float64)
    else:
        out["state.hist"] = state.hist_real.astype(np.float64)
    return out


def _state_from_tensors(model: SampleRnn, tensors: dict, batch: int) -> TierState:
    template = model.init_state(batch)
    hidden = {}
    for k, layer_states in template.hidden.items():
        rebuilt = []
        for l, entry in enumerate(layer_states):
            h = Tensor(tensors[f"state.tier{k}.layer{l}.h"].astype(model.dtype))
            if isinstance(entry, tuple):
                c = Tensor(tensors[f"state.tier{k}.layer{l}.c"].astype(model.dtype))
                rebuilt.append((h, c))
            else:
                rebuilt.append(h)
        hidden[k] = rebuilt
    hist = tensors["state.hist"]
    if model.cfg.real_input:
        return TierState(hist_bins=None, hist_real=hist.astype(np.float32),
                         hidden=hidden)
    return TierState(hist_bins=hist.astype(np.int64), hist_real=None,
                     hidden=hidden)


def save_training(path, model: SampleRnn, opt: Adam, stream: BatchStream,
                  state: TierState, step: int, extra: dict | None = None) -> None:
    meta = {
        "kind": "train",
        "config": model.cfg.to_json(),
        "step": str(step),
        "adam_t": str(opt.t),
        "stream": stream.state_json(),
    }
    if model.norm_stats is not None:
        meta["norm_mean"] = repr(model.norm_stats.mean)
        meta["norm_std"] = repr(model.norm_stats.std)
    if extra:
        meta.update(extra)
    tensors = {n: p.data for n, p in model.parameters().items()}
    for n in model.parameters():
        tensors[f"{n}.adam_m"] = opt.m[n]
        tensors[f"{n}.adam_v"] = opt.v[n]
    tensors.update(_state_tensors(state))
    ckpt.write_checkpoint(path, meta, tensors)


def load_training(path, train_cfg: TrainConfig, sequences):
    """Rebuild (model, opt, stream, state, step, metadata) from a training
    snapshot so the loop continues exactly where it stopped."""
    meta, tensors = ckpt.read_checkpoint(path)
    if meta.get("kind") != "train":
        raise ContractError(f"{path} is not a training snapshot")
    from .model import TierConfig
    from .quantize import NormStats

    model = SampleRnn(TierConfig.from_json(meta["config"]), seed=0)
    if "norm_mean" in meta:
        model.norm_stats = NormStats(float(meta["norm_mean"]), float(meta["norm_std"]))
    ckpt.restore_parameters(model, tensors)

    opt = Adam(model.parameters(), lr=train_cfg.lr, beta1=train_cfg.beta1,
               beta2=train_cfg.beta2, eps=train_cfg.eps)
    opt.t = int(meta["adam_t"])
    for n in model.parameters():
        opt.m[n][...] = tensors[f"{n}.adam_m"]
        opt.v[n][...] = tensors[f"{n}.adam_v"]

    pad = np.float32(0.0) if model.cfg.real_input else model.quant.silence_bin
    stream = BatchStream(sequences, train_cfg.batch_size, train_cfg.subseq_len,
                         train_cfg.seed, pad_value=pad)
    stream.restore_json(meta["stream"])
    state = _state_from_tensors(model, tensors, train_cfg.batch_size)
    return model, opt, stream, state, int(meta["step"]), meta


# ---- main loop ----

@dataclass
class TrainResult:
    steps: int
    best_valid_bits: float
    final_valid_bits: float
    history: list = field(default_factory=list)  # (step, train_bits, valid_bits)
    stopped_early: bool = False


def train(model: SampleRnn, train_seqs, valid_seqs, cfg: TrainConfig,
          out_dir=None, log=None, resume_from=None) -> TrainResult:
    """Run truncated-BPTT training.  ``log`` is a writable text stream
    receiving one "step\\ttrain_nll\\tvalid_nll" line (bits per position)
    per evaluation.  With ``out_dir`` set, best.ckpt tracks the lowest
    validation NLL and last.ckpt snapshots the full loop state."""
    top = model.cfg.top_frame_size if model.cfg.tiers >= 2 else 1
    if cfg.subseq_len % top != 0:
        raise ConfigError(
            f"subseq_len {cfg.subseq_len} is not a multiple of the top frame size {top}")

    pad = np.float32(0.0) if model.cfg.real_input else model.quant.silence_bin
    if resume_from is not None:
        model, opt, stream, state, start_step, meta = load_training(
            resume_from, cfg, train_seqs)
        best = float(meta.get("best_valid", "inf"))
        bad_evals = int(meta.get("bad_evals", "0"))
    else:
        stream = BatchStream(train_seqs, cfg.batch_size, cfg.subseq_len,
                             cfg.seed, pad_value=pad)
        opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.eps)
        state = model.init_state(cfg.batch_size)
        start_step = 0
        best = float("inf")
        bad_evals = 0

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    result = TrainResult(steps=start_step, best_valid_bits=best,
                         final_valid_bits=float("nan"))
    window_nats = 0.0
    window_steps = 0
    for step in range(start_step + 1, cfg.max_steps + 1):
        x, mask, fresh = stream.next_batch()
        value, state = tbptt_step(model, opt, state, x, mask, fresh, cfg.clip)
        window_nats += value
        window_steps += 1
        result.steps = step

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            ev = evaluate_nll(model, valid_seqs, batch_size=min(32, cfg.batch_size),
                              subseq_len=cfg.subseq_len)
            train_bits = (window_nats / window_steps) / LN2
            window_nats = 0.0
            window_steps = 0
            result.history.append((step, train_bits, ev.bits))
            result.final_valid_bits = ev.bits
            if log is not None:
                log.write(f"{step}\t{train_bits:.6f}\t{ev.bits:.6f}\n")
                log.flush()
            improved = ev.bits < best
            if improved:
                best = ev.bits
                bad_evals = 0
                if out_dir is not None:
                    ckpt.save_model(os.path.join(out_dir, "best.ckpt"), model,
                                    {"step": str(step), "valid_bits": repr(ev.bits)})
            else:
                bad_evals += 1
            result.best_valid_bits = best
            if out_dir is not None:
                save_training(os.path.join(out_dir, "last.ckpt"), model, opt,
                              stream, state, step,
                              {"best_valid": repr(best), "bad_evals": str(bad_evals)})
            if cfg.patience and bad_evals >= cfg.patience:
                result.stopped_early = True
                break
    return result

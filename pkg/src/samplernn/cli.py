"""Command-line front end: train, evaluate, generate, probe, synthesize
corpora, and run the gradient checks.

Every command is file-in/file-out and deterministic under (config, seed):
reruns produce byte-identical logs, WAVs, and checkpoints.  Timing and
progress chatter go to stderr so stdout stays reproducible.

Exit codes: 0 success, 1 internal check failure, 2 config error, 3 data
error, 4 inconclusive probe.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from .audio import (
    cycle_transition,
    load_manifest_corpus,
    markov_entropy_rate,
    sticky_transition,
    synth_markov,
    synth_tone,
    synth_utterances,
    write_manifest,
    write_wav,
)
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericError,
)
from .gradcheck import TOLERANCE, run_all
from .model import SampleRnn, TierConfig
from .quantize import compute_norm_stats, dequantize, quantize, standardize
from .sampler import SPEAKER_F0, InferenceNet, run_probe
from .trainer import TrainConfig, evaluate_nll, train

RATE = 16000


# ---- config files ----

def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat "key = value" lines with # comments; returns raw strings."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{ln}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{ln}: duplicate key {key!r}")
        out[key] = value
    return out


_SCALARS = {"int": int, "float": float, "bool": bool, "str": str}


def _coerce(value: str, type_name: str, key: str):
    if type_name == "bool":
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return _SCALARS[type_name](value)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e


@dataclasses.dataclass
class RunConfig:
    model: TierConfig
    train: TrainConfig
    data_manifest: str | None
    out_dir: str | None
    seed: int


def _type_name(t) -> str:
    return t if isinstance(t, str) else t.__name__


def build_run_config(kv: dict) -> RunConfig:
    model_fields = {f.name: _type_name(f.type) for f in dataclasses.fields(TierConfig)}
    train_fields = {f.name: _type_name(f.type) for f in dataclasses.fields(TrainConfig)}
    model_kw: dict = {}
    train_kw: dict = {}
    data_manifest = None
    out_dir = None
    seed = 0
    for key, value in kv.items():
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in model_fields:
                raise ConfigError(f"unknown model field {key!r}")
            if name == "frame_sizes":
                try:
                    model_kw[name] = tuple(int(p) for p in value.replace(",", " ").split())
                except ValueError as e:
                    raise ConfigError(f"{key}: {e}") from e
            else:
                model_kw[name] = _coerce(value, model_fields[name], key)
        elif key.startswith("train."):
            name = key[len("train."):]
            if name == "seed":
                raise ConfigError("set the top-level 'seed' key instead of train.seed")
            if name not in train_fields:
                raise ConfigError(f"unknown train field {key!r}")
            train_kw[name] = _coerce(value, train_fields[name], key)
        elif key == "data.manifest":
            data_manifest = value
        elif key == "out":
            out_dir = value
        elif key == "seed":
            seed = _coerce(value, "int", key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    train_kw["seed"] = seed
    return RunConfig(model=TierConfig(**model_kw), train=TrainConfig(**train_kw),
                     data_manifest=data_manifest, out_dir=out_dir, seed=seed)


def load_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return build_run_config(parse_config_text(f.read(), source=path))


# ---- shared plumbing ----

def _load_corpus(path: str):
    if not os.path.isfile(path):
        raise DataError(f"manifest not found: {path}")
    try:
        return load_manifest_corpus(path, expected_rate=RATE)
    except OSError as e:
        raise DataError(str(e)) from e


def _load_model(path: str):
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    return ckpt.load_model(path)


def _to_model_space(model: SampleRnn, seqs):
    if model.cfg.real_input:
        if model.norm_stats is None:
            raise ConfigError("checkpoint has a real-valued head but no normalization stats")
        return [standardize(s, model.norm_stats) for s in seqs]
    return [quantize(s, model.quant) for s in seqs]


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# ---- commands ----

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if cfg.out_dir is None:
        raise ConfigError("no output directory: set the 'out' key or pass --out")
    if cfg.data_manifest is None:
        raise ConfigError("no corpus: set the 'data.manifest' key")

    corpus, _ = _load_corpus(cfg.data_manifest)
    if not corpus["train"]:
        raise DataError(f"{cfg.data_manifest}: no train chunks")
    if not corpus["valid"]:
        raise DataError(f"{cfg.data_manifest}: no valid chunks")

    model = SampleRnn(cfg.model, seed=cfg.seed)
    if model.cfg.real_input:
        model.norm_stats = compute_norm_stats(corpus["train"])
    train_seqs = _to_model_space(model, corpus["train"])
    valid_seqs = _to_model_space(model, corpus["valid"])

    os.makedirs(cfg.out_dir, exist_ok=True)
    mode = "a" if args.resume else "w"
    t0 = time.perf_counter()
    with open(os.path.join(cfg.out_dir, "metrics.log"), mode, encoding="utf-8") as log:
        result = train(model, train_seqs, valid_seqs, cfg.train,
                       out_dir=cfg.out_dir, log=log, resume_from=args.resume)
    print(f"steps\t{result.steps}")
    print(f"best_valid_bits\t{result.best_valid_bits:.6f}")
    print(f"final_valid_bits\t{result.final_valid_bits:.6f}")
    print(f"trained in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    model, _ = _load_model(args.ckpt)
    corpus, _ = _load_corpus(args.data)
    float_seqs = corpus[args.split]
    if not float_seqs:
        raise DataError(f"{args.data}: no {args.split} chunks")
    seqs = _to_model_space(model, float_seqs)
    for i, s in enumerate(seqs):
        r = evaluate_nll(model, [s])
        print(f"seq\t{i}\t{r.bits:.6f}")
    total = evaluate_nll(model, seqs)
    print(f"nll_bits\t{total.bits:.6f}")
    return 0


def cmd_generate(args) -> int:
    if args.seconds <= 0:
        raise ConfigError(f"--seconds must be positive, got {args.seconds}")
    if args.temperature <= 0:
        raise ConfigError(f"--temperature must be positive, got {args.temperature}")
    if (args.silence_at is None) != (args.silence_len is None):
        raise ConfigError("--silence-at and --silence-len go together")
    model, _ = _load_model(args.ckpt)
    n = int(round(args.seconds * RATE))
    silence = None
    if args.silence_at is not None:
        lo = int(round(args.silence_at * RATE))
        hi = lo + int(round(args.silence_len * RATE))
        if lo < 0 or hi > n:
            raise ConfigError(f"silence span [{lo}, {hi}) falls outside the {n}-sample clip")
        silence = (lo, hi)
    net = InferenceNet(model)
    res = net.generate(n, np.random.default_rng(args.seed),
                       temperature=args.temperature, silence=silence)
    _ensure_parent(args.out)
    write_wav(args.out, res.amplitudes, RATE)
    print(f"wrote\t{args.out}\t{n}")
    print(f"{res.samples_per_second:.0f} samples/s", file=sys.stderr)
    return 0


def cmd_probe(args) -> int:
    model, _ = _load_model(args.ckpt)
    t0 = time.perf_counter()
    result = run_probe(model, runs=args.runs, seed=args.seed)
    print("run\tf0_head\tf0_tail\tlabel_head\tlabel_tail\tmatch")
    for run in result.runs:
        f_head = "-" if run.f0_head is None else f"{run.f0_head:.2f}"
        f_tail = "-" if run.f0_tail is None else f"{run.f0_tail:.2f}"
        match = "-" if run.match is None else str(int(run.match))
        print(f"{run.index}\t{f_head}\t{f_tail}\t{run.label_head or '-'}"
              f"\t{run.label_tail or '-'}\t{match}")
    print(f"probed in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    if result.inconclusive:
        print("inconclusive\tall runs unvoiced")
        return 4
    print(f"classified\t{result.classified}\t{len(result.runs)}")
    print(f"consistency\t{100.0 * result.consistency:.1f}")
    return 0


def _markov_levels(states: int) -> np.ndarray:
    """Evenly spaced amplitudes snapped to exact quantizer bin centers so
    the chain survives the WAV round trip unchanged."""
    from .quantize import QuantizerConfig

    q = QuantizerConfig()
    amps = np.linspace(-0.75, 0.75, states, dtype=np.float64).astype(np.float32)
    bins = quantize(amps, q)
    if len(set(bins.tolist())) != states:
        raise ConfigError(f"{states} states do not map to distinct quantizer bins")
    return dequantize(bins, q)


def cmd_make_synth(args) -> int:
    if args.clips < 3:
        raise ConfigError("need at least 3 clips so every split is non-empty")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    clips: list[tuple[str, np.ndarray]] = []
    metadata = {"kind": args.kind, "seed": str(args.seed), "rate": str(RATE)}

    if args.kind == "sine":
        for i in range(args.clips):
            phase = float(rng.uniform(0.0, 2.0 * math.pi))
            clips.append((f"tone_{i:03d}.wav",
                          synth_tone(RATE, args.clip_seconds, args.freq,
                                     amp=args.amp, phase=phase)))
        metadata["freq_hz"] = f"{args.freq:g}"
    elif args.kind == "markov":
        if args.cycle:
            P = cycle_transition(args.states)
        else:
            stay = (1.0 / args.states) if args.stay is None else args.stay
            if not (0.0 <= stay <= 1.0):
                raise ConfigError(f"--stay must be in [0, 1], got {stay}")
            P = sticky_transition(args.states, stay)
        levels = _markov_levels(args.states)
        n = int(round(args.clip_seconds * RATE))
        for i in range(args.clips):
            clips.append((f"markov_{i:03d}.wav", synth_markov(rng, n, P, levels)))
        metadata["states"] = str(args.states)
        metadata["entropy_bits"] = f"{markov_entropy_rate(P):.6f}"
    elif args.kind == "two-speaker":
        if args.pause_samples < 0:
            raise ConfigError("--pause-samples must be >= 0")
        for spk, f0 in zip(("a", "b"), SPEAKER_F0):
            for i in range(args.clips):
                phase = float(rng.uniform(0.0, 2.0 * math.pi))
                clips.append((f"spk{spk}_{i:03d}.wav",
                              synth_utterances(RATE, f0, args.utterances,
                                               args.utter_seconds, args.pause_samples,
                                               amp=args.amp, phase=phase)))
        metadata["speaker_a_hz"] = f"{SPEAKER_F0[0]:g}"
        metadata["speaker_b_hz"] = f"{SPEAKER_F0[1]:g}"
        metadata["clips_per_speaker"] = str(args.clips)
    else:
        raise ConfigError(f"unknown synth kind {args.kind!r}")

    entries = []
    for name, wave in clips:
        write_wav(os.path.join(args.out, name), wave, RATE)
        # positional split, applied per speaker for two-speaker corpora:
        # the last clip of each group is test, the one before it valid
        i = int(name.rsplit("_", 1)[1].split(".")[0])
        split = "test" if i == args.clips - 1 else "valid" if i == args.clips - 2 else "train"
        entries.append((split, name, 0, len(wave)))
    manifest = os.path.join(args.out, "manifest.txt")
    write_manifest(manifest, entries, metadata)
    print(f"wrote\t{manifest}\t{len(entries)}")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    worst_name, worst = "", -1.0
    failed = False
    for name, err, passed in run_all(seed=args.seed, instances=args.instances):
        print(f"{name}\t{err:.3e}\t{'pass' if passed else 'FAIL'}")
        if err > worst:
            worst_name, worst = name, err
        failed = failed or not passed
    print(f"tolerance\t{TOLERANCE:.0e}")
    print(f"worst\t{worst_name}\t{worst:.3e}")
    print(f"checked in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 1 if failed else 0


# ---- entry point ----

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="samplernn",
        description="Hierarchical autoregressive raw-audio model: training, "
                    "evaluation, generation, and diagnostics.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, help="flat key = value config file")
    t.add_argument("--out", help="output directory (overrides the config)")
    t.add_argument("--seed", type=int, help="run seed (overrides the config)")
    t.add_argument("--resume", help="continue from a last.ckpt training snapshot")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report bits/sample of a checkpoint on a corpus split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="corpus manifest path")
    e.add_argument("--split", choices=("train", "valid", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="sample a WAV from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--out", required=True, help="output WAV path")
    g.add_argument("--seconds", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--silence-at", type=float, dest="silence_at",
                   help="start of forced silence, seconds")
    g.add_argument("--silence-len", type=float, dest="silence_len",
                   help="length of forced silence, seconds")
    g.set_defaults(func=cmd_generate)

    pr = sub.add_parser("probe", help="memory-retention probe across silence")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--runs", type=int, default=50)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_probe)

    m = sub.add_parser("make-synth", help="write a synthetic WAV corpus + manifest")
    m.add_argument("--kind", required=True, choices=("sine", "markov", "two-speaker"))
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--clips", type=int, default=8,
                   help="clips to write (per speaker for two-speaker)")
    m.add_argument("--clip-seconds", type=float, default=2.0, dest="clip_seconds")
    m.add_argument("--freq", type=float, default=125.3, help="sine fundamental, Hz")
    m.add_argument("--amp", type=float, default=0.5)
    m.add_argument("--states", type=int, default=4, help="markov state count")
    m.add_argument("--stay", type=float, default=None,
                   help="markov self-transition probability (default uniform)")
    m.add_argument("--cycle", action="store_true",
                   help="deterministic cycle chain (entropy rate 0)")
    m.add_argument("--utterances", type=int, default=6, help="utterances per clip")
    m.add_argument("--utter-seconds", type=float, default=0.5, dest="utter_seconds")
    m.add_argument("--pause-samples", type=int, default=200, dest="pause_samples")
    m.set_defaults(func=cmd_make_synth)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=None,
                    help="random instances per check (default 100)")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def _validate_threads() -> None:
    raw = os.environ.get("SAMPLERNN_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SAMPLERNN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SAMPLERNN_THREADS must be >= 1, got {n}")


def main(argv=None) -> int:
    try:
        _validate_threads()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except CheckpointShapeError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (ContractError, NumericError, DimensionError) as e:
        print(f"internal check failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

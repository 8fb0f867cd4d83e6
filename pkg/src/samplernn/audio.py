"""Audio I/O, corpus preparation, synthetic corpora, and pitch estimation.

All amplitudes are float32 in [-1, 1].  WAV support is deliberately
16-bit PCM only; anything else is refused loudly rather than resampled
or dithered silently.
"""

import math
import os
import wave

import numpy as np

from .errors import ContractError, DataError, WavFormatError
from .quantize import amplitude_to_pcm16, pcm16_to_amplitude


def read_wav(path, expected_rate: int | None = None):
    """Read a 16-bit PCM WAV file.  Returns (amplitudes float32, rate).
    Multi-channel files are downmixed by averaging the channels."""
    try:
        with wave.open(path, "rb") as w:
            if w.getcomptype() != "NONE":
                raise WavFormatError(
                    f"{path}: compressed WAV ({w.getcomptype()}) is not supported")
            if w.getsampwidth() != 2:
                raise WavFormatError(
                    f"{path}: only 16-bit PCM is supported, got "
                    f"{8 * w.getsampwidth()}-bit")
            channels = w.getnchannels()
            rate = w.getframerate()
            nframes = w.getnframes()
            raw = w.readframes(nframes)
    except wave.Error as e:
        raise WavFormatError(f"{path}: {e}") from e
    except EOFError as e:
        raise WavFormatError(f"{path}: file ends before the WAV header does") from e

    if len(raw) != nframes * channels * 2:
        raise DataError(
            f"{path}: payload holds {len(raw)} bytes, header promises "
            f"{nframes * channels * 2}")
    if expected_rate is not None and rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate}, expected {expected_rate}")

    pcm = np.frombuffer(raw, dtype="<i2")
    if channels > 1:
        amp = pcm16_to_amplitude(pcm.reshape(nframes, channels)).mean(axis=1)
    else:
        amp = pcm16_to_amplitude(pcm)
    return amp.astype(np.float32), rate


def write_wav(path, amplitudes, rate: int) -> None:
    """Write mono 16-bit PCM."""
    pcm = amplitude_to_pcm16(np.asarray(amplitudes))
    with wave.open(path, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.astype("<i2").tobytes())


# ---- corpus chunking and splits ----

def chunk_sequences(sequences, chunk_len: int):
    """Cut each sequence into consecutive chunks of ``chunk_len`` samples.
    The trailing remainder is kept as a shorter final chunk, so no sample
    is discarded.  Returns a flat list."""
    if chunk_len < 1:
        raise ContractError("chunk_len must be positive")
    chunks = []
    for seq in sequences:
        seq = np.asarray(seq)
        for lo in range(0, len(seq), chunk_len):
            part = seq[lo:lo + chunk_len]
            if len(part):
                chunks.append(part)
    return chunks


def split_corpus(chunks, seed: int, fractions=(0.86, 0.07, 0.07)):
    """Shuffle chunks with a seeded permutation and partition them into
    (train, valid, test).  The three lists are disjoint and cover the
    input exactly.  Validation and test get at least one chunk each when
    three or more chunks exist."""
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ContractError(f"fractions must be three values summing to 1, got {fractions}")
    n = len(chunks)
    if n == 0:
        raise ContractError("cannot split an empty corpus")
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    if n >= 3:
        n_valid = max(1, n_valid)
        n_test = max(1, n_test)
    n_train = n - n_valid - n_test
    if n_train < 1:
        raise ContractError(f"{n} chunks leave no training data after the split")
    train = [chunks[i] for i in order[:n_train]]
    valid = [chunks[i] for i in order[n_train:n_train + n_valid]]
    test = [chunks[i] for i in order[n_train + n_valid:]]
    return train, valid, test


# ---- manifests ----

def write_manifest(path, entries, metadata: dict | None = None) -> None:
    """One "split<TAB>file<TAB>offset<TAB>length" line per chunk; metadata
    goes into leading "# key: value" comment lines."""
    with open(path, "w", encoding="utf-8") as f:
        for k, v in (metadata or {}).items():
            f.write(f"# {k}: {v}\n")
        for split, name, offset, length in entries:
            if "\t" in str(name) or "\n" in str(name):
                raise DataError(f"file name not representable in manifest: {name!r}")
            f.write(f"{split}\t{name}\t{int(offset)}\t{int(length)}\n")


def read_manifest(path):
    """Returns (entries, metadata); inverse of write_manifest."""
    entries = []
    metadata = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    k, _, v = body.partition(":")
                    metadata[k.strip()] = v.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{ln}: expected 4 tab-separated fields, got {len(parts)}")
            split, name, offset, length = parts
            if split not in ("train", "valid", "test"):
                raise DataError(f"{path}:{ln}: unknown split {split!r}")
            try:
                entries.append((split, name, int(offset), int(length)))
            except ValueError as e:
                raise DataError(f"{path}:{ln}: {e}") from e
    return entries, metadata


def load_manifest_corpus(manifest_path, expected_rate: int | None = None):
    """Materialize the chunks a manifest describes.  Returns a dict
    {"train": [...], "valid": [...], "test": [...]} of float32 arrays and
    the manifest metadata."""
    entries, metadata = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    cache: dict[str, np.ndarray] = {}
    out = {"train": [], "valid": [], "test": []}
    for split, name, offset, length in entries:
        if name not in cache:
            cache[name], _ = read_wav(os.path.join(base, name), expected_rate)
        seq = cache[name]
        if offset < 0 or offset + length > len(seq):
            raise DataError(
                f"{manifest_path}: chunk {name}[{offset}:{offset + length}] "
                f"outside file of {len(seq)} samples")
        out[split].append(seq[offset:offset + length])
    return out, metadata


# ---- synthetic corpora ----

def synth_tone(rate: int, seconds: float, freq: float, amp: float = 0.5,
               harmonics=(1.0, 0.5, 0.25), phase: float = 0.0) -> np.ndarray:
    """Harmonic stack with the given relative strengths, peak-normalized
    to ``amp`` exactly."""
    n = int(round(rate * seconds))
    t = np.arange(n, dtype=np.float64) / rate
    y = np.zeros(n)
    for h, w in enumerate(harmonics, start=1):
        y += w * np.sin(2.0 * math.pi * freq * h * t + phase)
    peak = np.abs(y).max()
    if peak > 0:
        y *= amp / peak
    return y.astype(np.float32)


def _fade(n_samples: int, ramp: int) -> np.ndarray:
    env = np.ones(n_samples)
    r = min(ramp, n_samples // 2)
    if r > 0:
        env[:r] = np.linspace(0.0, 1.0, r, endpoint=False)
        env[-r:] = np.linspace(1.0, 0.0, r)
    return env


def synth_utterances(rate: int, f0: float, n_utterances: int,
                     utter_seconds: float, pause_samples: int,
                     amp: float = 0.5, ramp: int = 64,
                     phase: float = 0.0) -> np.ndarray:
    """A single talker: harmonic utterances at a fixed fundamental,
    separated by exact silence of ``pause_samples``.  The sequence starts
    and ends with an utterance."""
    if n_utterances < 1:
        raise ContractError("need at least one utterance")
    tone = synth_tone(rate, utter_seconds, f0, amp=amp, phase=phase)
    tone = (tone.astype(np.float64) * _fade(len(tone), ramp)).astype(np.float32)
    gap = np.zeros(pause_samples, dtype=np.float32)
    parts = []
    for i in range(n_utterances):
        if i:
            parts.append(gap)
        parts.append(tone)
    return np.concatenate(parts)


def markov_stationary(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ContractError(f"transition matrix must be square, got {P.shape}")
    if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
        raise ContractError("rows of the transition matrix must be distributions")
    vals, vecs = np.linalg.eig(P.T)
    i = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, i])
    pi = np.abs(pi)
    return pi / pi.sum()


def markov_entropy_rate(P: np.ndarray) -> float:
    """Entropy rate in bits per symbol, -sum_i pi_i sum_j P_ij log2 P_ij."""
    P = np.asarray(P, dtype=np.float64)
    pi = markov_stationary(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(P > 0, P * np.log2(np.where(P > 0, P, 1.0)), 0.0)
    return float(-(pi[:, None] * plogp).sum())


def synth_markov(rng: np.random.Generator, n_samples: int, P: np.ndarray,
                 levels: np.ndarray, start: int | None = None) -> np.ndarray:
    """Sample a stationary Markov chain over amplitude levels.  ``levels``
    should be exact quantizer bin centers so the chain survives the
    quantize/dequantize round trip unchanged."""
    P = np.asarray(P, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float32)
    k = P.shape[0]
    if levels.shape != (k,):
        raise ContractError(f"need one level per state, got {levels.shape} for {k} states")
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = 1.0
    if start is None:
        start = int(rng.choice(k, p=markov_stationary(P)))
    states = np.empty(n_samples, dtype=np.int64)
    u = rng.random(n_samples)
    s = start
    for i in range(n_samples):
        s = int(np.searchsorted(cdf[s], u[i], side="right"))
        states[i] = s
    return levels[states]


def sticky_transition(k: int, stay: float) -> np.ndarray:
    """k-state chain that keeps its state with probability ``stay`` and
    otherwise moves uniformly to one of the other states."""
    if not (0.0 <= stay <= 1.0) or k < 2:
        raise ContractError("need k >= 2 states and stay probability in [0, 1]")
    off = (1.0 - stay) / (k - 1)
    P = np.full((k, k), off)
    np.fill_diagonal(P, stay)
    return P


def cycle_transition(k: int) -> np.ndarray:
    """Deterministic cycle: state i moves to (i + 1) mod k.  Entropy rate 0."""
    P = np.zeros((k, k))
    for i in range(k):
        P[i, (i + 1) % k] = 1.0
    return P


# ---- pitch estimation ----

F0_LOW = 110.0
F0_HIGH = 400.0
VOICED_THRESHOLD = 0.3


def estimate_f0(x: np.ndarray, rate: int, f_lo: float = F0_LOW,
                f_hi: float = F0_HIGH,
                min_corr: float = VOICED_THRESHOLD) -> float | None:
    """Fundamental frequency by normalized autocorrelation over lags
    [rate/f_hi, rate/f_lo], parabolic peak refinement.  Returns None for
    silence or frames whose best peak falls below ``min_corr``.  With
    min_corr=0 every non-silent frame is assigned the frequency of its
    autocorrelation argmax, which is what the retention probe wants:
    noise then lands on an essentially random lag instead of being
    discarded as unvoiced."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < int(rate / f_lo) * 2:
        raise ContractError("frame too short for the pitch range")
    x = x - x.mean()
    power = float((x * x).sum())
    if power < 1e-10:
        return None

    lo = int(math.floor(rate / f_hi))
    hi = int(math.ceil(rate / f_lo))
    n = len(x)
    # normalized autocorrelation r[k] = <x[:-k], x[k:]> / sqrt(|x[:-k]|^2 |x[k:]|^2)
    full = np.correlate(x, x, mode="full")[n - 1:]
    csum = np.concatenate([[0.0], np.cumsum(x * x)])
    r = np.zeros(hi + 2)
    for k in range(lo - 1, min(hi + 2, n)):
        e1 = csum[n - k] - csum[0]
        e2 = csum[n] - csum[k]
        denom = math.sqrt(e1 * e2)
        r[k] = full[k] / denom if denom > 0 else 0.0

    peak = float(r[lo:hi + 1].max())
    if peak < min_corr:
        return None
    # multiples of the true period correlate just as well as the period
    # itself, so prefer the smallest-lag local maximum near the peak value
    # over the global argmax
    k = None
    for cand in range(lo, hi + 1):
        if r[cand] >= 0.9 * peak and r[cand] >= r[cand - 1] and r[cand] >= r[cand + 1]:
            k = cand
            break
    if k is None:
        k = lo + int(np.argmax(r[lo:hi + 1]))
    # parabolic interpolation around the peak
    if lo < k < hi + 1 and k + 1 < len(r):
        a, b, c = r[k - 1], r[k], r[k + 1]
        denom = a - 2 * b + c
        shift = 0.0 if denom == 0 else 0.5 * (a - c) / denom
        shift = float(np.clip(shift, -0.5, 0.5))
    else:
        shift = 0.0
    return rate / (k + shift)

"""Log-mel fbank extraction, feature normalisation, augmentation and the
synthetic speaker corpus that stands in for real recordings."""

from __future__ import annotations

import logging
import os
import wave
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 80
PREEMPH = 0.97
LOG_FLOOR = 1e-10
SPEED_FACTORS = (0.9, 1.0, 1.1)


class ConfigError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if np.max(np.abs(self.samples)) > 1.0 + 1e-12:
            raise ValueError("waveform samples must lie in [-1, 1]")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FbankFeatures:
    frames: np.ndarray  # (T, 80)
    frame_ms: float = 25.0
    hop_ms: float = 10.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# -- fbank -------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters on the rfft bin grid, shape (n_mels, n_fft//2+1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


_FBANK = mel_filterbank()
_WINDOW = np.hamming(WIN_LENGTH)


def num_frames(num_samples: int, win=WIN_LENGTH, hop=HOP_LENGTH) -> int:
    if num_samples < win:
        raise ValueError(f"need at least {win} samples for one frame, got {num_samples}")
    return (num_samples - win) // hop + 1


def frame_signal(x: np.ndarray, win=WIN_LENGTH, hop=HOP_LENGTH) -> np.ndarray:
    n = num_frames(x.size, win, hop)
    view = np.lib.stride_tricks.sliding_window_view(x, win)
    return view[::hop][:n]


def fbank(w: Waveform | np.ndarray) -> FbankFeatures:
    """80-dim log-mel energies, 25 ms Hamming windows every 10 ms."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - PREEMPH * x[:-1]
    frames = frame_signal(emph) * _WINDOW
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=-1)) ** 2
    mel = power @ _FBANK.T
    return FbankFeatures(np.log(np.maximum(mel, LOG_FLOOR)))


# -- normalisation -------------------------------------------------------------------

@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_frames(cls, frames) -> "FeatureStats":
        if isinstance(frames, (list, tuple)):
            frames = np.concatenate([f.frames if isinstance(f, FbankFeatures) else f for f in frames])
        elif isinstance(frames, FbankFeatures):
            frames = frames.frames
        return cls(frames.mean(axis=0), frames.std(axis=0))


def normalize(f: FbankFeatures, stats: FeatureStats | None = None, eps: float = 1e-10) -> FbankFeatures:
    """Mean/std normalisation per dimension; per-utterance stats when ``stats`` is None."""
    stats = FeatureStats.from_frames(f) if stats is None else stats
    return FbankFeatures((f.frames - stats.mean) / np.maximum(stats.std, eps), f.frame_ms, f.hop_ms)


def denormalize(f: FbankFeatures, stats: FeatureStats, eps: float = 1e-10) -> FbankFeatures:
    return FbankFeatures(f.frames * np.maximum(stats.std, eps) + stats.mean, f.frame_ms, f.hop_ms)


# -- augmentation ----------------------------------------------------------------------

@dataclass
class AugmentPolicy:
    p_noise: float = 0.4
    p_reverb: float = 0.4
    snr_db: tuple = (5.0, 20.0)
    rt60: tuple = (0.1, 0.5)
    noise_kinds: tuple = ("white", "babble")


def _peak_renorm(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x))
    return x / peak if peak > 1.0 else x


def power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def add_noise(x: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Mix ``noise`` into ``x`` at ``snr_db``; infinite SNR returns ``x`` untouched."""
    if np.isinf(snr_db):
        return x.copy()
    pn = power(noise)
    if pn == 0.0:
        return x.copy()
    gain = np.sqrt(power(x) / (pn * 10.0 ** (snr_db / 10.0)))
    return _peak_renorm(x + gain * noise)


def reverberate(x: np.ndarray, rir: np.ndarray) -> np.ndarray:
    y = signal.convolve(x, rir, mode="full")[: x.size]
    return _peak_renorm(y)


def synth_rir(rng: np.random.Generator, rt60: float, sample_rate=SAMPLE_RATE) -> np.ndarray:
    """Exponentially decaying white noise with a unit direct path."""
    n = max(int(rt60 * sample_rate), 2)
    t = np.arange(n) / sample_rate
    h = rng.standard_normal(n) * np.exp(-6.9078 * t / rt60) * 0.3
    h[0] = 1.0
    return h


def synth_noise(rng: np.random.Generator, n: int, kind: str = "white", sample_rate=SAMPLE_RATE) -> np.ndarray:
    white = rng.standard_normal(n)
    if kind == "white":
        return white
    if kind == "babble":
        # speech-shaped spectrum, syllable-rate amplitude modulation
        b, a = signal.butter(2, [200 / (sample_rate / 2), 3500 / (sample_rate / 2)], btype="band")
        shaped = signal.lfilter(b, a, white)
        t = np.arange(n) / sample_rate
        env = 1.0 + 0.6 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
        return shaped * env
    raise ConfigError(f"unknown noise kind {kind!r}")


def augment(w: Waveform, policy: AugmentPolicy | str, rng: np.random.Generator) -> Waveform:
    """Apply one of {noise, reverb, none}; length is preserved."""
    x = w.samples
    if isinstance(policy, str):
        choice = policy
        policy = AugmentPolicy()
    else:
        r = rng.random()
        choice = "noise" if r < policy.p_noise else "reverb" if r < policy.p_noise + policy.p_reverb else "none"
    if choice == "none":
        return Waveform(x.copy(), w.sample_rate)
    if choice == "noise":
        kind = policy.noise_kinds[rng.integers(len(policy.noise_kinds))]
        snr = rng.uniform(*policy.snr_db)
        return Waveform(add_noise(x, synth_noise(rng, x.size, kind, w.sample_rate), snr), w.sample_rate)
    if choice == "reverb":
        rir = synth_rir(rng, rng.uniform(*policy.rt60), w.sample_rate)
        return Waveform(reverberate(x, rir), w.sample_rate)
    raise ConfigError(f"unknown augmentation {choice!r}")


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Linear-interpolation resampling to ``round(n / factor)`` samples."""
    if not any(np.isclose(factor, f) for f in SPEED_FACTORS):
        raise ConfigError(f"speed factor {factor} not in {SPEED_FACTORS}")
    x = w.samples
    if factor == 1.0:
        return Waveform(x.copy(), w.sample_rate)
    m = int(round(x.size / factor))
    pos = np.arange(m) * factor
    return Waveform(np.interp(pos, np.arange(x.size), x), w.sample_rate)


# -- synthetic corpus --------------------------------------------------------------------

# shared "phone" inventory: formant triples (Hz) for a neutral vocal tract
VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [530, 1840, 2480], [300, 870, 2240],
    [660, 1720, 2410], [490, 1350, 1690], [570, 840, 2410], [440, 1020, 2240],
])


@dataclass
class SynthSpeaker:
    speaker_id: str
    seed: int
    f0: float = field(init=False)
    tract: float = field(init=False)
    tilt: float = field(init=False)
    breath: float = field(init=False)
    res_freqs: np.ndarray = field(init=False)
    res_bw: np.ndarray = field(init=False)
    accent: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.f0 = float(np.exp(rng.uniform(np.log(85), np.log(255))))
        self.tract = float(rng.uniform(0.82, 1.18))
        self.tilt = float(rng.uniform(0.5, 0.95))
        self.breath = float(rng.uniform(0.02, 0.25))
        self.res_freqs = np.sort(rng.uniform(300, 6500, size=4))
        self.res_bw = rng.uniform(80, 400, size=4)
        # per-vowel formant offsets: a dynamic cue that survives per-utterance normalisation
        self.accent = rng.uniform(0.9, 1.1, size=VOWELS.shape)

    @property
    def signature(self) -> np.ndarray:
        return np.concatenate([[self.f0, self.tract, self.tilt, self.breath], self.res_freqs, self.res_bw,
                               self.accent.ravel()])


def _resonator(freq, bw, sample_rate=SAMPLE_RATE):
    r = np.exp(-np.pi * bw / sample_rate)
    theta = 2 * np.pi * freq / sample_rate
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([1.0 - r]), a


def _speaker_filter(x, spk: SynthSpeaker):
    y = x
    for f, bw in zip(spk.res_freqs, spk.res_bw):
        b, a = _resonator(f, bw)
        y = y + 0.6 * signal.lfilter(b, a, x)
    return signal.lfilter([1.0], [1.0, -spk.tilt], y)


def synth_utterance(spk: SynthSpeaker, rng: np.random.Generator, duration: float, sample_rate=SAMPLE_RATE) -> np.ndarray:
    """Glottal pulses and breath noise through per-phone formants, then the speaker's fixed colouring."""
    n = int(duration * sample_rate)
    out = np.zeros(n)
    pos = 0
    f0_drift = rng.uniform(0.95, 1.05)
    while pos < n:
        seg = int(rng.uniform(0.08, 0.2) * sample_rate)
        seg = min(seg, n - pos)
        if seg < 32:
            break
        t = np.arange(seg) / sample_rate
        voiced = rng.random() < 0.8
        if voiced:
            f0 = spk.f0 * f0_drift * rng.uniform(0.96, 1.04) * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(2, 6) * t))
            phase = np.cumsum(f0) / sample_rate
            exc = np.diff(np.floor(phase), prepend=0.0) + spk.breath * rng.standard_normal(seg) * 0.3
            v = rng.integers(len(VOWELS))
            formants = VOWELS[v] * spk.accent[v] / spk.tract * rng.uniform(0.98, 1.02, size=3)
            y = np.zeros(seg)
            for k, fk in enumerate(formants):
                b, a = _resonator(min(fk, 7500), 60 + 40 * k)
                y += signal.lfilter(b, a, exc) / (k + 1)
        else:
            y = 0.05 * rng.standard_normal(seg)
            b, a = _resonator(rng.uniform(3000, 6000) / spk.tract, 800)
            y = signal.lfilter(b, a, y) * 4
        env = np.ones(seg)
        ramp = min(160, seg // 2)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[seg - ramp:] = np.linspace(1, 0, ramp)
        out[pos:pos + seg] = y * env * rng.uniform(0.5, 1.0)
        pos += seg
    out = _speaker_filter(out, spk)
    peak = np.max(np.abs(out))
    if peak > 0:
        out = out / peak * rng.uniform(0.3, 0.9)
    return out


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    waveform: Waveform


@dataclass
class SynthCorpus:
    speakers: list[SynthSpeaker]
    utterances: list[Utterance]
    seed: int

    @property
    def speaker_ids(self) -> list[str]:
        return [s.speaker_id for s in self.speakers]

    def by_speaker(self) -> dict[str, list[Utterance]]:
        out: dict[str, list[Utterance]] = {s: [] for s in self.speaker_ids}
        for u in self.utterances:
            out[u.speaker_id].append(u)
        return out

    def class_labels(self, perturb: bool) -> list[tuple[str, float]]:
        """Training classes: one per speaker, or one per (speaker, speed factor)."""
        factors = SPEED_FACTORS if perturb else (1.0,)
        return [(s, f) for s in self.speaker_ids for f in factors]


def synth_dataset(n_speakers: int, utts_per_speaker: int, seed: int,
                  min_dur: float = 2.0, max_dur: float = 4.0, prefix: str = "spk") -> SynthCorpus:
    if n_speakers < 2:
        raise ValueError("need at least two speakers")
    root = np.random.SeedSequence(seed)
    spk_seqs = root.spawn(n_speakers)
    speakers, utts = [], []
    for i, ss in enumerate(spk_seqs):
        spk_seed, utt_seq = ss.spawn(2)
        spk = SynthSpeaker(f"{prefix}{i:03d}", int(spk_seed.generate_state(1)[0]))
        speakers.append(spk)
        rng = np.random.default_rng(utt_seq)
        for j in range(utts_per_speaker):
            x = synth_utterance(spk, rng, rng.uniform(min_dur, max_dur))
            utts.append(Utterance(f"{spk.speaker_id}-{j:03d}", spk.speaker_id, Waveform(x)))
    return SynthCorpus(speakers, utts, seed)


# -- trials --------------------------------------------------------------------------------

def make_trials(utts: list[Utterance], n_trials: int, rng: np.random.Generator) -> list[tuple[int, str, str]]:
    """Balanced (label, enroll, test) trials; label 1 = same speaker."""
    by_spk: dict[str, list[str]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u.utt_id)
    spks = sorted(s for s in by_spk)
    multi = [s for s in spks if len(by_spk[s]) >= 2]
    if len(spks) < 2 or not multi:
        raise ValueError("trial generation needs >= 2 speakers and one speaker with >= 2 utterances")
    seen = set()
    trials = []
    attempts = 0
    while len(trials) < n_trials and attempts < 50 * n_trials:
        attempts += 1
        target = len(trials) % 2 == 0
        if target:
            s = multi[rng.integers(len(multi))]
            a, b = rng.choice(len(by_spk[s]), size=2, replace=False)
            e, t = by_spk[s][a], by_spk[s][b]
        else:
            i, j = rng.choice(len(spks), size=2, replace=False)
            e = by_spk[spks[i]][rng.integers(len(by_spk[spks[i]]))]
            t = by_spk[spks[j]][rng.integers(len(by_spk[spks[j]]))]
        if (e, t) in seen:
            continue
        seen.add((e, t))
        trials.append((int(target), e, t))
    return trials


# -- file formats ------------------------------------------------------------------------------

def write_wav(path: str, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(path, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path: str) -> Waveform:
    with wave.open(path, "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        sr = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    # symmetric with write_wav; -32768 clips to -1
    return Waveform(np.maximum(pcm.astype(np.float64) / 32767.0, -1.0), sr)


def write_manifest(path: str, rows: list[tuple[str, str, str]]):
    with open(path, "w") as f:
        for utt, spk, wav in rows:
            f.write(f"{utt}\t{spk}\t{wav}\n")


def read_manifest(path: str) -> list[tuple[str, str, str]]:
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected utt_id<TAB>speaker_id<TAB>path")
            rows.append(tuple(parts))
    return rows


def save_corpus(corpus: SynthCorpus, out_dir: str, name: str = "train") -> str:
    wav_dir = os.path.join(out_dir, "wav", name)
    os.makedirs(wav_dir, exist_ok=True)
    rows = []
    for u in corpus.utterances:
        p = os.path.join("wav", name, f"{u.utt_id}.wav")
        write_wav(os.path.join(out_dir, p), u.waveform)
        rows.append((u.utt_id, u.speaker_id, p))
    manifest = os.path.join(out_dir, f"{name}.tsv")
    write_manifest(manifest, rows)
    return manifest


def load_manifest_utterances(manifest: str) -> list[Utterance]:
    base = os.path.dirname(os.path.abspath(manifest))
    out = []
    for utt, spk, p in read_manifest(manifest):
        full = p if os.path.isabs(p) else os.path.join(base, p)
        out.append(Utterance(utt, spk, read_wav(full)))
    return out

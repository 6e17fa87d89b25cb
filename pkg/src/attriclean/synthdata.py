"""Synthetic multi-stem songs and the contamination operators applied to them.

Stems live in roughly disjoint bands so a tiny frame-wise mask model can
separate them:

* vocals: harmonic stack (3 partials) with vibrato, f0 in 300-400 Hz
* bass:   low sinusoid, 40-120 Hz
* drums:  sparse exponentially decaying white-noise bursts
* other:  band-limited noise, 1.5-3.5 kHz, slow amplitude modulation

Corruption tags are ground truth. They ride along on :class:`StemSet` for
bookkeeping but are never written into the per-song corpus files (see
:mod:`attriclean.storage`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

from .dsp import SAMPLE_RATE

TARGETS = ("vocals", "bass", "drums", "other")
EFFECT_KINDS = ("distortion", "reverb", "lowpass")

CLEAN = "clean"
LABEL_NOISE = "label_noise"
BLEEDING = "bleeding"

DEFAULT_SONG_LENGTH = 6.0

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int | str) -> int:
    """Derive a child seed from ``master`` and a path of ints/strings.

    Each component is folded in with one splitmix64 round; strings are folded
    byte by byte. Result fits in 63 bits so it is a valid numpy seed.
    """
    state = splitmix64(master & _MASK64)
    for part in path:
        if isinstance(part, str):
            for b in part.encode():
                state = splitmix64(state ^ b)
            state = splitmix64(state ^ 0xFF)
        else:
            state = splitmix64(state ^ (part & _MASK64))
    return state >> 1


def is_effect(tag: str) -> bool:
    return tag.startswith("effect:")


def is_corrupted(tag: str) -> bool:
    return tag != CLEAN


@dataclass
class StemSet:
    id: str
    stems: dict[str, np.ndarray]
    mixture: np.ndarray
    corruption: str = CLEAN
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.mixture.size

    def stem(self, target: str) -> np.ndarray:
        return self.stems[target]


@dataclass(frozen=True)
class CorpusSpec:
    n_clean: int = 100
    n_label_noise: int = 50
    n_bleeding: int = 50
    n_effects: int = 0
    song_length: float = DEFAULT_SONG_LENGTH
    master_seed: int = 0
    prefix: str = "song"

    def __post_init__(self):
        counts = (self.n_clean, self.n_label_noise, self.n_bleeding, self.n_effects)
        if min(counts) < 0 or sum(counts) < 1:
            raise ValueError("corpus counts must be >= 0 with total >= 1")
        if self.song_length < 1.0:
            raise ValueError("song_length must be >= 1 s")

    @property
    def total(self) -> int:
        return self.n_clean + self.n_label_noise + self.n_bleeding + self.n_effects


def mix(stems: dict[str, np.ndarray]) -> np.ndarray:
    return np.sum(np.stack([stems[t] for t in TARGETS]), axis=0)


def _note_track(rng, n: int, sr: int, dur_range, f_range, rest_prob):
    """Piecewise-constant f0 and amplitude gate, with short linear ramps."""
    f0 = np.empty(n)
    gate = np.empty(n)
    pos = 0
    while pos < n:
        length = int(rng.uniform(*dur_range) * sr)
        end = min(n, pos + max(length, 1))
        f0[pos:end] = rng.uniform(*f_range)
        on = 0.0 if rng.random() < rest_prob else 1.0
        seg = np.full(end - pos, on)
        ramp = min(int(0.02 * sr), (end - pos) // 2)
        if ramp > 0:
            seg[:ramp] *= np.linspace(0.0, 1.0, ramp)
            seg[-ramp:] *= np.linspace(1.0, 0.0, ramp)
        gate[pos:end] = seg
        pos = end
    return f0, gate


def _vocals(rng, n, sr):
    f0, gate = _note_track(rng, n, sr, (0.4, 0.8), (300.0, 400.0), 0.15)
    t = np.arange(n) / sr
    rate = rng.uniform(5.0, 6.0)
    f_inst = f0 * (1.0 + 0.01 * np.sin(2 * np.pi * rate * t))
    phase = 2 * np.pi * np.cumsum(f_inst) / sr
    y = np.sin(phase) + 0.5 * np.sin(2 * phase) + 0.25 * np.sin(3 * phase)
    return 0.12 * gate * y


def _bass(rng, n, sr):
    f0, gate = _note_track(rng, n, sr, (0.25, 0.5), (40.0, 120.0), 0.1)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    return 0.3 * gate * np.sin(phase)


def _drums(rng, n, sr):
    y = np.zeros(n)
    step = int(0.25 * sr)
    for start in range(0, n, step):
        if rng.random() < 0.6:
            length = min(int(0.2 * sr), n - start)
            tau = rng.uniform(0.02, 0.06) * sr
            env = np.exp(-np.arange(length) / tau)
            y[start:start + length] += rng.uniform(0.15, 0.3) * env * rng.standard_normal(length)
    return y


def _other(rng, n, sr):
    sos = signal.butter(4, [1500.0, 3500.0], btype="bandpass", fs=sr, output="sos")
    y = signal.sosfilt(sos, rng.standard_normal(n))
    t = np.arange(n) / sr
    env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.2, 0.5) * t + rng.uniform(0, 2 * np.pi))
    y = y * env
    return 0.05 * y / (np.sqrt(np.mean(y * y)) + 1e-12)


def synth_clean_song(seed: int, length: float = DEFAULT_SONG_LENGTH, song_id: str | None = None,
                     sample_rate: int = SAMPLE_RATE) -> StemSet:
    if length < 1.0:
        raise ValueError("length must be >= 1 s")
    n = int(round(length * sample_rate))
    rng = np.random.default_rng(seed)
    stems = {
        "vocals": _vocals(rng, n, sample_rate),
        "bass": _bass(rng, n, sample_rate),
        "drums": _drums(rng, n, sample_rate),
        "other": _other(rng, n, sample_rate),
    }
    return StemSet(id=song_id or f"seed{seed}", stems=stems, mixture=mix(stems),
                   corruption=CLEAN, seed=seed, sample_rate=sample_rate)


def _require_clean(s: StemSet):
    if s.corruption != CLEAN:
        raise ValueError(f"{s.id}: expected a clean song, got {s.corruption!r}")


def corrupt_label_noise(s: StemSet, seed: int, pair: tuple[str, str] | None = None) -> StemSet:
    """Swap the stems of two targets; the mixture is left untouched."""
    _require_clean(s)
    if pair is None:
        rng = np.random.default_rng(seed)
        i, j = rng.choice(len(TARGETS), size=2, replace=False)
        pair = (TARGETS[min(i, j)], TARGETS[max(i, j)])
    a, b = pair
    stems = dict(s.stems)
    stems[a], stems[b] = s.stems[b], s.stems[a]
    return replace(s, stems=stems, corruption=LABEL_NOISE, meta={"swapped": list(pair)})


def corrupt_bleeding(s: StemSet, seed: int, gain_range=(0.1, 0.3)) -> StemSet:
    """Leak every other stem into each reference stem.

    stem'_t = c * (stem_t + sum_{u != t} g[t, u] * stem_u), with c chosen so the
    rebuilt mixture (sum of contaminated stems) keeps the original energy.
    """
    _require_clean(s)
    rng = np.random.default_rng(seed)
    lo, hi = gain_range
    gains = {t: {u: float(rng.uniform(lo, hi)) for u in TARGETS if u != t} for t in TARGETS}
    raw = {t: s.stems[t] + sum(g * s.stems[u] for u, g in gains[t].items()) for t in TARGETS}
    e_new = float(np.sum(mix(raw) ** 2))
    e_old = float(np.sum(s.mixture ** 2))
    c = np.sqrt(e_old / e_new) if e_new > 0 else 1.0
    stems = {t: c * raw[t] for t in TARGETS}
    return replace(s, stems=stems, mixture=mix(stems), corruption=BLEEDING,
                   meta={"gains": gains, "scale": float(c)})


DISTORTION_DRIVE_DB = 25.0
LOWPASS_CUTOFF_HZ = 3000.0
LOWPASS_ORDER = 4
REVERB_ROOM = 0.8
REVERB_DAMPING = 0.8
REVERB_WET = 0.5
REVERB_DRY = 0.4


def distortion(x: np.ndarray, drive_db: float = DISTORTION_DRIVE_DB) -> np.ndarray:
    return np.tanh(10.0 ** (drive_db / 20.0) * x)


def lowpass(x: np.ndarray, sr: int, cutoff: float = LOWPASS_CUTOFF_HZ,
            order: int = LOWPASS_ORDER) -> np.ndarray:
    """Zero-phase Butterworth low-pass (forward-backward, so |H|^2 overall)."""
    sos = signal.butter(order, cutoff, btype="low", fs=sr, output="sos")
    return signal.sosfiltfilt(sos, x)


_COMB_TUNING = (1116, 1188, 1277, 1356, 1422, 1491, 1557, 1617)
_ALLPASS_TUNING = (556, 441, 341, 225)


def reverb(x: np.ndarray, sr: int, room_size: float = REVERB_ROOM, damping: float = REVERB_DAMPING,
           wet: float = REVERB_WET, dry: float = REVERB_DRY) -> np.ndarray:
    """Mono Freeverb: 8 damped feedback combs in parallel, 4 allpasses in series.

    Parameter scaling follows the usual Freeverb constants (input gain 0.015,
    feedback 0.7 + 0.28*room, damping 0.4*damp, wet x3, dry x2). Delay lengths
    are the 44.1 kHz tunings rescaled to ``sr``. Output has the input's length.
    """
    feedback = 0.7 + 0.28 * room_size
    damp = 0.4 * damping
    scale = sr / 44100.0
    inp = 0.015 * x
    acc = np.zeros_like(x)
    for tuning in _COMB_TUNING:
        d = max(1, int(round(tuning * scale)))
        # y[n] = x[n-d] + feedback * lp(y)[n-d], lp one-pole with coefficient damp
        b = np.zeros(d + 2)
        b[d], b[d + 1] = 1.0, -damp
        a = np.zeros(d + 1)
        a[0], a[1] = 1.0, -damp
        a[d] += -feedback * (1.0 - damp)
        acc += signal.lfilter(b, a, inp)
    for tuning in _ALLPASS_TUNING:
        d = max(1, int(round(tuning * scale)))
        g = 0.5
        b = np.zeros(d + 1)
        b[0], b[d] = -1.0, 1.0 + g
        a = np.zeros(d + 1)
        a[0], a[d] = 1.0, -g
        acc = signal.lfilter(b, a, acc)
    return 3.0 * wet * acc + 2.0 * dry * x


def apply_effect(x: np.ndarray, kind: str, sr: int) -> np.ndarray:
    if kind == "distortion":
        return distortion(x)
    if kind == "reverb":
        return reverb(x, sr)
    if kind == "lowpass":
        return lowpass(x, sr)
    raise ValueError(f"unknown effect kind {kind!r}")


def corrupt_effect(s: StemSet, kind: str, seed: int = 0) -> StemSet:
    """Apply one audio effect to every stem and rebuild the mixture.

    The effects are deterministic; ``seed`` is accepted for operator symmetry.
    """
    if kind not in EFFECT_KINDS:
        raise ValueError(f"unknown effect kind {kind!r}")
    _require_clean(s)
    stems = {t: apply_effect(s.stems[t], kind, s.sample_rate) for t in TARGETS}
    return replace(s, stems=stems, mixture=mix(stems), corruption=f"effect:{kind}",
                   meta={"effect": kind})


def _effect_kinds(n: int, rng) -> list[str]:
    sizes = [len(part) for part in np.array_split(np.arange(n), len(EFFECT_KINDS))][::-1]
    kinds = [k for k, size in zip(EFFECT_KINDS, sizes) for _ in range(size)]
    return [kinds[i] for i in rng.permutation(n)]


def build_corpus(spec: CorpusSpec) -> list[StemSet]:
    """Generate ``spec.total`` songs with the requested contamination mix.

    Kinds are shuffled by ``master_seed`` before ids are assigned, so song ids
    carry no information about corruption.
    """
    rng = np.random.default_rng(derive_seed(spec.master_seed, "composition"))
    kinds = ([CLEAN] * spec.n_clean + [LABEL_NOISE] * spec.n_label_noise
             + [BLEEDING] * spec.n_bleeding)
    kinds += [f"effect:{k}" for k in _effect_kinds(spec.n_effects, rng)]
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]

    songs = []
    for idx, kind in enumerate(kinds):
        seed = derive_seed(spec.master_seed, spec.prefix, idx)
        s = synth_clean_song(seed, spec.song_length, song_id=f"{spec.prefix}{idx:04d}")
        corrupt_seed = derive_seed(seed, "corrupt")
        if kind == LABEL_NOISE:
            s = corrupt_label_noise(s, corrupt_seed)
        elif kind == BLEEDING:
            s = corrupt_bleeding(s, corrupt_seed)
        elif is_effect(kind):
            s = corrupt_effect(s, kind.split(":", 1)[1], corrupt_seed)
        songs.append(s)
    return songs


def clean_twin(s: StemSet, length: float | None = None) -> StemSet:
    """Regenerate the uncorrupted version of ``s`` from its seed."""
    if length is None:
        length = s.n_samples / s.sample_rate
    return synth_clean_song(s.seed, length, song_id=s.id, sample_rate=s.sample_rate)

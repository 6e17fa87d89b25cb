"""Per-song Fréchet distance filtering against a pooled clean reference set."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import dsp
from .attribution import filter_ranked
from .synthdata import TARGETS, StemSet

COV_REG = 1e-6


class FrechetError(ArithmeticError):
    pass


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n_frames: int

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass
class FadScore:
    song_id: str
    score: float
    embedding: str = "logmel-stems"


def _frames(e) -> np.ndarray:
    if isinstance(e, (list, tuple)):
        return np.concatenate([np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in e])
    return np.atleast_2d(np.asarray(e, dtype=np.float64))


def gaussian_stats(e, regularize: bool = True) -> GaussianStats:
    """Mean and unbiased covariance of embedding frames (rows).

    Accepts one (T, D) array or a list of them (pooled). The covariance is
    symmetrised and, when ``regularize``, gets ``1e-6 * trace / D`` added to
    the diagonal (a constant population falls back to ``1e-6 * I``).
    """
    x = _frames(e)
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least 2 frames")
    if n < d:
        warnings.warn(f"{n} frames for a {d}-dimensional embedding; covariance is rank deficient",
                      stacklevel=2)
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    if regularize:
        tr = float(np.trace(sigma))
        sigma = sigma + (COV_REG * (tr / d if tr > 0 else 1.0)) * np.eye(d)
    return GaussianStats(mu, sigma, n)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(sa: np.ndarray, sb: np.ndarray) -> float:
    """Tr((sa sb)^{1/2}) via the symmetric form sa^{1/2} sb sa^{1/2}."""
    try:
        root = _psd_sqrt(sa)
        w = np.linalg.eigvalsh(0.5 * ((root @ sb @ root) + (root @ sb @ root).T))
    except np.linalg.LinAlgError as exc:
        raise FrechetError(
            f"eigendecomposition failed (cond(sa)={np.linalg.cond(sa):.3g}, "
            f"cond(sb)={np.linalg.cond(sb):.3g})") from exc
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))))


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    diff = a.mu - b.mu
    tr = np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * trace_sqrt_product(a.sigma, b.sigma)
    return max(0.0, float(diff @ diff + tr))


def song_embedding(s: StemSet, n_mels: int = dsp.N_MELS) -> np.ndarray:
    """Per-frame concatenation of the four stems' log-mel vectors, (T, 4 * n_mels).

    Concatenating along the feature axis keeps stem identity, so a swap of two
    stems moves the song's embedding population.
    """
    parts = [dsp.log_mel_embed(dsp.stft_magnitude(s.stems[t]), n_mels) for t in TARGETS]
    return np.concatenate(parts, axis=1)


def reference_stats(refs, n_mels: int = dsp.N_MELS) -> GaussianStats:
    return gaussian_stats([song_embedding(s, n_mels) for s in refs])


def per_song_fad(song, ref: GaussianStats, song_id: str = "") -> FadScore:
    e = song if isinstance(song, np.ndarray) else song_embedding(song)
    if e.shape[0] < 2:
        raise ValueError("song shorter than 2 frames")
    if isinstance(song, StemSet):
        song_id = song_id or song.id
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = gaussian_stats(e)
    return FadScore(song_id, frechet_distance(stats, ref))


def fad_scores(corpus, refs, n_mels: int = dsp.N_MELS) -> list[FadScore]:
    ref = reference_stats(refs, n_mels)
    return [per_song_fad(song_embedding(s, n_mels), ref, s.id) for s in corpus]


def fad_filter(corpus, refs, ratio: float, n_mels: int = dsp.N_MELS):
    """Retain the ceil(ratio * N) songs closest to the reference population."""
    scores = fad_scores(corpus, refs, n_mels)
    kept = filter_ranked([s.score for s in scores], [s.song_id for s in scores], ratio,
                         higher_is_better=False)
    return kept, scores

"""Frame-wise mask estimator, one independent network per target.

mask = sigmoid(W2 @ relu(W1 @ x + b1) + b2), estimate = mask * x, where x is a
mixture magnitude frame. The loss is the mean squared error between the
estimate and the target-stem magnitude frame, averaged over frames and bins.
Gradients are derived by hand.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .synthdata import TARGETS, StemSet

log = logging.getLogger(__name__)

N_BINS = dsp.WINDOW // 2 + 1
N_HIDDEN = 32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelParams:
    theta: np.ndarray
    target: str
    n_bins: int = N_BINS
    n_hidden: int = N_HIDDEN

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.size != n_params(self.n_bins, self.n_hidden):
            raise ValueError("theta size does not match (n_bins, n_hidden)")

    def with_theta(self, theta: np.ndarray) -> ModelParams:
        return ModelParams(theta, self.target, self.n_bins, self.n_hidden)

    def copy(self) -> ModelParams:
        return self.with_theta(self.theta.copy())


def n_params(n_bins: int, n_hidden: int) -> int:
    return 2 * n_bins * n_hidden + n_hidden + n_bins


def unpack(theta: np.ndarray, n_bins: int, n_hidden: int):
    """Views (W1, b1, W2, b2) into the flat vector; layout W1|b1|W2|b2."""
    f, h = n_bins, n_hidden
    i = 0
    w1 = theta[i:i + h * f].reshape(h, f); i += h * f
    b1 = theta[i:i + h]; i += h
    w2 = theta[i:i + f * h].reshape(f, h); i += f * h
    b2 = theta[i:i + f]
    return w1, b1, w2, b2


def init_params(target: str, seed: int, n_bins: int = N_BINS, n_hidden: int = N_HIDDEN) -> ModelParams:
    rng = np.random.default_rng(seed)
    theta = np.zeros(n_params(n_bins, n_hidden))
    w1, b1, w2, b2 = unpack(theta, n_bins, n_hidden)
    w1[:] = rng.normal(0.0, math.sqrt(2.0 / n_bins), size=w1.shape)
    w2[:] = rng.normal(0.0, math.sqrt(1.0 / n_hidden), size=w2.shape)
    return ModelParams(theta, target, n_bins, n_hidden)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward_mask(p: ModelParams, frames: np.ndarray) -> np.ndarray:
    """Mask in (0, 1) for one frame (F,) or a batch (B, F)."""
    w1, b1, w2, b2 = unpack(p.theta, p.n_bins, p.n_hidden)
    a = np.maximum(frames @ w1.T + b1, 0.0)
    return _sigmoid(a @ w2.T + b2)


def loss_and_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray,
                  n_bins: int = N_BINS, n_hidden: int = N_HIDDEN):
    """MSE loss of ``mask(x) * x`` against ``y`` and its exact gradient.

    x, y: (B, F) mixture and target magnitudes. Returns (loss, grad) with grad
    laid out like ``theta``.
    """
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    w1, b1, w2, b2 = unpack(theta, n_bins, n_hidden)
    z1 = x @ w1.T + b1
    a = np.maximum(z1, 0.0)
    m = _sigmoid(a @ w2.T + b2)
    r = m * x - y
    loss = float(np.mean(r * r))

    grad = np.empty_like(theta)
    g_w1, g_b1, g_w2, g_b2 = unpack(grad, n_bins, n_hidden)
    dz2 = (2.0 / r.size) * r * x * m * (1.0 - m)
    np.matmul(dz2.T, a, out=g_w2)
    g_b2[:] = dz2.sum(axis=0)
    dz1 = dz2 @ w2
    dz1 *= z1 > 0.0
    np.matmul(dz1.T, x, out=g_w1)
    g_b1[:] = dz1.sum(axis=0)
    return loss, grad


def loss_gradient(p: ModelParams, batch) -> np.ndarray:
    x, y = batch
    return loss_and_grad(p.theta, x, y, p.n_bins, p.n_hidden)[1]


def batch_loss(p: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    est = forward_mask(p, x) * x
    return float(np.mean((est - y) ** 2))


@dataclass
class SongFeatures:
    """Magnitude spectrograms of one song: mixture and every target stem."""
    id: str
    mixture: np.ndarray
    targets: dict[str, np.ndarray]

    @property
    def n_frames(self) -> int:
        return self.mixture.shape[0]


def song_features(s: StemSet, window: int = dsp.WINDOW, hop: int = dsp.HOP) -> SongFeatures:
    mixture = dsp.stft_magnitude(s.mixture, window, hop).frames
    targets = {t: dsp.stft_magnitude(s.stems[t], window, hop).frames for t in TARGETS}
    return SongFeatures(s.id, mixture, targets)


def corpus_features(songs) -> list[SongFeatures]:
    return [f if isinstance(f, SongFeatures) else song_features(f) for f in songs]


@dataclass
class LossRecord:
    song_id: str
    target: str
    loss: float


def song_loss(p: ModelParams, s, target: str | None = None) -> LossRecord:
    """Frame-and-bin averaged MSE of one song for one target."""
    feats = s if isinstance(s, SongFeatures) else song_features(s)
    t = target or p.target
    return LossRecord(feats.id, t, batch_loss(p, feats.mixture, feats.targets[t]))


def song_gradient(p: ModelParams, feats: SongFeatures, target: str | None = None) -> np.ndarray:
    t = target or p.target
    return loss_gradient(p, (feats.mixture, feats.targets[t]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 1e-2
    batch: int = 64
    seed: int = 0
    n_hidden: int = N_HIDDEN
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    log: list[EpochRecord] = field(default_factory=list)


def mean_song_loss(p: ModelParams, feats: list[SongFeatures], target: str) -> float:
    return float(np.mean([batch_loss(p, f.mixture, f.targets[target]) for f in feats]))


def train_target(feats: list[SongFeatures], target: str, cfg: TrainConfig,
                 val_feats: list[SongFeatures] | None = None) -> TrainResult:
    """Adam with per-epoch cosine learning-rate decay; keeps the best-validation epoch.

    Epoch 0 in the log is the untrained initialisation. Without a validation
    set the training loss is used for checkpoint selection.
    """
    if not feats:
        raise ValueError("cannot train on an empty corpus")
    x_all = np.concatenate([f.mixture for f in feats])
    y_all = np.concatenate([f.targets[target] for f in feats])
    n_bins = x_all.shape[1]
    params = init_params(target, cfg.seed, n_bins, cfg.n_hidden)
    theta = params.theta
    rng = np.random.default_rng([cfg.seed, TARGETS.index(target)])
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0

    def val_loss(p):
        if val_feats:
            return mean_song_loss(p, val_feats, target)
        return mean_song_loss(p, feats, target)

    history = [EpochRecord(0, mean_song_loss(params, feats, target), val_loss(params))]
    best_theta, best_val, best_epoch = theta.copy(), math.inf, 0
    n = x_all.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, g = loss_and_grad(theta, x_all[idx], y_all[idx], n_bins, cfg.n_hidden)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"{target}: non-finite loss at epoch {epoch}, step {step}")
            step += 1
            m1 *= cfg.beta1
            m1 += (1.0 - cfg.beta1) * g
            m2 *= cfg.beta2
            m2 += (1.0 - cfg.beta2) * g * g
            corr = math.sqrt(1.0 - cfg.beta2 ** step) / (1.0 - cfg.beta1 ** step)
            theta -= (lr * corr) * m1 / (np.sqrt(m2) + 1e-8)
            total += loss * idx.size
            count += idx.size
        current = params.with_theta(theta)
        v = val_loss(current)
        if not math.isfinite(v):
            raise TrainingDiverged(f"{target}: non-finite validation loss at epoch {epoch}")
        history.append(EpochRecord(epoch, total / count, v))
        if v < best_val:
            best_theta, best_val, best_epoch = theta.copy(), v, epoch
        log.debug("%s epoch %d train %.5f val %.5f", target, epoch, total / count, v)
    return TrainResult(params.with_theta(best_theta), best_epoch, history)


def train(corpus, cfg: TrainConfig, val=None, targets=TARGETS) -> dict[str, TrainResult]:
    """Train one model per target.

    ``corpus`` is either a list of songs shared by every target or a mapping
    target -> list of songs (per-target cleaned sets).
    """
    val_feats = corpus_features(val) if val else None
    results = {}
    for t in targets:
        songs = corpus[t] if isinstance(corpus, dict) else corpus
        results[t] = train_target(corpus_features(songs), t, cfg, val_feats)
    return results


def _pad_for_overlap_add(x: np.ndarray, window: int, hop: int):
    left = window - hop
    total = left + x.size + window
    total += (-(total - window)) % hop
    return np.pad(x, (left, total - left - x.size)), left


def separate(params: dict[str, ModelParams], mixture, window: int = dsp.WINDOW,
             hop: int = dsp.HOP, masks: dict[str, np.ndarray | float] | None = None):
    """Masked-magnitude, mixture-phase resynthesis for every target.

    ``masks`` forces a fixed mask per target (used for round-trip checks).
    """
    x = np.asarray(getattr(mixture, "samples", mixture), dtype=np.float64)
    padded, left = _pad_for_overlap_add(x, window, hop)
    spec = dsp.stft(padded, window, hop)
    mag = np.abs(spec)
    out = {}
    names = list(params) if params else list(masks or {})
    for t in names:
        if masks is not None and t in masks:
            mask = masks[t]
        else:
            mask = forward_mask(params[t], mag)
        y = dsp.istft(spec * mask, padded.size, window, hop)
        out[t] = y[left:left + x.size]
    return out


def evaluate_sdr(params: dict[str, ModelParams], songs: list[StemSet]) -> dict[str, list[float]]:
    """Per-target list of SDRs, one per song with a non-silent target stem."""
    scores: dict[str, list[float]] = {t: [] for t in params}
    for s in songs:
        est = separate(params, s.mixture)
        for t in params:
            if np.any(s.stems[t]):
                scores[t].append(dsp.sdr(s.stems[t], est[t]))
    return scores


def sdr_summary(scores: dict[str, list[float]]) -> dict[str, float]:
    """Per-target median SDR plus their mean under key ``"mean"``."""
    med = {t: float(np.median(v)) for t, v in scores.items()}
    med["mean"] = float(np.mean([med[t] for t in scores]))
    return med

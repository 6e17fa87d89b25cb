"""Instrument-classifier baseline: a frame-level MLP trained on clean reference
stems; songs are ranked by the mean probability of their labelled class."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dsp
from .attribution import filter_ranked
from .synthdata import TARGETS, StemSet

N_HIDDEN = 256
DROPOUT = 0.5
# frames more than 60 dB (magnitude) below the stem's loudest frame carry no
# instrument evidence and are skipped
SILENCE_GATE = math.log(1e3)


class ClassifierDiverged(RuntimeError):
    pass


@dataclass
class ClassifierParams:
    theta: np.ndarray
    mean: np.ndarray  # input standardisation
    std: np.ndarray
    n_in: int
    n_hidden: int = N_HIDDEN
    n_classes: int = len(TARGETS)
    classes: tuple[str, ...] = TARGETS


def n_params(n_in: int, n_hidden: int = N_HIDDEN, n_classes: int = len(TARGETS)) -> int:
    return n_hidden * n_in + n_hidden + n_classes * n_hidden + n_classes


def unpack(theta, n_in, n_hidden=N_HIDDEN, n_classes=len(TARGETS)):
    i = 0
    w1 = theta[i:i + n_hidden * n_in].reshape(n_hidden, n_in); i += n_hidden * n_in
    b1 = theta[i:i + n_hidden]; i += n_hidden
    w2 = theta[i:i + n_classes * n_hidden].reshape(n_classes, n_hidden); i += n_classes * n_hidden
    b2 = theta[i:i + n_classes]
    return w1, b1, w2, b2


def stem_frames(x: np.ndarray, n_mels: int = dsp.N_MELS, gate: bool = True) -> np.ndarray:
    """Log-mel frames of one stem, with near-silent frames dropped when ``gate``.

    Falls back to all frames if the gate would leave none.
    """
    e = dsp.log_mel_embed(dsp.stft_magnitude(x), n_mels)
    if not gate:
        return e
    peak = e.max(axis=1)
    keep = peak >= peak.max() - SILENCE_GATE
    return e[keep] if keep.any() else e


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def logits(theta, x, n_in, n_hidden=N_HIDDEN, n_classes=len(TARGETS), drop_mask=None):
    w1, b1, w2, b2 = unpack(theta, n_in, n_hidden, n_classes)
    h = np.maximum(x @ w1.T + b1, 0.0)
    if drop_mask is not None:
        h = h * drop_mask
    return h @ w2.T + b2


def loss_and_grad(theta, x, labels, n_in, n_hidden=N_HIDDEN, n_classes=len(TARGETS), drop_mask=None):
    """Mean cross-entropy and its gradient. ``drop_mask`` (B, H) is applied to
    the hidden activations as-is (already scaled for inverted dropout)."""
    w1, b1, w2, b2 = unpack(theta, n_in, n_hidden, n_classes)
    z1 = x @ w1.T + b1
    h = np.maximum(z1, 0.0)
    hd = h * drop_mask if drop_mask is not None else h
    p = softmax(hd @ w2.T + b2)
    b = x.shape[0]
    loss = -float(np.mean(np.log(p[np.arange(b), labels] + 1e-300)))

    grad = np.empty_like(theta)
    g_w1, g_b1, g_w2, g_b2 = unpack(grad, n_in, n_hidden, n_classes)
    dz2 = p.copy()
    dz2[np.arange(b), labels] -= 1.0
    dz2 /= b
    g_w2[:] = dz2.T @ hd
    g_b2[:] = dz2.sum(axis=0)
    dh = dz2 @ w2
    if drop_mask is not None:
        dh *= drop_mask
    dz1 = dh * (z1 > 0.0)
    g_w1[:] = dz1.T @ x
    g_b1[:] = dz1.sum(axis=0)
    return loss, grad


def labelled_frames(songs, n_mels: int = dsp.N_MELS):
    xs, ys = [], []
    for s in songs:
        for k, t in enumerate(TARGETS):
            e = stem_frames(s.stems[t], n_mels)
            xs.append(e)
            ys.append(np.full(e.shape[0], k))
    return np.concatenate(xs), np.concatenate(ys)


def train_classifier(refs: list[StemSet], seed: int = 0, epochs: int = 30, lr: float = 1e-3,
                     batch: int = 128, n_mels: int = dsp.N_MELS,
                     n_hidden: int = N_HIDDEN, dropout: float = DROPOUT) -> ClassifierParams:
    """Adam on frame-level cross-entropy with inverted dropout on the hidden layer."""
    if not refs:
        raise ValueError("need at least one reference song")
    x, y = labelled_frames(refs, n_mels)
    mean = x.mean(axis=0)
    std = x.std(axis=0) + 1e-6
    x = (x - mean) / std
    n_in = x.shape[1]
    rng = np.random.default_rng(seed)
    theta = np.zeros(n_params(n_in, n_hidden))
    w1, _, w2, _ = unpack(theta, n_in, n_hidden)
    w1[:] = rng.normal(0.0, math.sqrt(2.0 / n_in), size=w1.shape)
    w2[:] = rng.normal(0.0, math.sqrt(1.0 / n_hidden), size=w2.shape)
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    keep = 1.0 - dropout
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, order.size, batch):
            idx = order[start:start + batch]
            mask = (rng.random((idx.size, n_hidden)) < keep) / keep if dropout > 0 else None
            loss, g = loss_and_grad(theta, x[idx], y[idx], n_in, n_hidden, drop_mask=mask)
            if not math.isfinite(loss):
                raise ClassifierDiverged(f"non-finite loss at step {step}")
            step += 1
            m1 = 0.9 * m1 + 0.1 * g
            m2 = 0.999 * m2 + 0.001 * g * g
            corr = math.sqrt(1.0 - 0.999 ** step) / (1.0 - 0.9 ** step)
            theta -= lr * corr * m1 / (np.sqrt(m2) + 1e-8)
    return ClassifierParams(theta, mean, std, n_in, n_hidden)


def predict_proba(c: ClassifierParams, frames: np.ndarray) -> np.ndarray:
    """Per-frame class probabilities (inference: no dropout)."""
    x = (frames - c.mean) / c.std
    return softmax(logits(c.theta, x, c.n_in, c.n_hidden, c.n_classes))


@dataclass
class ClassProbability:
    song_id: str
    target: str
    p_correct: float


def song_class_score(c: ClassifierParams, s: StemSet, target: str,
                     n_mels: int = dsp.N_MELS) -> ClassProbability:
    p = predict_proba(c, stem_frames(s.stems[target], n_mels))
    return ClassProbability(s.id, target, float(p[:, c.classes.index(target)].mean()))


def song_scores(c: ClassifierParams, corpus, n_mels: int = dsp.N_MELS) -> np.ndarray:
    """Mean p_correct over the four targets, one per song."""
    return np.array([np.mean([song_class_score(c, s, t, n_mels).p_correct for t in TARGETS])
                     for s in corpus])


def cls_filter(corpus, c: ClassifierParams, ratio: float, n_mels: int = dsp.N_MELS):
    scores = song_scores(c, corpus, n_mels)
    return filter_ranked(scores, [s.id for s in corpus], ratio), scores

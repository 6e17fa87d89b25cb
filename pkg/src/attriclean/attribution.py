"""Unlearning-based data attribution.

For each target model: compute the diagonal Fisher over the training set,
unlearn each clean reference song with an inverse-Fisher-scaled gradient
ascent step, and record how every training song's loss moves. Songs whose
loss barely rises (or falls) when clean material is forgotten are the least
aligned with clean data and are filtered first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sepmodel
from .sepmodel import ModelParams, SongFeatures
from .synthdata import TARGETS

RELATIVE_STEP = 1e-3
FLOOR_RELATIVE = 1e-8
FLOOR_ABSOLUTE = 1e-12


class UnlearningDiverged(RuntimeError):
    pass


@dataclass
class FisherDiagonal:
    values: np.ndarray  # raw (unfloored) squared-gradient averages
    n_samples: int
    target: str = ""

    def floor(self, fisher_floor: float | None = None) -> float:
        if fisher_floor is not None:
            return fisher_floor
        top = float(self.values.max()) if self.values.size else 0.0
        return max(FLOOR_RELATIVE * top, FLOOR_ABSOLUTE)

    def floored(self, fisher_floor: float | None = None) -> np.ndarray:
        return np.maximum(self.values, self.floor(fisher_floor))


@dataclass(frozen=True)
class UnlearnConfig:
    """``alpha=None`` picks the step so the first update has norm
    ``relative_step * ||theta||``; ``n_train=None`` uses the Fisher's sample
    count; ``fisher_floor=None`` floors at max(1e-8 * max F, 1e-12)."""
    alpha: float | None = None
    steps: int = 1
    n_train: int | None = None
    fisher_floor: float | None = None
    relative_step: float = RELATIVE_STEP

    def __post_init__(self):
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.n_train is not None and self.n_train < 1:
            raise ValueError("n_train must be >= 1")


def per_song_gradients(p: ModelParams, feats: list[SongFeatures], target: str | None = None) -> np.ndarray:
    t = target or p.target
    return np.stack([sepmodel.song_gradient(p, f, t) for f in feats])


def fisher_diagonal(p: ModelParams, feats: list[SongFeatures], target: str | None = None,
                    loss_scale: float = 1.0) -> FisherDiagonal:
    """F_ii = mean over training songs of (d song_loss / d theta_i)^2."""
    if not feats:
        raise ValueError("empty training set")
    acc = np.zeros_like(p.theta)
    for f in feats:
        g = loss_scale * sepmodel.song_gradient(p, f, target)
        acc += g * g
    return FisherDiagonal(acc / len(feats), len(feats), target or p.target)


def naive_unlearn(p: ModelParams, y: SongFeatures, alpha: float, target: str | None = None) -> ModelParams:
    """theta + alpha * grad L(y, theta)."""
    g = sepmodel.song_gradient(p, y, target)
    return p.with_theta(p.theta + alpha * g)


def unlearn(p: ModelParams, fisher: FisherDiagonal, y: SongFeatures, target: str | None = None,
            cfg: UnlearnConfig = UnlearnConfig()) -> tuple[ModelParams, float]:
    """EWC-scaled gradient ascent on one reference song.

    Each step: theta <- theta + (alpha / N) * grad / F_floored. Returns the
    new params and the alpha actually used. ``p`` is not modified.
    """
    t = target or p.target
    if fisher.values.shape != p.theta.shape:
        raise ValueError("Fisher diagonal does not match parameter shape")
    n = cfg.n_train if cfg.n_train is not None else fisher.n_samples
    inv = fisher.floored(cfg.fisher_floor)
    theta = p.theta.copy()
    alpha = cfg.alpha
    for _ in range(cfg.steps):
        g = sepmodel.song_gradient(p.with_theta(theta), y, t)
        direction = g / inv
        if alpha is None:
            norm = float(np.linalg.norm(direction)) / n
            alpha = cfg.relative_step * float(np.linalg.norm(p.theta)) / norm if norm > 0 else 0.0
        theta = theta + (alpha / n) * direction
        if not np.all(np.isfinite(theta)):
            raise UnlearningDiverged("unlearning diverged")
    return p.with_theta(theta), float(alpha)


def song_losses(p: ModelParams, feats: list[SongFeatures], target: str | None = None) -> np.ndarray:
    """Per-song mean loss, evaluated in one pass over the stacked frames."""
    t = target or p.target
    x = np.concatenate([f.mixture for f in feats])
    y = np.concatenate([f.targets[t] for f in feats])
    sq = ((sepmodel.forward_mask(p, x) * x - y) ** 2).mean(axis=1)
    lengths = np.array([f.n_frames for f in feats])
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return np.add.reduceat(sq, starts) / lengths


@dataclass
class AttributionMatrix:
    """delta[i, j, k] = L'_{i,j} - L_i for training song i, reference j, target k."""
    delta: np.ndarray
    baseline: np.ndarray  # (N, K)
    song_ids: list[str]
    ref_ids: list[str]
    targets: tuple[str, ...] = TARGETS
    alphas: np.ndarray | None = None  # (M, K)
    n_unlearn_runs: int = 0
    ref_targets: dict[str, list[int]] = field(default_factory=dict)

    @property
    def shape(self):
        return self.delta.shape


def attribution_matrix(params: dict[str, ModelParams], fishers: dict[str, FisherDiagonal],
                       feats: list[SongFeatures], refs: list[SongFeatures],
                       cfg: UnlearnConfig = UnlearnConfig(), targets=TARGETS) -> AttributionMatrix:
    """Unlearn each of the M references per target and measure all N loss changes.

    Runs exactly M unlearning passes per target.
    """
    ref_ids = {f.id for f in refs}
    if ref_ids & {f.id for f in feats}:
        raise ValueError("reference songs must be disjoint from the training corpus")
    n, m, k = len(feats), len(refs), len(targets)
    delta = np.zeros((n, m, k))
    baseline = np.zeros((n, k))
    alphas = np.zeros((m, k))
    runs = 0
    for ti, t in enumerate(targets):
        base = song_losses(params[t], feats, t)
        baseline[:, ti] = base
        for j, y in enumerate(refs):
            try:
                unlearned, alphas[j, ti] = unlearn(params[t], fishers[t], y, t, cfg)
            except UnlearningDiverged as exc:
                raise UnlearningDiverged(f"unlearning diverged (reference {y.id}, target {t})") from exc
            runs += 1
            delta[:, j, ti] = song_losses(unlearned, feats, t) - base
    return AttributionMatrix(delta, baseline, [f.id for f in feats], [f.id for f in refs],
                             tuple(targets), alphas, runs,
                             {t: list(range(m)) for t in targets})


def aggregate_unified(a: AttributionMatrix) -> np.ndarray:
    """Mean over every (reference, target) cell per song."""
    return a.delta.reshape(a.delta.shape[0], -1).mean(axis=1)


def aggregate_per_target(a: AttributionMatrix, target: str) -> np.ndarray:
    k = a.targets.index(target)
    cols = a.ref_targets.get(target, list(range(a.delta.shape[1])))
    if not cols:
        raise ValueError(f"no references for target {target!r}")
    return a.delta[:, cols, k].mean(axis=1)


def retained_count(n: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError("retention ratio must be in (0, 1]")
    # round first so 0.7 * 200 = 140.00000000000003 does not become 141
    return min(n, math.ceil(round(ratio * n, 9)))


def filter_ranked(scores, ids, ratio: float, higher_is_better: bool = True) -> list[str]:
    """Keep the best ceil(ratio * N) songs; ties go to the smaller song id.

    Returns the retained ids in rank order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(ids) != scores.size:
        raise ValueError("scores and ids differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    keep = retained_count(len(ids), ratio)
    sign = -1.0 if higher_is_better else 1.0
    order = sorted(range(len(ids)), key=lambda i: (sign * scores[i], ids[i]))
    return [ids[i] for i in order[:keep]]

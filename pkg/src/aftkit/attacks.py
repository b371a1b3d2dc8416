"""L-infinity PGD machinery and the four attack objectives: per-image
cross-entropy, batch-joint contrastive, CW cosine margin, and FARE
embedding distance. Attack objectives are maximized; gradients flow only
to the perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import encode_images, encode_texts
from .errors import ConfigError, NumericError
from .objectives import contrastive_loss, zero_shot_ce
from .tensor import Tensor

OBJECTIVES = ("ce", "contrastive", "cw", "fare")


@dataclass
class AttackConfig:
    epsilon: float
    step_size: float
    steps: int = 2
    init: str = "zero"              # zero | uniform
    objective: str = "ce"
    track_best: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.step_size < 0 or self.steps < 1:
            raise ConfigError(
                f"invalid attack config: eps={self.epsilon} step={self.step_size} "
                f"steps={self.steps}")
        if self.init not in ("zero", "uniform"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown attack objective {self.objective!r}")


@dataclass
class AttackBatch:
    """Inputs an attack may need; which fields are required depends on the
    objective: captions (token seqs) for contrastive/fare-in-training,
    labels + class_txt_emb for ce/cw.
    """
    images: np.ndarray                      # N x C x H x W (or N x D flat), in [0,1]
    token_seqs: list | None = None
    labels: np.ndarray | None = None
    class_txt_emb: Tensor | None = None     # K x d unit rows, constant

    @property
    def flat_images(self):
        arr = np.asarray(self.images, dtype=np.float64)
        return arr.reshape(arr.shape[0], -1)


@dataclass
class PerturbationBatch:
    delta: np.ndarray
    epsilon: float
    achieved_objective: float


def project_and_clamp(x, delta, epsilon):
    """Project delta into the eps-ball, then shrink so x+delta stays in [0,1].

    Already-feasible entries pass through bit-identically; the box and
    pixel-range invariants hold exactly (a short fixed-point loop absorbs
    float rounding at the 0/1 boundaries).
    """
    d = np.clip(delta, -epsilon, epsilon)
    for _ in range(4):
        adv = x + d
        lo, hi = adv < 0.0, adv > 1.0
        if not (lo.any() or hi.any()):
            break
        d = np.where(lo, -x, d)
        d = np.where(hi, np.clip(1.0 - x, -epsilon, epsilon), d)
        adv = x + d
        d = np.where(adv > 1.0, d - (adv - 1.0), d)
        d = np.where(adv < 0.0, d - adv, d)
    return d


def attack_objective(kind, state, batch, delta):
    """Scalar objective to be maximized, as a graph node over ``delta``.

    ``delta`` is a Tensor shaped like the flattened image batch.
    """
    x_adv = T.add(Tensor(batch.flat_images), delta)
    if kind == "contrastive":
        img = encode_images(state, x_adv)
        txt = _caption_embeddings(state, batch)
        return contrastive_loss(img, txt, state.tau)
    if kind == "fare":
        adv = encode_images(state, x_adv)
        clean = encode_images(state, Tensor(batch.flat_images)).detach()
        diff = T.sub(adv, clean)
        dists = T.sqrt(T.row_sum(T.mul(diff, diff)))
        return T.mean(dists)
    if kind in ("ce", "cw"):
        if batch.labels is None or batch.class_txt_emb is None:
            raise ConfigError(f"objective {kind!r} needs labels and class text embeddings")
        img = encode_images(state, x_adv)
        sims = T.matmul(img, T.transpose(batch.class_txt_emb.detach()))
        n = sims.data.shape[0]
        rows = np.arange(n)
        labels = np.asarray(batch.labels, dtype=np.int64)
        if kind == "ce":
            ls = T.log_softmax_rows(sims)
            return T.scale(T.mean(T.take(ls, rows, labels)), -1.0)
        # cw: mean margin between the best wrong class and the true class
        masked = sims.data.copy()
        masked[rows, labels] = -np.inf
        runner_up = masked.argmax(axis=1)
        return T.mean(T.sub(T.take(sims, rows, runner_up), T.take(sims, rows, labels)))
    raise ConfigError(f"unknown attack objective {kind!r}")


def _caption_embeddings(state, batch):
    if batch.token_seqs is None:
        raise ConfigError("contrastive attack needs caption token sequences")
    return encode_texts(state, batch.token_seqs).detach()


def pgd(cfg, state, batch, objective_fn=None):
    """Sign-gradient ascent with projection onto the eps-ball and pixel box.

    Returns the final iterate, or the best-scoring one (including the
    initial iterate) when ``track_best`` is on. ``objective_fn(state,
    batch, delta_tensor)`` overrides the configured objective (used for
    surrogate objectives in tests).
    """
    x = batch.flat_images
    if cfg.init == "uniform" and cfg.epsilon > 0:
        rng = np.random.default_rng(cfg.seed)
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    else:
        delta = np.zeros_like(x)
    delta = project_and_clamp(x, delta, cfg.epsilon)

    best_delta, best_val = delta.copy(), -np.inf
    for it in range(cfg.steps + 1):
        d = Tensor(delta, requires_grad=True)
        if objective_fn is not None:
            obj = objective_fn(state, batch, d)
        else:
            obj = attack_objective(cfg.objective, state, batch, d)
        val = obj.item()
        if np.isnan(val):
            raise NumericError(f"pgd: objective NaN at iteration {it}")
        if cfg.track_best and val > best_val:
            best_val, best_delta = val, delta.copy()
        if it == cfg.steps:
            break
        obj.backward()
        grad = d.grad if d.grad is not None else np.zeros_like(delta)
        delta = project_and_clamp(x, delta + cfg.step_size * np.sign(grad), cfg.epsilon)

    if cfg.track_best:
        delta, achieved = best_delta, best_val
    else:
        achieved = val
    return PerturbationBatch(delta=delta.reshape(np.asarray(batch.images).shape),
                             epsilon=cfg.epsilon, achieved_objective=achieved)

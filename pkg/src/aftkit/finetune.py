"""Training orchestration: clean contrastive pretraining, the adversarial
finetuning methods (advflyp, advflyp-full, tecoa, fare, naive-flyp), Adam,
cosine learning-rate annealing, and early stopping on a proxy robustness
score.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackBatch, AttackConfig, pgd
from .data import build_class_texts, class_caption
from .encoders import encode_images, encode_texts, snapshot_frozen, tokenize
from .errors import ConfigError, ContractError
from .objectives import (contrastive_loss, feature_reg, full_objective,
                         logit_matrices, logit_reg)
from .tensor import Tensor

METHODS = ("pretrain", "advflyp", "advflyp-full", "tecoa", "fare", "naive-flyp")
CONTRASTIVE_METHODS = ("pretrain", "advflyp", "advflyp-full", "naive-flyp")


@dataclass
class TrainConfig:
    method: str
    batch_size: int = 256
    lr0: float = 1e-4
    total_epochs: int = 20
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        epsilon=1 / 255, step_size=1 / 255, steps=2, objective="contrastive"))
    reg_logit: bool = False
    reg_feat: bool = False
    patience: int = 10
    max_token_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method in CONTRASTIVE_METHODS and self.batch_size < 2:
            raise ConfigError("contrastive methods need batch_size >= 2")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass
class TrainerState:
    model: object
    cfg: TrainConfig
    vocab: object
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    best_score: float = -math.inf
    since_improve: int = 0


def cosine_lr(step, total_steps, lr0):
    """Half-cosine decay from lr0 at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def adam_update(trainer, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step over ``params`` using the grads left by backward()."""
    trainer.adam_t += 1
    t = trainer.adam_t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = trainer.adam_m.setdefault(name, np.zeros_like(p.data))
        v = trainer.adam_v.setdefault(name, np.zeros_like(p.data))
        m[...] = beta1 * m + (1 - beta1) * g
        v[...] = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class Batch:
    """Fully materialized training batch."""
    images: np.ndarray                 # N x C x H x W in [0,1]
    token_seqs: list | None = None     # captions, for contrastive methods
    labels: np.ndarray | None = None   # for tecoa / naive-flyp
    class_token_seqs: list | None = None


def make_pair_batch(pairs, vocab, max_len):
    images = np.stack([p.image for p in pairs])
    seqs = [tokenize(p.caption, vocab, max_len) for p in pairs]
    return Batch(images=images, token_seqs=seqs)


def make_labeled_batch(images, labels, ds, vocab, max_len):
    """Batch for supervised methods; naive-flyp additionally gets template
    captions (duplicates within a batch are allowed).
    """
    captions = [class_caption(ds, l) for l in labels]
    seqs = [tokenize(c, vocab, max_len) for c in captions]
    class_seqs = build_class_texts(ds, vocab, max_len)
    return Batch(images=np.asarray(images), token_seqs=seqs,
                 labels=np.asarray(labels), class_token_seqs=class_seqs)


def _mean_ce(sims, labels):
    n = sims.data.shape[0]
    ls = T.log_softmax_rows(sims)
    return T.scale(T.mean(T.take(ls, np.arange(n), labels)), -1.0)


def train_step(trainer, batch, lr):
    """One optimization step of the configured method; returns loss parts."""
    cfg = trainer.cfg
    state = trainer.model
    method = cfg.method
    metrics = {"loss_clip": 0.0, "loss_logit": 0.0, "loss_feat": 0.0}

    if method == "pretrain":
        img = encode_images(state, batch.images)
        txt = encode_texts(state, batch.token_seqs)
        loss = contrastive_loss(img, txt, state.tau)
        metrics["loss_clip"] = loss.item()
        loss.backward()
        adam_update(trainer, {**state.theta, **state.phi}, lr)
        metrics["loss"] = metrics["loss_clip"]
        return metrics

    if state.theta0 is None:
        raise ContractError(f"method {method!r} requires snapshot_frozen first")

    flat = batch.images.reshape(batch.images.shape[0], -1)

    if method in ("advflyp", "advflyp-full", "naive-flyp"):
        if batch.token_seqs is None:
            raise ConfigError(f"method {method!r} needs caption texts")
        atk = replace(cfg.attack, objective="contrastive")
        pert = pgd(atk, state, AttackBatch(images=batch.images,
                                           token_seqs=batch.token_seqs))
        x_adv = Tensor(flat + pert.delta.reshape(flat.shape))
        txt = encode_texts(state, batch.token_seqs).detach()
        img_adv = encode_images(state, x_adv)
        use_reg = method == "advflyp-full" and (cfg.reg_logit or cfg.reg_feat)
        if use_reg:
            img_adv_frozen = encode_images(state, x_adv, use_frozen=True)
            img_clean = encode_images(state, batch.images)
            loss, parts = full_objective(img_adv, img_adv_frozen, img_clean, txt,
                                         state.tau, reg_logit=cfg.reg_logit,
                                         reg_feat=cfg.reg_feat)
            metrics.update(parts)
        else:
            loss = contrastive_loss(img_adv, txt, state.tau)
            metrics["loss_clip"] = loss.item()
    elif method == "tecoa":
        if batch.labels is None or batch.class_token_seqs is None:
            raise ConfigError("tecoa needs labels and class texts")
        class_emb = encode_texts(state, batch.class_token_seqs).detach()
        atk = replace(cfg.attack, objective="ce")
        pert = pgd(atk, state, AttackBatch(images=batch.images, labels=batch.labels,
                                           class_txt_emb=class_emb))
        x_adv = Tensor(flat + pert.delta.reshape(flat.shape))
        img_adv = encode_images(state, x_adv)
        sims = T.matmul(img_adv, T.transpose(class_emb))
        loss = _mean_ce(sims, batch.labels)
        metrics["loss_clip"] = loss.item()
        if cfg.reg_logit or cfg.reg_feat:
            img_adv_frozen = encode_images(state, x_adv, use_frozen=True)
            img_clean = encode_images(state, batch.images)
            if cfg.reg_logit:
                lt = logit_matrices(img_adv, img_adv_frozen, img_clean, class_emb)
                lreg = logit_reg(lt)
                metrics["loss_logit"] = lreg.item()
                loss = T.add(loss, lreg)
            if cfg.reg_feat:
                freg = feature_reg(img_adv, img_adv_frozen, img_clean)
                metrics["loss_feat"] = freg.item()
                loss = T.add(loss, freg)
    elif method == "fare":
        atk = replace(cfg.attack, objective="fare")
        pert = pgd(atk, state, AttackBatch(images=batch.images))
        x_adv = Tensor(flat + pert.delta.reshape(flat.shape))
        img_adv = encode_images(state, x_adv)
        target = encode_images(state, batch.images, use_frozen=True).detach()
        diff = T.sub(img_adv, target)
        loss = T.mean(T.sqrt(T.row_sum(T.mul(diff, diff))))
        metrics["loss_clip"] = loss.item()
    else:
        raise ConfigError(f"unknown method {method!r}")

    loss.backward()
    adam_update(trainer, state.theta, lr)  # finetuning updates theta only
    metrics["loss"] = loss.item()
    return metrics


def proxy_robust_accuracy(state, proxy_ds, vocab, attack_cfg, max_len=16):
    """Robust accuracy on the proxy set under a CE-objective PGD at the
    training-time budget.
    """
    from .evaluate import classify_batch

    class_seqs = build_class_texts(proxy_ds, vocab, max_len)
    class_emb = encode_texts(state, class_seqs).detach()
    atk = replace(attack_cfg, objective="ce", track_best=True)
    correct = 0
    n = len(proxy_ds.labels)
    for start in range(0, n, 128):
        imgs = proxy_ds.images[start:start + 128]
        lbls = proxy_ds.labels[start:start + 128]
        pert = pgd(atk, state, AttackBatch(images=imgs, labels=lbls,
                                           class_txt_emb=class_emb))
        preds = classify_batch(state, imgs + pert.delta, class_emb)
        correct += int((preds == lbls).sum())
    return correct / n


def _copy_model(state):
    new = copy.copy(state)
    new.theta = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in state.theta.items()}
    new.phi = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in state.phi.items()}
    return new


def run_training(cfg, state, train_data, proxy_ds, vocab, log_hook=None,
                 proxy_score_fn=None):
    """Epoch loop with per-step cosine LR, per-epoch proxy scoring, and
    early stopping; returns (best model, list of per-epoch log records).

    ``train_data`` is a list of ImageTextPairs for contrastive methods, or
    a (images, labels, ClassDataset) triple for tecoa / naive-flyp.
    ``proxy_score_fn`` overrides the proxy metric (used by tests).
    """
    supervised = cfg.method in ("tecoa", "naive-flyp")
    if supervised:
        images, labels, train_ds = train_data
        n_items = len(labels)
    else:
        n_items = len(train_data)
    if cfg.batch_size > n_items:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {n_items}")

    if cfg.method != "pretrain" and state.theta0 is None:
        snapshot_frozen(state)

    trainer = TrainerState(model=state, cfg=cfg, vocab=vocab)
    steps_per_epoch = n_items // cfg.batch_size
    total_steps = max(1, cfg.total_epochs * steps_per_epoch)
    log, best_model, step = [], _copy_model(state), 0
    best_model.theta0 = state.theta0

    for epoch in range(1, cfg.total_epochs + 1):
        trainer.epoch = epoch
        losses = {"loss": [], "loss_clip": [], "loss_logit": [], "loss_feat": []}
        rng = np.random.default_rng((cfg.seed, epoch))
        if supervised:
            order = rng.permutation(n_items)
            starts = range(0, steps_per_epoch * cfg.batch_size, cfg.batch_size)
            batches = (make_labeled_batch(images[order[s:s + cfg.batch_size]],
                                          labels[order[s:s + cfg.batch_size]],
                                          train_ds, vocab, cfg.max_token_len)
                       for s in starts)
        else:
            from .data import epoch_batches
            batches = (make_pair_batch(chunk, vocab, cfg.max_token_len)
                       for chunk in epoch_batches(train_data, cfg.batch_size,
                                                  cfg.seed, epoch))
        lr = cfg.lr0
        for batch in batches:
            lr = cosine_lr(step, total_steps, cfg.lr0)
            metrics = train_step(trainer, batch, lr)
            step += 1
            for k in losses:
                losses[k].append(metrics[k])

        if proxy_score_fn is not None:
            score = proxy_score_fn(state, epoch)
        else:
            score = proxy_robust_accuracy(state, proxy_ds, vocab, cfg.attack,
                                          cfg.max_token_len)
        record = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses["loss"])) if losses["loss"] else 0.0,
            "loss_clip": float(np.mean(losses["loss_clip"])) if losses["loss_clip"] else 0.0,
            "loss_logit": float(np.mean(losses["loss_logit"])) if losses["loss_logit"] else 0.0,
            "loss_feat": float(np.mean(losses["loss_feat"])) if losses["loss_feat"] else 0.0,
            "proxy_robust_acc": score,
            "lr": lr,
        }
        log.append(record)
        if log_hook is not None:
            log_hook(record)

        if score > trainer.best_score:
            trainer.best_score = score
            trainer.since_improve = 0
            best_model = _copy_model(state)
            best_model.theta0 = state.theta0
        else:
            trainer.since_improve += 1
            if trainer.since_improve >= cfg.patience:
                break

    return best_model, log

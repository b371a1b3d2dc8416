"""Scalar training objectives: bidirectional contrastive loss, zero-shot
cross-entropy, feature- and logit-level regularizers, and their sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

KL_FLOOR = 1e-12


def contrastive_loss(img_emb, txt_emb, tau):
    """Symmetric InfoNCE over in-batch cosine similarities scaled by 1/tau.

    Both inputs must be unit-row N x d with N >= 2; image i is matched to
    text i against all in-batch negatives, in both directions.
    """
    n = img_emb.data.shape[0]
    if n < 2:
        raise ContractError(f"contrastive_loss: batch of {n}, need at least 2")
    if txt_emb.data.shape != img_emb.data.shape:
        raise ShapeError(
            f"contrastive_loss: shapes {img_emb.data.shape} and {txt_emb.data.shape} differ")
    if tau <= 0:
        raise ContractError(f"contrastive_loss: tau must be positive, got {tau}")
    s = T.scale(T.matmul(img_emb, T.transpose(txt_emb)), 1.0 / tau)
    img_to_txt = T.take_diag(T.log_softmax_rows(s))
    txt_to_img = T.take_diag(T.log_softmax_rows(T.transpose(s)))
    return T.scale(T.add(T.tsum(img_to_txt), T.tsum(txt_to_img)), -1.0 / (2 * n))


def zero_shot_ce(img_emb, class_txt_emb, true_idx):
    """Cross-entropy of one image against K class texts, raw cosine logits
    (no temperature) inside the softmax.
    """
    k = class_txt_emb.data.shape[0]
    if not 0 <= true_idx < k:
        raise ContractError(f"zero_shot_ce: true_idx {true_idx} out of range for K={k}")
    s = T.matmul(img_emb, T.transpose(class_txt_emb))
    ls = T.log_softmax_rows(s)
    return T.scale(T.tsum(T.take(ls, [0], [true_idx])), -1.0)


def feature_reg(x_adv, x_adv_frozen, x_clean):
    """Frobenius drift of adversarial embeddings from the frozen-model and
    clean references, averaged over the batch; the frozen term is constant.
    """
    if x_adv.data.shape != x_adv_frozen.data.shape or x_adv.data.shape != x_clean.data.shape:
        raise ShapeError(
            f"feature_reg: shapes {x_adv.data.shape}, {x_adv_frozen.data.shape}, "
            f"{x_clean.data.shape} differ")
    n = x_adv.data.shape[0]
    drift_frozen = T.frobenius_norm(T.sub(x_adv, x_adv_frozen.detach()))
    drift_clean = T.frobenius_norm(T.sub(x_adv, x_clean))
    return T.scale(T.add(drift_frozen, drift_clean), 1.0 / n)


@dataclass
class LogitTriple:
    p_adv: Tensor
    p_adv_frozen: Tensor
    p_clean: Tensor


def logit_matrices(x_adv, x_adv_frozen, x_clean, txt_emb):
    """Row-softmax probability matrices of each embedding set against the
    text embeddings; no temperature is applied.
    """
    tt = T.transpose(txt_emb)
    return LogitTriple(
        p_adv=T.softmax_rows(T.matmul(x_adv, tt)),
        p_adv_frozen=T.softmax_rows(T.matmul(x_adv_frozen, tt)),
        p_clean=T.softmax_rows(T.matmul(x_clean, tt)),
    )


def _kl_rows_sum(p, q):
    # sum over all rows of KL(p_row || q_row), with a floor inside the logs
    logp = T.log(T.clamp_min(p, KL_FLOOR))
    logq = T.log(T.clamp_min(q, KL_FLOOR))
    return T.tsum(T.mul(p, T.sub(logp, logq)))


def logit_reg(lt):
    """KL of the adversarial logits against the frozen-model and clean
    references, summed over rows and scaled by 1/N; the frozen matrix is
    constant.
    """
    n = lt.p_adv.data.shape[0]
    kl_frozen = _kl_rows_sum(lt.p_adv, lt.p_adv_frozen.detach())
    kl_clean = _kl_rows_sum(lt.p_adv, lt.p_clean)
    return T.scale(T.add(kl_frozen, kl_clean), 1.0 / n)


def full_objective(img_adv_emb, img_adv_frozen_emb, img_clean_emb, txt_emb, tau,
                   reg_logit=True, reg_feat=True):
    """Contrastive loss on the adversarial batch plus the enabled
    regularizers (both weighted 1).
    """
    loss_clip = contrastive_loss(img_adv_emb, txt_emb, tau)
    loss = loss_clip
    loss_logit = loss_feat = None
    if reg_logit:
        lt = logit_matrices(img_adv_emb, img_adv_frozen_emb, img_clean_emb, txt_emb)
        loss_logit = logit_reg(lt)
        loss = T.add(loss, loss_logit)
    if reg_feat:
        loss_feat = feature_reg(img_adv_emb, img_adv_frozen_emb, img_clean_emb)
        loss = T.add(loss, loss_feat)
    return loss, {
        "loss_clip": loss_clip.item(),
        "loss_logit": loss_logit.item() if loss_logit is not None else 0.0,
        "loss_feat": loss_feat.item() if loss_feat is not None else 0.0,
    }

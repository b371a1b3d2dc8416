"""Zero-shot clean/robust evaluation, cosine-deviation statistics, and
embedding export.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackBatch, pgd
from .data import build_class_texts
from .encoders import encode_images, encode_texts
from .errors import ConfigError


@dataclass
class EvalReport:
    dataset: str
    n: int
    clean_acc: float
    attacks: list = field(default_factory=list)   # {name, eps, steps, robust_acc}
    phi_mean: float = 0.0
    phi_max: float = 0.0

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "n": self.n,
            "clean_acc": self.clean_acc,
            "attacks": self.attacks,
            "phi": {"mean": self.phi_mean, "max": self.phi_max},
        }


def zero_shot_predict(state, image, class_txt_emb):
    """Index of the class text with maximal cosine similarity; exact ties
    resolve to the lowest index.
    """
    if class_txt_emb.data.shape[0] == 0:
        raise ConfigError("zero_shot_predict: no classes")
    arr = np.asarray(image, dtype=np.float64).reshape(1, -1)
    emb = encode_images(state, arr).data
    sims = emb @ class_txt_emb.data.T
    return int(np.argmax(sims[0]))  # argmax returns the first (lowest) maximum


def classify_batch(state, images, class_txt_emb):
    arr = np.asarray(images, dtype=np.float64)
    emb = encode_images(state, arr.reshape(arr.shape[0], -1)).data
    sims = emb @ class_txt_emb.data.T
    return sims.argmax(axis=1)


def cosine_deviation(clean_emb, adv_emb):
    """Per-sample angle between clean and adversarial unit embeddings."""
    dots = np.clip((clean_emb.data * adv_emb.data).sum(axis=1), -1.0, 1.0)
    phis = np.arccos(dots)
    return phis, float(phis.mean())


def evaluate(state, ds, attack_cfgs, vocab, max_len=16, dataset_id="dataset",
             chunk=128):
    """Clean and per-attack robust accuracy plus cosine-deviation stats.

    Eval attacks always maximize label-based objectives (ce or cw); the
    deviation statistics use the first attack's perturbations.
    """
    for cfg in attack_cfgs:
        if cfg.objective not in ("ce", "cw"):
            raise ConfigError(
                f"eval attacks must use ce or cw objectives, got {cfg.objective!r}")
    class_seqs = build_class_texts(ds, vocab, max_len)
    class_emb = encode_texts(state, class_seqs).detach()
    n = len(ds.labels)

    preds = classify_batch(state, ds.images, class_emb)
    clean_acc = float((preds == ds.labels).mean())

    report = EvalReport(dataset=dataset_id, n=n, clean_acc=clean_acc)
    all_phis = None
    for cfg in attack_cfgs:
        correct = 0
        phis = []
        for start in range(0, n, chunk):
            imgs = ds.images[start:start + chunk]
            lbls = ds.labels[start:start + chunk]
            pert = pgd(cfg, state, AttackBatch(images=imgs, labels=lbls,
                                               class_txt_emb=class_emb))
            adv = imgs + pert.delta
            preds = classify_batch(state, adv, class_emb)
            correct += int((preds == lbls).sum())
            clean_e = encode_images(state, imgs.reshape(len(imgs), -1))
            adv_e = encode_images(state, adv.reshape(len(imgs), -1))
            phis.append(cosine_deviation(clean_e, adv_e)[0])
        report.attacks.append({
            "name": cfg.objective, "eps": cfg.epsilon, "steps": cfg.steps,
            "robust_acc": correct / n,
        })
        if all_phis is None:
            all_phis = np.concatenate(phis)
    if all_phis is not None and len(all_phis):
        report.phi_mean = float(all_phis.mean())
        report.phi_max = float(all_phis.max())
    return report


def export_embeddings(state, ds, attack_cfg, vocab, out_path, max_len=16, chunk=128):
    """TSV of clean and adversarial embeddings for external visualization."""
    class_seqs = build_class_texts(ds, vocab, max_len)
    class_emb = encode_texts(state, class_seqs).detach()
    cfg = replace(attack_cfg, objective="ce", track_best=True)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write("index\tlabel\tkind\t" +
                "\t".join(f"e{i}" for i in range(state.vision_cfg.embed_dim)) + "\n")
        n = len(ds.labels)
        for start in range(0, n, chunk):
            imgs = ds.images[start:start + chunk]
            lbls = ds.labels[start:start + chunk]
            pert = pgd(cfg, state, AttackBatch(images=imgs, labels=lbls,
                                               class_txt_emb=class_emb))
            clean_e = encode_images(state, imgs.reshape(len(imgs), -1)).data
            adv_e = encode_images(state, (imgs + pert.delta).reshape(len(imgs), -1)).data
            for i in range(len(lbls)):
                for kind, emb in (("clean", clean_e[i]), ("adv", adv_e[i])):
                    vals = "\t".join(f"{v:.8f}" for v in emb)
                    f.write(f"{start + i}\t{int(lbls[i])}\t{kind}\t{vals}\n")

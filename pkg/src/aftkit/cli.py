"""Command-line surface: synth, pretrain, finetune, eval,
export-embeddings.

Exit codes: 0 success, 2 config error, 3 data/format error, 4 numeric
error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .attacks import AttackConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (ClassDataset, DEFAULT_TEMPLATE, SynthSpec, load_class_dataset,
                   read_shard, save_class_dataset, synth_generate, write_shard)
from .encoders import EncoderConfig, Vocabulary, init_model
from .errors import ConfigError, ContractError, DataError, NumericError
from .evaluate import evaluate, export_embeddings
from .finetune import TrainConfig, run_training
from io import TextIOWrapper


def _save_vocab(vocab, ckpt_path):
    with open(ckpt_path + ".vocab", "w", encoding="utf-8") as f:
        for tok in vocab.tokens[1:]:   # OOV slot is implicit
            f.write(tok + "\n")


def _load_vocab(ckpt_path):
    path = ckpt_path + ".vocab"
    if not os.path.exists(path):
        raise DataError(f"missing vocabulary sidecar {path}")
    with open(path, "r", encoding="utf-8") as f:
        return Vocabulary([ln.strip() for ln in f if ln.strip()])


def _load_train_dir(data_dir):
    pairs = read_shard(os.path.join(data_dir, "train.shard"))
    proxy = load_class_dataset(os.path.join(data_dir, "eval"))
    return pairs, proxy


def cmd_synth(args):
    with open(args.spec, "r", encoding="utf-8") as f:
        spec = SynthSpec(**json.load(f))
    pairs, eval_ds = synth_generate(spec)
    os.makedirs(args.out, exist_ok=True)
    write_shard(pairs, os.path.join(args.out, "train.shard"))
    # training pairs are laid out concept-by-concept; record labels for
    # the supervised methods
    n_train_per = len(pairs) // spec.num_concepts
    with open(os.path.join(args.out, "train_labels.tsv"), "w", encoding="utf-8") as f:
        for i in range(len(pairs)):
            f.write(f"{i}\t{i // n_train_per}\n")
    with open(os.path.join(args.out, "classes.txt"), "w", encoding="utf-8") as f:
        for name in eval_ds.class_names:
            f.write(name + "\n")
    save_class_dataset(eval_ds, os.path.join(args.out, "eval"))
    print(f"wrote {len(pairs)} train pairs and {len(eval_ds.labels)} eval images to {args.out}")
    return 0


def _train_config(args, method):
    cfg_json = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            cfg_json = json.load(f)
    cfg_json.pop("model", None)
    attack_json = cfg_json.pop("attack", {})
    attack = AttackConfig(
        epsilon=attack_json.get("epsilon", 1 / 255),
        step_size=attack_json.get("step_size", 1 / 255),
        steps=attack_json.get("steps", 2),
        objective=attack_json.get("objective", "contrastive"),
    )
    reg_logit = getattr(args, "reg_logit", False)
    reg_feat = getattr(args, "reg_feat", False)
    if method == "advflyp-full" and not (reg_logit or reg_feat):
        reg_logit = reg_feat = True
    return TrainConfig(method=method, attack=attack, reg_logit=reg_logit,
                       reg_feat=reg_feat, **cfg_json)


def cmd_pretrain(args):
    pairs, proxy = _load_train_dir(args.data)
    cfg = _train_config(args, "pretrain")
    vocab = Vocabulary.from_texts([p.caption for p in pairs] +
                                  [DEFAULT_TEMPLATE.replace("[CLS]", c)
                                   for c in proxy.class_names])
    c, h, w = pairs[0].image.shape
    model_json = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            model_json = json.load(f).get("model", {})
    vision_cfg = EncoderConfig(input_dim=c * h * w,
                               hidden_dims=model_json.get("vision_hidden", [128]),
                               embed_dim=model_json.get("embed_dim", 16))
    text_cfg = EncoderConfig(input_dim=model_json.get("text_input_dim", 32),
                             hidden_dims=model_json.get("text_hidden", [32]),
                             embed_dim=model_json.get("embed_dim", 16))
    state = init_model(vision_cfg, text_cfg, tau=model_json.get("tau", 0.07),
                       seed=cfg.seed, vocab_size=len(vocab))
    best, log = run_training(cfg, state, pairs, proxy, vocab,
                             log_hook=_log_writer(args.out + ".log.jsonl"))
    save_checkpoint(best, args.out)
    _save_vocab(vocab, args.out)
    print(f"pretrain done: best proxy robust acc {max(r['proxy_robust_acc'] for r in log):.4f}")
    return 0


def _log_writer(path):
    f = open(path, "w", encoding="utf-8")

    def hook(record):
        f.write(json.dumps(record) + "\n")
        f.flush()
    return hook


def cmd_finetune(args):
    pairs, proxy = _load_train_dir(args.data)
    cfg = _train_config(args, args.method)
    state = load_checkpoint(args.init)
    vocab = _load_vocab(args.init)
    if cfg.method in ("tecoa", "naive-flyp"):
        labels = np.zeros(len(pairs), dtype=np.int64)
        with open(os.path.join(args.data, "train_labels.tsv"), "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    i, l = line.split("\t")
                    labels[int(i)] = int(l)
        with open(os.path.join(args.data, "classes.txt"), "r", encoding="utf-8") as f:
            names = [ln.strip() for ln in f if ln.strip()]
        images = np.stack([p.image for p in pairs])
        train_ds = ClassDataset(images=images, labels=labels, class_names=names)
        data = (images, labels, train_ds)
    else:
        data = pairs
    best, log = run_training(cfg, state, data, proxy, vocab,
                             log_hook=_log_writer(args.out + ".log.jsonl"))
    save_checkpoint(best, args.out)
    _save_vocab(vocab, args.out)
    print(f"finetune ({cfg.method}) done: best proxy robust acc "
          f"{max(r['proxy_robust_acc'] for r in log):.4f}")
    return 0


def _parse_attacks(text):
    cfgs = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        name, _, argstr = part.partition(":")
        if name not in ("pgd", "cw"):
            raise ConfigError(f"unknown eval attack {name!r}")
        kv = {}
        for item in argstr.split(","):
            if not item:
                continue
            k, _, v = item.partition("=")
            kv[k] = float(v)
        cfgs.append(AttackConfig(
            epsilon=kv.get("eps", 1 / 255),
            step_size=kv.get("step", kv.get("eps", 1 / 255) / 4),
            steps=int(kv.get("steps", 10)),
            objective="ce" if name == "pgd" else "cw",
            track_best=True,
        ))
    return cfgs


def cmd_eval(args):
    state = load_checkpoint(args.ckpt)
    vocab = _load_vocab(args.ckpt)
    ds = load_class_dataset(os.path.join(args.data, "eval"))
    cfgs = _parse_attacks(args.attacks)
    report = evaluate(state, ds, cfgs, vocab, dataset_id=args.data)
    payload = json.dumps(report.to_dict(), indent=2)
    with open(args.report, "w", encoding="utf-8") as f:
        f.write(payload + "\n")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write("metric,value\n")
            f.write(f"clean_acc,{report.clean_acc}\n")
            for a in report.attacks:
                f.write(f"robust_acc_{a['name']}_eps{a['eps']},{a['robust_acc']}\n")
    print(payload)
    return 0


def cmd_export(args):
    state = load_checkpoint(args.ckpt)
    vocab = _load_vocab(args.ckpt)
    ds = load_class_dataset(os.path.join(args.data, "eval"))
    cfg = AttackConfig(epsilon=args.eps, step_size=args.eps / 4, steps=10,
                       objective="ce", track_best=True)
    export_embeddings(state, ds, cfg, vocab, args.out)
    print(f"wrote embeddings to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="aftkit",
                                description="adversarial contrastive finetuning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("pretrain", help="clean contrastive pretraining")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("finetune", help="adversarial finetuning")
    sp.add_argument("--method", required=True,
                    choices=["advflyp", "advflyp-full", "tecoa", "fare", "naive-flyp"])
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--reg-logit", action="store_true", dest="reg_logit")
    sp.add_argument("--reg-feat", action="store_true", dest="reg_feat")
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("eval", help="zero-shot clean/robust evaluation")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--attacks", default="pgd:eps=0.00392,steps=10;cw:eps=0.00392,steps=10")
    sp.add_argument("--report", required=True)
    sp.add_argument("--csv", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("export-embeddings", help="dump clean/adversarial embeddings")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--eps", type=float, default=4 / 255)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

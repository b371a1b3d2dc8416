"""Desk-scale adversarial contrastive finetuning toolkit: a dual-encoder
model with reverse-mode autodiff, batch-joint PGD attacks, logit- and
feature-level regularizers, baseline finetuning methods, and a zero-shot
clean/robust evaluation harness.
"""

from .tensor import Tensor
from .encoders import (EncoderConfig, ModelState, Vocabulary, encode_images,
                       encode_texts, init_model, snapshot_frozen, tokenize)
from .checkpoint import load_checkpoint, save_checkpoint
from .objectives import (LogitTriple, contrastive_loss, feature_reg,
                         full_objective, logit_matrices, logit_reg, zero_shot_ce)
from .attacks import AttackBatch, AttackConfig, PerturbationBatch, attack_objective, pgd, project_and_clamp
from .finetune import TrainConfig, cosine_lr, run_training, train_step
from .data import ClassDataset, ImageTextPair, SynthSpec, synth_generate
from .evaluate import EvalReport, cosine_deviation, evaluate, zero_shot_predict

__version__ = "0.1.0"

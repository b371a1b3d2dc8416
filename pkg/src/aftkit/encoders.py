"""Dual-encoder model: vision MLP on flattened pixels, text MLP on
mean-pooled token embeddings, shared embedding dimension, plus the frozen
vision-encoder snapshot used as a constant reference during finetuning.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

_TOKEN_RE = re.compile(r"[a-z0-9]+")
OOV_INDEX = 0
OOV_TOKEN = "<oov>"


@dataclass
class EncoderConfig:
    input_dim: int          # C*H*W for vision; token embedding dim for text
    hidden_dims: list
    embed_dim: int
    nonlinearity: str = "relu"
    seed: int = 0

    def __post_init__(self):
        dims = [self.input_dim, self.embed_dim] + list(self.hidden_dims)
        if any(d <= 0 for d in dims):
            raise ConfigError(f"all encoder dims must be positive, got {dims}")
        if self.nonlinearity not in ("relu",):
            raise ConfigError(f"unsupported nonlinearity {self.nonlinearity!r}")


class Vocabulary:
    """Ordered token list with a reserved out-of-vocabulary slot at index 0."""

    def __init__(self, tokens):
        self.tokens = [OOV_TOKEN] + [t for t in tokens if t != OOV_TOKEN]
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def lookup(self, token):
        return self._index.get(token, OOV_INDEX)

    @classmethod
    def from_texts(cls, texts):
        seen = {}
        for text in texts:
            for tok in _TOKEN_RE.findall(text.lower()):
                seen.setdefault(tok, None)
        return cls(sorted(seen))


def tokenize(text, vocab, max_len):
    """Lowercase, split on whitespace/punctuation, map to indices, truncate."""
    words = _TOKEN_RE.findall(text.lower())
    return [vocab.lookup(w) for w in words][:max_len]


@dataclass
class ModelState:
    theta: dict                      # vision encoder parameters, name -> Tensor
    phi: dict                        # text encoder parameters (incl. token table)
    tau: float
    vision_cfg: EncoderConfig
    text_cfg: EncoderConfig
    theta0: dict | None = None       # frozen numpy copies, set by snapshot_frozen
    _snapshotted: bool = field(default=False, repr=False)


def _init_affine(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-a, a, size=(fan_in, fan_out))
    b = np.zeros(fan_out)
    return w, b


def _layer_dims(cfg):
    return [cfg.input_dim] + list(cfg.hidden_dims) + [cfg.embed_dim]


def init_model(vision_cfg, text_cfg, tau, seed, vocab_size):
    """Fresh ModelState with uniform Glorot weights and zero biases."""
    if vision_cfg.embed_dim != text_cfg.embed_dim:
        raise ConfigError(
            f"embed_dim mismatch: vision {vision_cfg.embed_dim} vs text {text_cfg.embed_dim}")
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    rng = np.random.default_rng(seed)
    theta = {}
    dims = _layer_dims(vision_cfg)
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        w, b = _init_affine(rng, fi, fo)
        theta[f"vision.layer{i}.w"] = Tensor(w, requires_grad=True)
        theta[f"vision.layer{i}.b"] = Tensor(b, requires_grad=True)
    phi = {}
    a = np.sqrt(6.0 / (vocab_size + text_cfg.input_dim))
    phi["text.embed"] = Tensor(rng.uniform(-a, a, size=(vocab_size, text_cfg.input_dim)),
                               requires_grad=True)
    dims = _layer_dims(text_cfg)
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        w, b = _init_affine(rng, fi, fo)
        phi[f"text.layer{i}.w"] = Tensor(w, requires_grad=True)
        phi[f"text.layer{i}.b"] = Tensor(b, requires_grad=True)
    return ModelState(theta=theta, phi=phi, tau=float(tau),
                      vision_cfg=vision_cfg, text_cfg=text_cfg)


def _mlp_forward(x, params, prefix, n_layers):
    h = x
    for i in range(n_layers):
        h = T.add_bias(T.matmul(h, params[f"{prefix}.layer{i}.w"]),
                       params[f"{prefix}.layer{i}.b"])
        if i < n_layers - 1:
            h = T.relu(h)
    return h


def encode_images(state, images, use_frozen=False):
    """Encode a batch of images to unit-norm rows.

    ``images`` may be a Tensor (N x CHW, already flat) or a numpy array of
    shape N x C x H x W. With ``use_frozen`` the frozen snapshot theta0 is
    used; no parameter gradient is recorded there, but gradient with
    respect to the input pixels still flows.
    """
    if not isinstance(images, Tensor):
        arr = np.asarray(images, dtype=np.float64)
        images = Tensor(arr.reshape(arr.shape[0], -1))
    elif images.data.ndim != 2:
        images = T.reshape(images, (images.data.shape[0], -1))
    if images.data.shape[1] != state.vision_cfg.input_dim:
        raise ShapeError(
            f"encode_images: batch has {images.data.shape[1]} pixels per image, "
            f"config expects {state.vision_cfg.input_dim}")
    lo, hi = images.data.min(), images.data.max()
    if lo < -0.05 or hi > 1.05:
        warnings.warn(f"encode_images: pixels outside [0,1] (range [{lo:.3g}, {hi:.3g}])")
    if use_frozen:
        if state.theta0 is None:
            raise ContractError("encode_images: use_frozen before snapshot_frozen")
        params = {name: Tensor(arr) for name, arr in state.theta0.items()}
    else:
        params = state.theta
    n_layers = len(state.vision_cfg.hidden_dims) + 1
    return T.l2_normalize_rows(_mlp_forward(images, params, "vision", n_layers))


def encode_texts(state, token_seqs):
    """Encode token sequences: embedding lookup, mean pool, MLP, unit rows.

    An empty sequence pools to the OOV embedding alone.
    """
    if len(token_seqs) == 0:
        raise ContractError("encode_texts: empty batch")
    embed = state.phi["text.embed"]
    pooled = []
    for seq in token_seqs:
        idx = list(seq) if len(seq) > 0 else [OOV_INDEX]
        rows = T.gather_rows(embed, idx)
        pooled.append(T.scale(T.matmul(Tensor(np.ones((1, len(idx)))), rows), 1.0 / len(idx)))
    h = pooled[0]
    for p in pooled[1:]:
        h = T.concat_rows(h, p)
    n_layers = len(state.text_cfg.hidden_dims) + 1
    return T.l2_normalize_rows(_mlp_forward(h, state.phi, "text", n_layers))


def snapshot_frozen(state):
    """Deep-copy theta into theta0; callable exactly once per state."""
    if state._snapshotted:
        raise ContractError("snapshot_frozen: already snapshotted")
    state.theta0 = {name: t.data.copy() for name, t in state.theta.items()}
    state._snapshotted = True
    return state

"""Dataset ingestion and generation: TSV manifests, packed binary shards,
labeled class datasets, the synthetic paired-data generator, template
texts, and seeded batch iteration.

Shard layout (little-endian): magic "AFLY", u32 version=1,
u32 record_count, then per record: u32 C, u32 H, u32 W,
f32 pixels[C*H*W], u32 caption_byte_len, UTF-8 caption bytes.
Labeled datasets add "labels.tsv" ("record_index<TAB>class_index") and
"classes.txt" (one class name per line) next to the shard.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError

SHARD_MAGIC = b"AFLY"
SHARD_VERSION = 1
DEFAULT_TEMPLATE = "This is a photo of a [CLS]."
PLACEHOLDER = "[CLS]"

# word stock for synthetic concept names; each concept draws a primary
# name plus synonyms so captions are not a pure label lookup
_CONCEPT_WORDS = [
    ["blicket", "blick", "blickets"],
    ["dax", "daxen", "daxes"],
    ["wug", "wuggle", "wugs"],
    ["toma", "tomal", "tomas"],
    ["fep", "feppo", "feps"],
    ["zorp", "zorple", "zorps"],
    ["quim", "quimba", "quims"],
    ["lorp", "lorpen", "lorps"],
    ["snib", "snibble", "snibs"],
    ["vark", "varkel", "varks"],
    ["gorp", "gorpal", "gorps"],
    ["mip", "mipple", "mips"],
]

_CAPTION_TEMPLATES = [
    "a photo of a {} object",
    "an image of a {} object",
    "a picture showing a {} object",
]


@dataclass
class ImageTextPair:
    image: np.ndarray       # C x H x W float64 in [0,1]
    caption: str


@dataclass
class ClassDataset:
    images: np.ndarray      # N x C x H x W
    labels: np.ndarray      # N ints < K
    class_names: list
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError("class names must be unique")
        if len(self.labels) and int(np.max(self.labels)) >= len(self.class_names):
            raise DataError("label index out of range")


@dataclass
class SynthSpec:
    num_concepts: int
    pairs_per_concept: int
    image_size: int
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.num_concepts <= 0 or self.pairs_per_concept <= 0 or self.image_size <= 0:
            raise ConfigError("SynthSpec dimensions must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if self.num_concepts > len(_CONCEPT_WORDS):
            raise ConfigError(f"at most {len(_CONCEPT_WORDS)} synthetic concepts supported")


def _quantize(img):
    # round through float32 so shard round-trips are bit-exact
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def synth_generate(spec):
    """Deterministic synthetic image-text corpus.

    Each concept gets a random pixel prototype and a small caption
    vocabulary; images are the prototype plus Gaussian noise. Returns
    (train pairs, held-out ClassDataset) from an 80/20 per-concept split.
    """
    rng = np.random.default_rng(spec.seed)
    c, h, w = 3, spec.image_size, spec.image_size
    pairs, eval_images, eval_labels = [], [], []
    n_eval = max(1, spec.pairs_per_concept // 5)
    n_train = spec.pairs_per_concept - n_eval
    class_names = [words[0] for words in _CONCEPT_WORDS[:spec.num_concepts]]
    for k in range(spec.num_concepts):
        proto = rng.uniform(0.0, 1.0, size=(c, h, w))
        words = _CONCEPT_WORDS[k]
        for i in range(spec.pairs_per_concept):
            img = _quantize(proto + rng.normal(0.0, spec.noise_sigma, size=(c, h, w)))
            if i < n_train:
                word = words[int(rng.integers(len(words)))]
                tpl = _CAPTION_TEMPLATES[int(rng.integers(len(_CAPTION_TEMPLATES)))]
                pairs.append(ImageTextPair(image=img, caption=tpl.format(word)))
            else:
                eval_images.append(img)
                eval_labels.append(k)
    ds = ClassDataset(images=np.stack(eval_images), labels=np.asarray(eval_labels),
                      class_names=class_names)
    return pairs, ds


def build_class_texts(ds, vocab, max_len=16):
    """Token sequences for each class via the dataset template, in class
    index order.
    """
    from .encoders import tokenize

    if PLACEHOLDER not in ds.template:
        raise ConfigError(f"template {ds.template!r} lacks the {PLACEHOLDER} placeholder")
    return [tokenize(ds.template.replace(PLACEHOLDER, name), vocab, max_len)
            for name in ds.class_names]


def class_caption(ds, label):
    """Template caption for one labeled image (naive contrastive batches)."""
    return ds.template.replace(PLACEHOLDER, ds.class_names[int(label)])


def epoch_batches(pairs, batch_size, seed, epoch, drop_last=True):
    """Seeded per-epoch shuffle; the final short batch is dropped so every
    contrastive batch has the same N.
    """
    if batch_size > len(pairs):
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {len(pairs)}")
    rng = np.random.default_rng((seed, epoch))
    order = rng.permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < batch_size and drop_last:
            break
        yield [pairs[i] for i in idx]


def write_shard(pairs, path):
    with open(path, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<II", SHARD_VERSION, len(pairs)))
        for p in pairs:
            img = np.ascontiguousarray(p.image, dtype="<f4")
            if img.ndim != 3:
                raise DataError(f"shard images must be C x H x W, got shape {img.shape}")
            f.write(struct.pack("<III", *img.shape))
            f.write(img.tobytes())
            cap = p.caption.encode("utf-8")
            f.write(struct.pack("<I", len(cap)))
            f.write(cap)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"shard truncated while reading {what}")
    return buf


def read_shard(path):
    pairs = []
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != SHARD_MAGIC:
            raise FormatError("shard: bad magic bytes")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != SHARD_VERSION:
            raise FormatError(f"shard: unsupported version {version}")
        for i in range(count):
            c, h, w = struct.unpack("<III", _read_exact(f, 12, f"record {i} dims"))
            n = c * h * w
            img = np.frombuffer(_read_exact(f, 4 * n, f"record {i} pixels"), dtype="<f4")
            img = img.reshape(c, h, w).astype(np.float64)
            if img.min() < 0.0 or img.max() > 1.0:
                raise DataError(f"shard record {i}: pixel outside [0,1]")
            (cap_len,) = struct.unpack("<I", _read_exact(f, 4, f"record {i} caption length"))
            cap = _read_exact(f, cap_len, f"record {i} caption").decode("utf-8")
            pairs.append(ImageTextPair(image=img, caption=cap))
    return pairs


def load_manifest(path):
    """Stream ImageTextPairs from a TSV manifest of shard-or-.npy references.

    Each line is "relative/image/path<TAB>caption"; image paths resolve
    relative to the manifest and must point at .npy pixel arrays.
    """
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"manifest line {lineno}: missing TAB separator")
            rel, caption = line.split("\t", 1)
            img_path = os.path.join(base, rel)
            if not os.path.exists(img_path):
                raise DataError(f"manifest line {lineno}: missing image file {img_path}")
            img = np.load(img_path).astype(np.float64)
            if img.min() < 0.0 or img.max() > 1.0:
                raise DataError(f"manifest line {lineno}: pixel outside [0,1]")
            yield ImageTextPair(image=img, caption=caption)


def save_class_dataset(ds, out_dir, shard_name="eval.shard"):
    """Shard + labels.tsv + classes.txt sidecars."""
    os.makedirs(out_dir, exist_ok=True)
    pairs = [ImageTextPair(image=img, caption=class_caption(ds, lbl))
             for img, lbl in zip(ds.images, ds.labels)]
    write_shard(pairs, os.path.join(out_dir, shard_name))
    with open(os.path.join(out_dir, "labels.tsv"), "w", encoding="utf-8") as f:
        for i, lbl in enumerate(ds.labels):
            f.write(f"{i}\t{int(lbl)}\n")
    with open(os.path.join(out_dir, "classes.txt"), "w", encoding="utf-8") as f:
        for name in ds.class_names:
            f.write(name + "\n")


def load_class_dataset(dir_path, shard_name="eval.shard", template=DEFAULT_TEMPLATE):
    pairs = read_shard(os.path.join(dir_path, shard_name))
    labels = np.zeros(len(pairs), dtype=np.int64)
    with open(os.path.join(dir_path, "labels.tsv"), "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            idx, lbl = line.split("\t")
            labels[int(idx)] = int(lbl)
    with open(os.path.join(dir_path, "classes.txt"), "r", encoding="utf-8") as f:
        class_names = [ln.strip() for ln in f if ln.strip()]
    images = np.stack([p.image for p in pairs])
    return ClassDataset(images=images, labels=labels, class_names=class_names,
                        template=template)

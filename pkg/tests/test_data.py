import numpy as np
import pytest

from aftkit import SynthSpec, synth_generate
from aftkit.data import (DEFAULT_TEMPLATE, ClassDataset, ImageTextPair,
                         build_class_texts, class_caption, epoch_batches,
                         load_class_dataset, load_manifest, read_shard,
                         save_class_dataset, write_shard)
from aftkit.encoders import Vocabulary
from aftkit.errors import ConfigError, DataError, FormatError

SPEC = SynthSpec(num_concepts=4, pairs_per_concept=20, image_size=4,
                 noise_sigma=0.05, seed=3)


class TestSynthGenerate:
    def test_split_arithmetic(self):
        spec = SynthSpec(num_concepts=8, pairs_per_concept=250, image_size=4,
                         noise_sigma=0.05, seed=7)
        pairs, ds = synth_generate(spec)
        assert len(pairs) == 1600
        assert len(ds.labels) == 400

    def test_same_seed_bit_identical(self):
        p1, d1 = synth_generate(SPEC)
        p2, d2 = synth_generate(SPEC)
        assert all(np.array_equal(a.image, b.image) for a, b in zip(p1, p2))
        assert all(a.caption == b.caption for a, b in zip(p1, p2))
        assert np.array_equal(d1.images, d2.images)

    def test_zero_noise_degenerate(self):
        spec = SynthSpec(num_concepts=2, pairs_per_concept=5, image_size=3,
                         noise_sigma=0.0, seed=1)
        pairs, ds = synth_generate(spec)
        first_concept = [p.image for p in pairs if pairs[0].caption.split()[-2]
                         in p.caption]
        assert all(np.array_equal(img, first_concept[0]) for img in first_concept)

    def test_pixels_in_range(self):
        pairs, ds = synth_generate(SPEC)
        for p in pairs:
            assert p.image.min() >= 0.0 and p.image.max() <= 1.0
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_nearest_prototype_separability(self):
        # brute-force oracle: concept means from the train split classify
        # the eval split perfectly at sigma <= 0.1
        spec = SynthSpec(num_concepts=4, pairs_per_concept=30, image_size=4,
                         noise_sigma=0.1, seed=5)
        pairs, ds = synth_generate(spec)
        n_train = len(pairs) // spec.num_concepts
        protos = np.stack([
            np.mean([p.image for p in pairs[k * n_train:(k + 1) * n_train]], axis=0)
            for k in range(spec.num_concepts)])
        flat = ds.images.reshape(len(ds.labels), -1)
        d2 = ((flat[:, None, :] - protos.reshape(4, -1)[None]) ** 2).sum(-1)
        assert (d2.argmin(axis=1) == ds.labels).all()

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            SynthSpec(num_concepts=0, pairs_per_concept=5, image_size=3,
                      noise_sigma=0.1, seed=0)
        with pytest.raises(ConfigError):
            SynthSpec(num_concepts=2, pairs_per_concept=5, image_size=3,
                      noise_sigma=-0.1, seed=0)


class TestShard:
    def test_round_trip_bit_exact(self, tmp_path):
        pairs, _ = synth_generate(SPEC)
        path = tmp_path / "train.shard"
        write_shard(pairs, path)
        loaded = read_shard(path)
        assert len(loaded) == len(pairs)
        for a, b in zip(pairs, loaded):
            assert np.array_equal(a.image, b.image)
            assert a.caption == b.caption

    def test_rewrite_byte_identical(self, tmp_path):
        pairs, _ = synth_generate(SPEC)
        p1, p2 = tmp_path / "a.shard", tmp_path / "b.shard"
        write_shard(pairs, p1)
        write_shard(read_shard(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.shard"
        p.write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(FormatError, match="magic"):
            read_shard(p)

    def test_truncated(self, tmp_path):
        pairs, _ = synth_generate(SPEC)
        p = tmp_path / "t.shard"
        write_shard(pairs, p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError, match="truncated"):
            read_shard(p)

    def test_labeled_dataset_round_trip(self, tmp_path):
        _, ds = synth_generate(SPEC)
        save_class_dataset(ds, tmp_path)
        loaded = load_class_dataset(tmp_path)
        assert np.array_equal(loaded.images, ds.images)
        assert np.array_equal(loaded.labels, ds.labels)
        assert loaded.class_names == ds.class_names


class TestManifest:
    def test_two_line_manifest(self, tmp_path):
        imgs = [np.random.default_rng(i).uniform(0, 1, (3, 2, 2)) for i in range(2)]
        for i, img in enumerate(imgs):
            np.save(tmp_path / f"img{i}.npy", img)
        mf = tmp_path / "manifest.tsv"
        mf.write_text("img0.npy\ta red thing\nimg1.npy\ta blue thing\n")
        pairs = list(load_manifest(mf))
        assert len(pairs) == 2
        assert pairs[0].caption == "a red thing"
        assert np.array_equal(pairs[1].image, imgs[1])

    def test_missing_tab_names_line(self, tmp_path):
        mf = tmp_path / "manifest.tsv"
        mf.write_text("no-tab-here\n")
        with pytest.raises(DataError, match="line 1"):
            list(load_manifest(mf))

    def test_missing_image_file(self, tmp_path):
        mf = tmp_path / "manifest.tsv"
        mf.write_text("nope.npy\tcaption\n")
        with pytest.raises(DataError, match="nope.npy"):
            list(load_manifest(mf))

    def test_empty_file(self, tmp_path):
        mf = tmp_path / "manifest.tsv"
        mf.write_text("")
        assert list(load_manifest(mf)) == []

    def test_pixel_out_of_range(self, tmp_path):
        np.save(tmp_path / "img.npy", np.full((1, 2, 2), 1.5))
        mf = tmp_path / "manifest.tsv"
        mf.write_text("img.npy\tcaption\n")
        with pytest.raises(DataError, match="pixel"):
            list(load_manifest(mf))


class TestClassTexts:
    def make_ds(self):
        return ClassDataset(images=np.zeros((2, 1, 2, 2)), labels=np.array([0, 1]),
                            class_names=["dog", "cat"])

    def test_substitution_and_order(self):
        ds = self.make_ds()
        vocab = Vocabulary.from_texts(["this is a photo of a dog",
                                       "this is a photo of a cat"])
        seqs = build_class_texts(ds, vocab)
        assert len(seqs) == 2
        dog_idx, cat_idx = vocab.lookup("dog"), vocab.lookup("cat")
        assert seqs[0][-1] == dog_idx and seqs[1][-1] == cat_idx

    def test_missing_placeholder(self):
        ds = self.make_ds()
        ds.template = "no placeholder here"
        with pytest.raises(ConfigError):
            build_class_texts(ds, Vocabulary([]))

    def test_class_caption(self):
        ds = self.make_ds()
        assert class_caption(ds, 1) == DEFAULT_TEMPLATE.replace("[CLS]", "cat")


class TestBatches:
    PAIRS = [ImageTextPair(image=np.full((1, 1, 1), i / 10), caption=str(i))
             for i in range(10)]

    def test_drop_last_arithmetic(self):
        out = list(epoch_batches(self.PAIRS, 4, seed=0, epoch=0))
        assert len(out) == 2
        assert all(len(b) == 4 for b in out)

    def test_deterministic_per_seed_epoch(self):
        a = list(epoch_batches(self.PAIRS, 4, seed=1, epoch=2))
        b = list(epoch_batches(self.PAIRS, 4, seed=1, epoch=2))
        assert [[p.caption for p in x] for x in a] == [[p.caption for p in x] for x in b]

    def test_epochs_reshuffle(self):
        firsts = [[p.caption for p in next(iter(epoch_batches(self.PAIRS, 4, 1, e)))]
                  for e in range(5)]
        assert any(f != firsts[0] for f in firsts[1:])

    def test_underflow(self):
        with pytest.raises(ConfigError):
            list(epoch_batches(self.PAIRS, 11, 0, 0))

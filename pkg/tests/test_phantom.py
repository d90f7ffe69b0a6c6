"""Phantom corpus: component-count oracle, label/report consistency,
determinism, and the hash split."""

import json

import numpy as np
import pytest
from scipy import ndimage

from t3d.errors import PhantomSpecError
from t3d.phantom import (
    COMPONENT_THRESHOLD,
    PhantomSpec,
    assign_splits,
    attribute_phrases,
    default_phantom_spec,
    generate_phantom,
    synth_corpus,
)


@pytest.fixture
def spec():
    return default_phantom_spec()


class TestSpecValidation:
    def test_default_spec_is_valid(self, spec):
        assert spec.n_shapes == 2
        assert len(spec.shape_catalog) == 18
        assert len({e[2] for e in spec.shape_catalog}) == 18  # all bins distinct

    def test_empty_catalog_with_shapes_rejected(self):
        with pytest.raises(PhantomSpecError):
            PhantomSpec(n_shapes=1, shape_catalog=[])

    def test_small_grid_rejected(self):
        with pytest.raises(PhantomSpecError):
            PhantomSpec(grid_dims=(6, 32, 16))

    def test_unknown_kind_rejected(self):
        with pytest.raises(PhantomSpecError):
            PhantomSpec(n_shapes=1, shape_catalog=[("cube", "dim", (0, 0, 0))])

    def test_more_shapes_than_bins_rejected(self):
        with pytest.raises(PhantomSpecError):
            PhantomSpec(n_shapes=2, shape_catalog=[("sphere", "dim", (0, 0, 0)),
                                                   ("box", "dim", (0, 0, 0))])

    def test_json_roundtrip(self, spec):
        again = PhantomSpec.from_json(json.loads(json.dumps(spec.to_json())))
        assert again.shape_catalog == spec.shape_catalog

    def test_unknown_json_keys_rejected(self, spec):
        doc = spec.to_json()
        doc["extra"] = 1
        with pytest.raises(PhantomSpecError):
            PhantomSpec.from_json(doc)


class TestGeneratePhantom:
    def test_empty_phantom(self, spec):
        spec = PhantomSpec(grid_dims=spec.grid_dims, n_shapes=0,
                           shape_catalog=spec.shape_catalog, vocab=spec.vocab)
        vol, report, labels = generate_phantom(spec, np.random.default_rng(0))
        assert report == "no findings"
        assert all(v == 0 for v in labels.values())
        assert vol.voxels.max() < COMPONENT_THRESHOLD

    def test_deterministic_given_seed(self, spec):
        a = generate_phantom(spec, np.random.default_rng(123))
        b = generate_phantom(spec, np.random.default_rng(123))
        np.testing.assert_array_equal(a[0].voxels, b[0].voxels)
        assert a[1] == b[1] and a[2] == b[2]

    @pytest.mark.parametrize("seed", range(12))
    def test_component_count_matches_report_phrases(self, spec, seed):
        # every phrase corresponds 1:1 to a thresholdable primitive
        vol, report, _labels = generate_phantom(spec, np.random.default_rng(seed))
        _, n_components = ndimage.label(vol.voxels > COMPONENT_THRESHOLD)
        n_phrases = 0 if report == "no findings" else report.count("region")
        assert n_components == n_phrases == spec.n_shapes

    @pytest.mark.parametrize("seed", range(8))
    def test_labels_iff_phrase_in_report(self, spec, seed):
        _vol, report, labels = generate_phantom(spec, np.random.default_rng(seed))
        for attr, phrase in attribute_phrases(spec).items():
            assert labels[attr] == int(phrase in report), (attr, report)

    def test_volume_is_unit_range(self, spec):
        vol, _, _ = generate_phantom(spec, np.random.default_rng(5))
        assert vol.unit_range
        assert 0.0 <= vol.voxels.min() and vol.voxels.max() <= 1.0


class TestSplits:
    def test_exact_80_10_10_for_100(self):
        splits = assign_splits([f"s{i}" for i in range(100)])
        counts = {s: sum(1 for v in splits.values() if v == s) for s in ("train", "val", "test")}
        assert counts == {"train": 80, "val": 10, "test": 10}

    def test_256_gives_26_test(self):
        splits = assign_splits([f"ph{i:05d}" for i in range(256)])
        counts = {s: sum(1 for v in splits.values() if v == s) for s in ("train", "val", "test")}
        assert counts == {"train": 204, "val": 26, "test": 26}

    def test_split_is_deterministic_and_id_based(self):
        ids = [f"x{i}" for i in range(50)]
        assert assign_splits(ids) == assign_splits(list(reversed(ids)))


class TestSynthCorpus:
    def test_writes_manifest_vocab_prompts(self, tmp_path, spec):
        manifest = synth_corpus(spec, 8, seed=3, out_dir=tmp_path)
        assert manifest.exists()
        assert (tmp_path / "vocab.txt").exists()
        assert (tmp_path / "prompts.json").exists()
        assert len(list((tmp_path / "volumes").glob("*.t3dv"))) == 8

    def test_byte_identical_for_same_seed(self, tmp_path, spec):
        a, b = tmp_path / "a", tmp_path / "b"
        synth_corpus(spec, 6, seed=9, out_dir=a)
        synth_corpus(spec, 6, seed=9, out_dir=b)
        for rel in ["manifest.jsonl", "vocab.txt", "prompts.json",
                    "volumes/ph00003.t3dv"]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_different_seed_changes_volumes(self, tmp_path, spec):
        a, b = tmp_path / "a", tmp_path / "b"
        synth_corpus(spec, 2, seed=1, out_dir=a)
        synth_corpus(spec, 2, seed=2, out_dir=b)
        assert (a / "volumes/ph00000.t3dv").read_bytes() != (b / "volumes/ph00000.t3dv").read_bytes()

"""Manifests, the min-size mixing rule, and the synthetic corpus contract."""

import filecmp
import json
import os

import numpy as np
import pytest

from cifasr.data import (
    ManifestError,
    ManifestRecord,
    MixPlan,
    SyntheticTaskSpec,
    Vocab,
    generate_synthetic,
    load_manifest,
    mix,
    write_manifest,
)
from cifasr.frontend import read_feature_file, read_feature_matrix, write_feature_file


def make_corpus(tmp_path, name, n, multimodal=False):
    d = tmp_path / name
    (d / "features").mkdir(parents=True)
    records = []
    for i in range(n):
        fp = d / "features" / f"{name}{i}.vlsf"
        write_feature_file(str(fp), np.zeros((4, 3), dtype=np.float32))
        records.append(ManifestRecord(
            id=f"{name}{i}", features=str(fp), transcript="a b",
            context_text="hint" if multimodal else None))
    path = d / "manifest.jsonl"
    write_manifest(str(path), records)
    return str(path)


class TestVocab:
    def test_reserved_ids(self):
        v = Vocab(["[PAD]", "[EOS]", "[BOS]", "[UNK]", "a", "b"])
        assert v.encode("a b") == [4, 5]
        assert v.encode("a zz") == [4, 3]
        assert v.decode([4, 5]) == "a b"

    def test_bad_reserved_prefix_rejected(self):
        with pytest.raises(ManifestError, match="vocabulary"):
            Vocab(["a", "b", "c", "d", "e"])

    def test_save_load_roundtrip(self, tmp_path):
        v = Vocab(["[PAD]", "[EOS]", "[BOS]", "[UNK]", "x"])
        p = str(tmp_path / "vocab.txt")
        v.save(p)
        assert Vocab.load(p).tokens == v.tokens


class TestManifest:
    def test_duplicate_ids_rejected(self, tmp_path):
        p = make_corpus(tmp_path, "g", 2)
        lines = open(p).read().splitlines()
        open(p, "w").write("\n".join([lines[0], lines[0]]) + "\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(p)

    def test_missing_file_rejected(self, tmp_path):
        p = make_corpus(tmp_path, "g", 1)
        doc = json.loads(open(p).read().splitlines()[0])
        doc["features"] = "does/not/exist.vlsf"
        open(p, "w").write(json.dumps(doc) + "\n")
        with pytest.raises(ManifestError, match="missing feature file"):
            load_manifest(p)

    def test_empty_manifest_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("")
        with pytest.raises(ManifestError, match="empty"):
            load_manifest(str(p))

    def test_generic_vs_multimodal_flag(self, tmp_path):
        g = load_manifest(make_corpus(tmp_path, "g", 1))
        m = load_manifest(make_corpus(tmp_path, "m", 1, multimodal=True))
        assert not g[0].is_multimodal
        assert m[0].is_multimodal


class TestMix:
    def test_k_is_min_and_size_2k(self, tmp_path):
        g = make_corpus(tmp_path, "g", 10)
        m = make_corpus(tmp_path, "m", 3, multimodal=True)
        mixed = mix(MixPlan(g, m, seed=0))
        assert len(mixed) == 6
        assert sum(r.is_multimodal for r in mixed) == 3  # exact 1:1 ratio

    def test_equal_sizes_take_everything(self, tmp_path):
        g = make_corpus(tmp_path, "g", 4)
        m = make_corpus(tmp_path, "m", 4, multimodal=True)
        mixed = mix(MixPlan(g, m, seed=1))
        assert len(mixed) == 8
        assert len({r.id for r in mixed}) == 8

    def test_same_seed_same_ordering(self, tmp_path):
        g = make_corpus(tmp_path, "g", 7)
        m = make_corpus(tmp_path, "m", 5, multimodal=True)
        a = [r.id for r in mix(MixPlan(g, m, seed=3))]
        b = [r.id for r in mix(MixPlan(g, m, seed=3))]
        assert a == b
        c = [r.id for r in mix(MixPlan(g, m, seed=4))]
        assert a != c

    def test_no_duplicate_ids(self, tmp_path):
        g = make_corpus(tmp_path, "g", 6)
        m = make_corpus(tmp_path, "m", 6, multimodal=True)
        mixed = mix(MixPlan(g, m, seed=0))
        assert len({r.id for r in mixed}) == len(mixed)


class TestSynthetic:
    def test_sigma_zero_features_are_exact_prototype_blocks(self, tmp_path):
        spec = SyntheticTaskSpec(n_tokens=6, n_ambiguous_pairs=0, noise_sigma=0.0)
        path = generate_synthetic(spec, 5, seed=0, out_dir=str(tmp_path / "c"))
        protos = spec.prototypes()
        vocab = spec.vocab()
        for rec in load_manifest(path):
            toks = vocab.encode(rec.transcript)
            frames = read_feature_file(rec.features).frames
            expect = np.concatenate([protos[spec.group_of(t - 4)] for t in toks])
            np.testing.assert_array_equal(frames, expect)

    def test_ambiguous_pair_shares_blocks_but_not_cues(self, tmp_path):
        spec = SyntheticTaskSpec(n_tokens=4, n_ambiguous_pairs=1, min_len=1, max_len=1)
        # force one utterance of each member by direct construction
        protos = spec.prototypes()
        assert spec.group_of(0) == spec.group_of(1)  # shared prototype group
        np.testing.assert_array_equal(protos[spec.group_of(0)],
                                      protos[spec.group_of(1)])
        path = generate_synthetic(spec, 40, seed=1, out_dir=str(tmp_path / "c"))
        recs = load_manifest(path)
        vocab = spec.vocab()
        by_tok = {}
        for rec in recs:
            tok = vocab.encode(rec.transcript)[0] - 4
            by_tok.setdefault(tok, rec)
        a, b = by_tok.get(0), by_tok.get(1)
        assert a is not None and b is not None, "sampling produced both members"
        np.testing.assert_array_equal(read_feature_file(a.features).frames,
                                      read_feature_file(b.features).frames)
        cue_a = read_feature_matrix(a.image_feat)
        cue_b = read_feature_matrix(b.image_feat)
        assert not np.array_equal(cue_a, cue_b)
        # signs differ on the pair direction
        assert cue_a[0, spec.max_len] == 1.0 and cue_b[0, spec.max_len] == -1.0

    def test_generic_kind_avoids_ambiguous_tokens_and_cues(self, tmp_path):
        spec = SyntheticTaskSpec(n_tokens=8, n_ambiguous_pairs=2)
        path = generate_synthetic(spec, 10, seed=2, out_dir=str(tmp_path / "g"),
                                  kind="generic")
        vocab = spec.vocab()
        for rec in load_manifest(path):
            assert not rec.is_multimodal
            assert all(t - 4 >= 4 for t in vocab.encode(rec.transcript))

    def test_regeneration_is_byte_identical(self, tmp_path):
        spec = SyntheticTaskSpec()
        p1 = generate_synthetic(spec, 6, seed=9, out_dir=str(tmp_path / "a"))
        p2 = generate_synthetic(spec, 6, seed=9, out_dir=str(tmp_path / "b"))
        assert open(p1, "rb").read() == open(p2, "rb").read()
        d1 = os.path.join(os.path.dirname(p1), "features")
        d2 = os.path.join(os.path.dirname(p2), "features")
        match, mismatch, errors = filecmp.cmpfiles(d1, d2, os.listdir(d1), shallow=False)
        assert not mismatch and not errors

    def test_context_text_spells_true_members(self, tmp_path):
        spec = SyntheticTaskSpec(n_tokens=6, n_ambiguous_pairs=2)
        path = generate_synthetic(spec, 30, seed=3, out_dir=str(tmp_path / "c"))
        vocab = spec.vocab()
        for rec in load_manifest(path):
            toks = [t - 4 for t in vocab.encode(rec.transcript)]
            ambiguous = [spec.surfaces[t] for t in toks if spec.pair_of(t) is not None]
            if ambiguous:
                assert rec.context_text == " ".join(ambiguous)
            else:
                assert rec.context_text is None

import filecmp
import json
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tangle.dataio import (EmptySlideError, ExpressionProfile, ManifestRecord, SynthConfig, load_dataset,
                           load_embeddings, load_latents, load_manifest, log2_fold_change, parse_embeddings,
                           parse_expression, select_top_genes, synth_generate, write_embeddings, write_expression,
                           write_manifest)
from tangle.errors import ConfigurationError, FormatError, InputError, ParameterError, ParseError
from tangle.evaluation import few_shot_eval, mean_pool_embeddings


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


class TestEmbeddingFile:
    def test_round_trip_bitwise(self, rng, tmp_path):
        E = rng.standard_normal((10, 16)).astype(np.float32)
        write_embeddings(tmp_path / "a.temb", E)
        back = load_embeddings(tmp_path / "a.temb")
        assert back.embeddings.tobytes() == E.tobytes() and back.coords is None
        assert back.slide_id == "a"

    @given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)), st.booleans())
    def test_round_trip_property(self, E, with_coords):
        coords = np.arange(2 * E.shape[0], dtype=np.float32).reshape(-1, 2) if with_coords else None
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "x.temb"
            write_embeddings(p, E, coords)
            back = load_embeddings(p)
        assert back.embeddings.tobytes() == E.tobytes()
        assert (back.coords is None) == (coords is None)
        if coords is not None:
            assert np.array_equal(back.coords, coords)

    def test_layout_little_endian(self, tmp_path):
        write_embeddings(tmp_path / "a.temb", np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]))
        buf = (tmp_path / "a.temb").read_bytes()
        assert buf[:4] == b"TEMB" and len(buf) == 16 + 8 + 8
        assert struct.unpack("<HBIIB", buf[4:16]) == (1, 0, 1, 2, 1)
        assert struct.unpack("<4f", buf[16:]) == (1.0, 2.0, 3.0, 4.0)

    def test_truncated(self, rng, tmp_path):
        write_embeddings(tmp_path / "a.temb", rng.standard_normal((10, 16)))
        buf = (tmp_path / "a.temb").read_bytes()
        for cut in (5, 16, 100, len(buf) - 1):
            with pytest.raises(FormatError, match="offset"):
                parse_embeddings(buf[:cut])

    def test_empty_slide(self, tmp_path):
        write_embeddings(tmp_path / "e.temb", np.zeros((0, 4)))
        with pytest.raises(EmptySlideError):
            load_embeddings(tmp_path / "e.temb")

    def test_bad_header_fields(self, tmp_path):
        write_embeddings(tmp_path / "a.temb", np.ones((2, 2)))
        buf = bytearray((tmp_path / "a.temb").read_bytes())
        for pos, value, msg in ((0, ord("X"), "magic"), (4, 2, "version"), (6, 1, "dtype")):
            bad = bytearray(buf)
            bad[pos] = value
            with pytest.raises(FormatError, match=msg):
                parse_embeddings(bytes(bad))


class TestExpressionFile:
    def test_two_lines_in_order(self):
        prof = parse_expression("gene_id,value\nB,1.5\nA,-2\n")
        assert prof.gene_ids == ["B", "A"] and prof.values.tolist() == [1.5, -2.0]

    def test_duplicate(self):
        with pytest.raises(ParseError, match=r"line 4:.*'A'"):
            parse_expression("gene_id,value\nA,1\nB,2\nA,3\n")

    def test_non_numeric(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_expression("gene_id,value\nA,abc\n")

    def test_header(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_expression("gene,val\nA,1\n")

    def test_round_trip(self, rng, tmp_path):
        prof = ExpressionProfile([f"g{i}" for i in range(20)], rng.standard_normal(20) * 1e3)
        write_expression(tmp_path / "e.csv", prof)
        back = parse_expression((tmp_path / "e.csv").read_text())
        assert back.gene_ids == prof.gene_ids and np.array_equal(back.values, prof.values)


class TestPreprocessing:
    def test_fold_change(self):
        control = np.array([[2.0, 4.0], [6.0, 8.0]])
        assert np.array_equal(log2_fold_change(control.mean(axis=0), control), [0.0, 0.0])
        np.testing.assert_allclose(log2_fold_change(2 * control.mean(axis=0), control, pseudo=1e-12), 1.0,
                                   atol=1e-10)
        np.testing.assert_allclose(log2_fold_change(control.mean(axis=0) / 4, control, pseudo=1e-12), -2.0,
                                   atol=1e-10)

    def test_fold_change_errors(self):
        with pytest.raises(ParameterError):
            log2_fold_change([1.0], [[1.0]], pseudo=0.0)
        with pytest.raises(InputError):
            log2_fold_change([-1.0], [[1.0]])

    def test_top_genes(self):
        assert select_top_genes([[0, 3, -5, 1]], 2) == [2, 1]
        assert select_top_genes([[0, 3, -5, 1]], 4) == [2, 1, 3, 0]

    def test_top_genes_sort_oracle(self, rng):
        lfc = np.round(rng.standard_normal((5, 20)), 1)
        score = np.abs(lfc).mean(axis=0)
        oracle = sorted(range(20), key=lambda j: (-score[j], j))
        for k in (1, 7, 20):
            assert select_top_genes(lfc, k) == oracle[:k]
        with pytest.raises(ParameterError):
            select_top_genes(lfc, 21)


class TestManifest:
    def test_relative_paths_and_duplicates(self, tmp_path):
        write_embeddings(tmp_path / "a.temb", np.ones((2, 3)))
        write_manifest(tmp_path / "m.jsonl", [ManifestRecord("a", "a.temb", labels=[1, 0])])
        (rec,) = load_manifest(tmp_path / "m.jsonl")
        assert rec.embedding_path == str(tmp_path / "a.temb") and rec.labels == [1, 0]
        (tmp_path / "d.jsonl").write_text(
            json.dumps({"slide_id": "a", "embedding_path": "a.temb"}) + "\n"
            + json.dumps({"slide_id": "a", "embedding_path": "a.temb"}) + "\n")
        with pytest.raises(ParseError, match="line 2"):
            load_manifest(tmp_path / "d.jsonl")

    def test_missing_file(self, tmp_path):
        write_manifest(tmp_path / "m.jsonl", [ManifestRecord("a", "nope.temb")])
        with pytest.raises(InputError):
            load_manifest(tmp_path / "m.jsonl")
        assert len(load_manifest(tmp_path / "m.jsonl", check_files=False)) == 1

    def test_partial_expression_rejected(self, tmp_path):
        for s in "ab":
            write_embeddings(tmp_path / f"{s}.temb", np.ones((2, 3)))
        write_expression(tmp_path / "a.csv", ExpressionProfile(["g"], [1.0]))
        write_manifest(tmp_path / "m.jsonl", [ManifestRecord("a", "a.temb", "a.csv", [1]),
                                              ManifestRecord("b", "b.temb", None, [0])])
        with pytest.raises(InputError):
            load_dataset(tmp_path / "m.jsonl")


class TestSynth:
    def test_byte_identical(self, tmp_path):
        cfg = SynthConfig(n_slides=12, min_patches=5, max_patches=9, seed=7)
        synth_generate(cfg, tmp_path / "a")
        synth_generate(cfg, tmp_path / "b")
        assert same_tree(tmp_path / "a", tmp_path / "b")
        synth_generate(SynthConfig(n_slides=12, min_patches=5, max_patches=9, seed=8), tmp_path / "c")
        assert not same_tree(tmp_path / "a", tmp_path / "c")

    def test_loads_back(self, tmp_path):
        cfg = SynthConfig(n_slides=10, min_patches=5, max_patches=9, test_fraction=0.3)
        ds = synth_generate(cfg, tmp_path)
        back = load_dataset(tmp_path / "manifest.jsonl")
        assert back.slide_ids == ds.slide_ids and back.group_ids == ds.group_ids
        assert np.array_equal(back.expression, ds.expression)
        assert all(np.array_equal(a.embeddings, b.embeddings) for a, b in zip(ds.patches, back.patches))
        assert len(back.split("test")) == 3 and len(load_dataset(tmp_path / "manifest.jsonl", "train")) == 7
        ids, Z = load_latents(tmp_path / "latents.csv")
        assert ids == ds.slide_ids and Z.shape == (10, cfg.latent_dim)
        assert np.all(ds.labels.sum(axis=1) == 1)

    def test_null_coupling(self, tmp_path):
        ds = synth_generate(SynthConfig(n_slides=400, coupling=0.0, min_patches=4, max_patches=6, seed=2), tmp_path)
        auc = np.mean(few_shot_eval(ds.expression, ds.labels, 10, 5, 0))
        assert abs(auc - 0.5) <= 0.05

    def test_noiseless_separable(self, tmp_path):
        cfg = SynthConfig(n_slides=200, min_patches=20, max_patches=30, patch_noise=0.0, background_noise=0.0,
                          stain_noise=0.0, latent_noise=0.0, expression_noise=0.0, background_shift=0.0,
                          background_type_scale=0.0, seed=3)
        ds = synth_generate(cfg, tmp_path)
        assert np.mean(few_shot_eval(mean_pool_embeddings(ds), ds.labels, 10, 5, 0)) == 1.0

    @pytest.mark.parametrize("kw", [{"n_slides": 0}, {"latent_dim": 1}, {"min_patches": 0},
                                    {"background_fraction": 1.0}, {"patch_noise": -1.0}, {"test_fraction": 1.0}])
    def test_validation(self, kw):
        with pytest.raises(ConfigurationError):
            SynthConfig(**kw).validate()
        with pytest.raises(ConfigurationError):
            SynthConfig.from_dict({"nope": 1})

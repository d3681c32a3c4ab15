import json

import numpy as np
import pytest

from autoprune.errors import (
    EmptyCorpus,
    IoFailure,
    MalformedRecord,
    MissingManifest,
    NonFiniteTensor,
    ShapeMismatch,
    TokenOutOfRange,
    UnknownManifestVersion,
)
from autoprune.model import init_bundle, perplexity
from autoprune.tensor import (
    LAYER_KINDS,
    ModelBundle,
    TokenCorpus,
    Topology,
    load_bundle,
    load_corpus,
    save_bundle,
    save_corpus,
)

from .conftest import FIXTURES, TOY_TOPOLOGY


def test_fixture_bundle_has_twelve_layers(fixture_bundle):
    assert len(fixture_bundle.layers) == 12
    expected = [f"blocks.{b}.{k}" for b in range(2) for k in LAYER_KINDS]
    assert fixture_bundle.layer_names == expected
    assert [r.index for r in fixture_bundle.layers] == list(range(12))


def test_layer_shapes_follow_topology(toy_bundle):
    t = toy_bundle.topology
    for rec in toy_bundle.layers:
        assert rec.shape == t.layer_shape(rec.kind)
    assert toy_bundle.layer("blocks.0.mlp_in").shape == (t.d_mlp, t.d_model)
    assert toy_bundle.layer("blocks.1.mlp_out").shape == (t.d_model, t.d_mlp)


def test_round_trip_is_byte_identical(tmp_path):
    save_bundle(load_bundle(FIXTURES / "tiny_bundle"), tmp_path / "copy")
    original = (FIXTURES / "tiny_bundle" / "tensors.bin").read_bytes()
    assert (tmp_path / "copy" / "tensors.bin").read_bytes() == original


def test_save_then_load_equal(tmp_path, toy_bundle):
    save_bundle(toy_bundle, tmp_path / "b")
    assert load_bundle(tmp_path / "b") == toy_bundle


def test_zeros_preserved(tmp_path, toy_bundle):
    w = toy_bundle.layer("blocks.0.attention_q").weight.copy()
    w[:, ::2] = 0.0
    pruned = toy_bundle.with_weights({"blocks.0.attention_q": w})
    save_bundle(pruned, tmp_path / "p")
    back = load_bundle(tmp_path / "p").layer("blocks.0.attention_q").weight
    assert np.count_nonzero(back == 0) == np.count_nonzero(w == 0)


def test_input_is_not_mutated(toy_bundle):
    before = toy_bundle.layer("blocks.0.attention_q").weight.copy()
    toy_bundle.with_weights({"blocks.0.attention_q": np.zeros_like(before)})
    assert np.array_equal(toy_bundle.layer("blocks.0.attention_q").weight, before)
    with pytest.raises(ValueError):
        toy_bundle.layer("blocks.0.attention_q").weight[0, 0] = 1.0


def _write_manifest(path, shape, n_floats, version=1):
    path.mkdir()
    manifest = {
        "format_version": version,
        "topology": {
            "vocab_size": 4,
            "d_model": 4,
            "n_heads": 1,
            "n_blocks": 1,
            "d_mlp": 4,
            "max_seq_len": 4,
            "tied_head": False,
        },
        "tensors": [{"name": "embedding", "kind": "embedding", "shape": shape, "byte_offset": 0}],
    }
    (path / "manifest.json").write_text(json.dumps(manifest))
    (path / "tensors.bin").write_bytes(np.ones(n_floats, dtype="<f4").tobytes())


def test_shape_mismatch(tmp_path):
    _write_manifest(tmp_path / "b", [4, 4], 12)
    with pytest.raises(ShapeMismatch):
        load_bundle(tmp_path / "b")


def test_unknown_version(tmp_path):
    _write_manifest(tmp_path / "b", [4, 4], 16, version=99)
    with pytest.raises(UnknownManifestVersion):
        load_bundle(tmp_path / "b")


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingManifest):
        load_bundle(tmp_path)


def test_non_finite_rejected(tmp_path, toy_bundle):
    save_bundle(toy_bundle, tmp_path / "b")
    data = bytearray((tmp_path / "b" / "tensors.bin").read_bytes())
    data[0:4] = np.array([np.nan], dtype="<f4").tobytes()
    (tmp_path / "b" / "tensors.bin").write_bytes(bytes(data))
    with pytest.raises(NonFiniteTensor):
        load_bundle(tmp_path / "b")
    with pytest.raises(NonFiniteTensor):
        ModelBundle(TOY_TOPOLOGY, [np.full(r.shape, np.inf) for r in toy_bundle.layers], toy_bundle.aux)


def test_save_to_unwritable_path(tmp_path, toy_bundle):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        save_bundle(toy_bundle, blocker / "sub")


def test_wrong_layer_shape_rejected(toy_bundle):
    layers = [r.weight for r in toy_bundle.layers]
    layers[0] = np.zeros((3, 3))
    with pytest.raises(ShapeMismatch):
        ModelBundle(TOY_TOPOLOGY, layers, toy_bundle.aux)


def test_corpus_round_trip(tmp_path):
    corpus = TokenCorpus(np.arange(4096) % 50)
    save_corpus(corpus, tmp_path / "c.tok")
    back = load_corpus(tmp_path / "c.tok")
    assert len(back) == 4096
    assert np.array_equal(back.tokens, corpus.tokens)


def test_empty_corpus(tmp_path):
    (tmp_path / "e.tok").write_bytes(b"")
    with pytest.raises(EmptyCorpus):
        load_corpus(tmp_path / "e.tok")


def test_truncated_corpus(tmp_path):
    (tmp_path / "t.tok").write_bytes(b"\x01\x00\x00\x00\x02")
    with pytest.raises(MalformedRecord):
        load_corpus(tmp_path / "t.tok")


def test_token_out_of_range():
    bundle = init_bundle(Topology(vocab_size=8, d_model=4, n_heads=1, n_blocks=1, d_mlp=4, max_seq_len=8))
    corpus = TokenCorpus(np.array([0, 1, 8, 2]))
    with pytest.raises(TokenOutOfRange):
        perplexity(bundle, corpus, seq_len=4)

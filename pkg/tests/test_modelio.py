"""Container, dataset, and fixture format contracts."""

import json
import struct

import numpy as np
import pytest

from psub.modelio import (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, GoldenFixture,
                          LayerSpec, ModelFormatError, ModelGraph,
                          ModelValidationError, load_golden, load_idx,
                          load_model, propagate_shapes, save_idx, save_model)

from conftest import make_conv_net


def minimal_graph() -> ModelGraph:
    layers = (
        LayerSpec("conv0", "conv2d", {"pad": 0},
                  np.full((1, 1, 1, 1), 2.0, np.float32),
                  np.zeros(1, np.float32)),
        LayerSpec("sub0", "subsample", {"rate_h": 2, "rate_w": 2}),
        LayerSpec("gap", "global_avg_pool"),
        LayerSpec("fc", "dense", {},
                  np.asarray([[1.0], [-1.0]], np.float32),
                  np.zeros(2, np.float32)),
    )
    return ModelGraph(layers, head_index=3, input_shape=(1, 4, 4), num_classes=2)


class TestModelContainer:
    def test_minimal_model_round_trip(self, tmp_path):
        g = minimal_graph()
        path = tmp_path / "m.psb"
        save_model(g, path)
        loaded = load_model(path)
        assert len(loaded.searchable_rates()) == 1
        assert loaded.head_index == g.head_index
        assert loaded.input_shape == g.input_shape
        for a, b in zip(loaded.layers, g.layers):
            assert (a.name, a.kind, a.params) == (b.name, b.kind, b.params)
            if b.weight is not None:
                np.testing.assert_array_equal(a.weight, b.weight)

    def test_round_trip_is_byte_identical(self, tmp_path):
        g = make_conv_net(np.random.default_rng(0))
        p1, p2 = tmp_path / "a.psb", tmp_path / "b.psb"
        save_model(g, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_two_saves_identical(self, tmp_path):
        g = make_conv_net(np.random.default_rng(1))
        p1, p2 = tmp_path / "a.psb", tmp_path / "b.psb"
        save_model(g, p1)
        save_model(g, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_zero_layer_model_rejected(self):
        with pytest.raises(ModelValidationError, match="at least one layer"):
            ModelGraph((), head_index=1, input_shape=(1, 4, 4), num_classes=2)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.psb"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bad.psb"
        path.write_bytes(b"PSB1" + struct.pack("<II", 9, 2) + b"{}")
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_truncated_blob_rejected(self, tmp_path):
        g = minimal_graph()
        path = tmp_path / "m.psb"
        save_model(g, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-2])
        with pytest.raises(ModelFormatError, match="blob"):
            load_model(path)

    def test_shape_mismatch_names_layer(self):
        # dense expects the pooled channel count; force 5 columns instead.
        g = minimal_graph()
        bad = list(g.layers)
        bad[3] = LayerSpec("fc", "dense", {},
                           np.zeros((2, 5), np.float32), np.zeros(2, np.float32))
        with pytest.raises(ModelValidationError, match="fc"):
            propagate_shapes(ModelGraph(tuple(bad), 3, (1, 4, 4), 2))

    def test_shape_propagation(self):
        g = make_conv_net(np.random.default_rng(2), channels=(4, 6),
                          rates=((2, 2), (2, 2)), input_hw=8)
        shapes = propagate_shapes(g)
        assert shapes[-1] == (3,)
        assert (4, 8, 8) in shapes and (4, 4, 4) in shapes


class TestIdx:
    def test_byte_level_fixture(self, tmp_path):
        imgs = tmp_path / "i.idx"
        lbls = tmp_path / "l.idx"
        imgs.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 1, 2, 2)
                         + bytes([0, 255, 0, 255]))
        lbls.write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, 1) + bytes([1]))
        ds = load_idx(imgs, lbls)
        assert len(ds) == 1
        x, label = ds[0]
        assert label == 1
        np.testing.assert_allclose(x[0], [[0.0, 1.0], [0.0, 1.0]])

    def test_zero_count_files(self, tmp_path):
        imgs = tmp_path / "i.idx"
        lbls = tmp_path / "l.idx"
        imgs.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 0, 4, 4))
        lbls.write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, 0))
        assert len(load_idx(imgs, lbls)) == 0

    def test_count_mismatch_rejected(self, tmp_path):
        imgs = tmp_path / "i.idx"
        lbls = tmp_path / "l.idx"
        imgs.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 2, 1, 1) + b"\x00\x01")
        lbls.write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, 1) + b"\x00")
        with pytest.raises(ModelFormatError, match="count"):
            load_idx(imgs, lbls)

    def test_bad_magic_rejected(self, tmp_path):
        imgs = tmp_path / "i.idx"
        lbls = tmp_path / "l.idx"
        imgs.write_bytes(struct.pack(">IIII", 0xDEAD, 1, 1, 1) + b"\x00")
        lbls.write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, 1) + b"\x00")
        with pytest.raises(ModelFormatError, match="magic"):
            load_idx(imgs, lbls)

    def test_truncated_pixels_rejected(self, tmp_path):
        imgs = tmp_path / "i.idx"
        lbls = tmp_path / "l.idx"
        imgs.write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, 2, 2, 2) + b"\x00" * 5)
        lbls.write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, 2) + b"\x00\x01")
        with pytest.raises(ModelFormatError, match="truncated"):
            load_idx(imgs, lbls)

    def test_save_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        images = rng.integers(0, 256, (5, 4, 4)).astype(np.uint8)
        labels = rng.integers(0, 10, 5).astype(np.uint8)
        save_idx(images, labels, tmp_path / "i.idx", tmp_path / "l.idx")
        ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        np.testing.assert_allclose(ds.images[:, 0] * 255.0, images, atol=1e-4)
        np.testing.assert_array_equal(ds.labels, labels)


class TestGolden:
    def _write(self, tmp_path, docs):
        path = tmp_path / "golden.json"
        path.write_text(json.dumps(docs), encoding="utf-8")
        return path

    def test_default_state_fixture_parses(self, tmp_path):
        g = minimal_graph()
        path = self._write(tmp_path, [{
            "input": "imgs.idx#0", "selection": [[0, 0]],
            "logits": [0.5, -0.5], "tol": 1e-4}])
        (fx,) = load_golden(path, g)
        assert (fx.images_path, fx.image_index) == ("imgs.idx", 0)
        assert fx.selection == ((0, 0),)
        assert fx.tol == 1e-4
        np.testing.assert_array_equal(fx.logits, [0.5, -0.5])

    def test_out_of_range_phase_rejected(self, tmp_path):
        g = minimal_graph()
        path = self._write(tmp_path, [{
            "input": "imgs.idx#0", "selection": [[2, 0]], "logits": [0, 0]}])
        with pytest.raises(ModelValidationError, match="out of range"):
            load_golden(path, g)

    def test_wrong_selection_length_rejected(self, tmp_path):
        g = minimal_graph()
        path = self._write(tmp_path, [{
            "input": "imgs.idx#0", "selection": [[0, 0], [0, 0]],
            "logits": [0, 0]}])
        with pytest.raises(ModelValidationError, match="searchable"):
            load_golden(path, g)

    def test_default_tolerance(self, tmp_path):
        path = self._write(tmp_path, [{
            "input": "imgs.idx#3", "selection": [[1, 1]], "logits": [1, 2]}])
        fixtures = load_golden(path)
        assert fixtures[0].tol == 1e-4
        assert fixtures[0].image_index == 3

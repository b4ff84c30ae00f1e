import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_bank_weights
from fsd.errors import BadMagic, BadVersion, InvariantViolation, KindMismatch, SizeMismatch
from fsd.filterbank import FilterBank
from fsd.mixture import fit_gmm
from fsd.store import (
    ModelFile,
    dumps_features,
    dumps_model,
    load_features,
    load_model,
    loads_features,
    loads_model,
    save_features,
    save_model,
)
from fsd.tasks import calibrate_detector, fit_attributor, kmeans


@pytest.fixture
def models(rng):
    x = rng.normal(size=(60, 4))
    gmm = fit_gmm(x, 2).model
    return {
        "filter_bank": FilterBank(random_bank_weights(rng, 3, 5)),
        "detector": calibrate_detector(gmm, rng.normal(size=(20, 4))),
        "attributor": fit_attributor({"b": x[:30], "a": x[30:] + 2}),
        "kmeans": kmeans(x, 3),
    }


class TestModels:
    @pytest.mark.parametrize("kind", ["filter_bank", "detector", "attributor", "kmeans"])
    def test_round_trip_byte_identical(self, models, kind, tmp_path):
        path = tmp_path / f"{kind}.json"
        save_model(models[kind], path, {"seed": 0})
        first = path.read_bytes()
        mf = load_model(path, expect=kind)
        assert mf.kind == kind
        save_model(mf, path)
        assert path.read_bytes() == first

    def test_bank_weights_exact(self, models, tmp_path):
        bank = models["filter_bank"]
        save_model(bank, tmp_path / "b.json")
        assert np.array_equal(load_model(tmp_path / "b.json").model.weights, bank.weights)

    def test_detector_scores_preserved(self, models, rng, tmp_path):
        det = models["detector"]
        save_model(det, tmp_path / "d.json")
        back = load_model(tmp_path / "d.json").model
        x = rng.normal(size=(5, 4))
        assert np.array_equal(back.gmm.score_samples(x), det.gmm.score_samples(x))
        assert back.threshold == det.threshold

    def test_attributor_label_order_kept(self, models, tmp_path):
        save_model(models["attributor"], tmp_path / "a.json")
        assert load_model(tmp_path / "a.json").model.labels == ["a", "b"]

    def test_truncated(self, models):
        data = dumps_model(ModelFile("filter_bank", models["filter_bank"]))
        for cut in (0, 10, len(data) // 2, len(data) - 3):
            with pytest.raises(BadMagic):
                loads_model(data[:cut])

    def test_corrupt_filter_sum(self, models):
        doc = json.loads(dumps_model(ModelFile("filter_bank", models["filter_bank"])))
        w = np.array(doc["payload"]["weights"])
        w[0] *= 0.9
        doc["payload"]["weights"] = w.tolist()
        with pytest.raises(InvariantViolation, match="sum"):
            loads_model(json.dumps(doc).encode())

    def test_bad_simplex(self, models):
        doc = json.loads(dumps_model(ModelFile("detector", models["detector"])))
        doc["payload"]["gmm"]["weights"] = [0.7, 0.7]
        with pytest.raises(InvariantViolation, match="simplex"):
            loads_model(json.dumps(doc).encode())

    def test_future_version(self, models):
        doc = json.loads(dumps_model(ModelFile("kmeans", models["kmeans"])))
        doc["format_version"] = 2
        with pytest.raises(BadVersion):
            loads_model(json.dumps(doc).encode())

    def test_kind_mismatch(self, models, tmp_path):
        save_model(models["detector"], tmp_path / "d.json")
        with pytest.raises(KindMismatch):
            load_model(tmp_path / "d.json", expect="filter_bank")

    def test_non_finite_encoding(self, models):
        data = dumps_model(ModelFile("attributor", fit_attributor({"a": np.eye(3)}, quantile=0.0)))
        assert loads_model(data).model.labels == ["a"]
        mf = ModelFile("kmeans", models["kmeans"], {"limit": float("-inf")})
        text = dumps_model(mf)
        assert b'"-inf"' in text and loads_model(text).provenance["limit"] == "-inf"


class TestFeatures:
    def test_hand_assembled_layout(self):
        x = np.array([[1.0, -2.0, 0.5], [3.25, 0.0, -1.5]], dtype=np.float32)
        expected = b"FSDF" + struct.pack("<III", 1, 2, 3) + struct.pack("<6f", 1.0, -2.0, 0.5, 3.25, 0.0, -1.5)
        assert dumps_features(x) == expected
        assert dumps_features(x, ["a", "bb"]) == expected + b"a\nbb"

    def test_empty(self, tmp_path):
        save_features(tmp_path / "e.fsdf", np.zeros((0, 960), dtype=np.float32))
        x, labels = load_features(tmp_path / "e.fsdf")
        assert x.shape == (0, 960) and labels is None

    @given(st.integers(0, 6), st.integers(1, 5), st.integers(0, 2**31 - 1), st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_bit_exact_round_trip(self, n, d, seed, with_labels):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, d)).astype(np.float32)
        labels = [f"s{i}" for i in range(n)] if with_labels else None
        got, lab = loads_features(dumps_features(x, labels))
        assert got.tobytes() == x.tobytes()
        assert lab == (labels if (with_labels and n) else None)

    def test_label_count_mismatch(self):
        with pytest.raises(SizeMismatch):
            dumps_features(np.zeros((2, 3)), ["a"])
        data = dumps_features(np.zeros((2, 3))) + b"a\nb\nc"
        with pytest.raises(SizeMismatch):
            loads_features(data)

    def test_truncated_payload(self):
        data = dumps_features(np.ones((4, 4)))
        with pytest.raises(SizeMismatch):
            loads_features(data[:-4])
        with pytest.raises(BadMagic):
            loads_features(data[:10])

    def test_bad_magic_and_version(self):
        data = bytearray(dumps_features(np.ones((1, 1))))
        with pytest.raises(BadMagic):
            loads_features(b"XXXX" + bytes(data[4:]))
        data[4] = 2
        with pytest.raises(BadVersion):
            loads_features(bytes(data))

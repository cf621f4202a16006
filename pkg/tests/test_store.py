"""Tests for canonical serialization, model round-trips, and manifests."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otdistill import store
from otdistill.models import Architecture, ClassCenters, build_classifier, EMPIRICAL_MEAN
from otdistill.tasks import make_pool


@pytest.fixture
def mlp_model(rng):
    arch = Architecture("mlp", input_dim=4, embed_dim=3, hidden_dim=6)
    model = build_classifier(arch, (3, 1, 4), seed=7)
    model.stored_centers = ClassCenters(rng.normal(size=(3, 3)), (3, 1, 4), EMPIRICAL_MEAN)
    return model


class TestCanonicalSerialization:
    def test_sorted_keys_and_compact(self):
        assert store.canonical_dumps({"b": 1, "a": 2}) == '{"a":2,"b":1}'

    def test_float_formatting_is_17_digits(self):
        assert store.canonical_dumps(1.0 / 3.0) == "0.33333333333333331"

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            store.canonical_dumps(float("nan"))

    def test_same_object_same_bytes(self, rng):
        doc = {"x": rng.normal(size=(3, 2)), "y": [1, 2, 3], "z": "hi"}
        assert store.canonical_bytes(doc) == store.canonical_bytes(doc)

    @given(st.floats(allow_nan=False, allow_infinity=False))
    @settings(max_examples=200, deadline=None)
    def test_floats_roundtrip_exactly(self, x):
        assert json.loads(store.canonical_dumps(x)) == x


class TestModelRoundTrip:
    def test_logits_identical_after_roundtrip(self, tmp_path, rng, mlp_model):
        path = tmp_path / "m.json"
        store.save_model(mlp_model, path, model_id="m")
        loaded = store.load_model(path)
        X = rng.normal(size=(100, 4))
        np.testing.assert_array_equal(loaded.logits(X), mlp_model.logits(X))
        assert loaded.label_set == mlp_model.label_set
        np.testing.assert_array_equal(loaded.stored_centers.centers, mlp_model.stored_centers.centers)

    def test_linear_model_roundtrip(self, tmp_path, rng):
        arch = Architecture("linear", input_dim=3, embed_dim=2)
        model = build_classifier(arch, (0, 1), seed=0)
        path = tmp_path / "lin.json"
        store.save_model(model, path)
        X = rng.normal(size=(10, 3))
        np.testing.assert_array_equal(store.load_model(path).logits(X), model.logits(X))

    def test_save_is_byte_identical(self, tmp_path, mlp_model):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        h1 = store.save_model(mlp_model, p1, model_id="x")
        h2 = store.save_model(mlp_model, p2, model_id="x")
        assert h1 == h2
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_is_malformed(self, tmp_path, mlp_model):
        path = tmp_path / "m.json"
        store.save_model(mlp_model, path)
        path.write_bytes(path.read_bytes()[:50])
        with pytest.raises(store.MalformedFileError):
            store.load_model(path)

    def test_key_order_does_not_matter(self, tmp_path, mlp_model):
        path = tmp_path / "m.json"
        store.save_model(mlp_model, path, model_id="m")
        doc = json.loads(path.read_text())
        reordered = dict(reversed(list(doc.items())))
        path.write_text(json.dumps(reordered))
        loaded = store.load_model(path)
        assert loaded.label_set == mlp_model.label_set

    def test_schema_version_checked(self, tmp_path, mlp_model):
        path = tmp_path / "m.json"
        store.save_model(mlp_model, path)
        doc = json.loads(path.read_text())
        doc["schema"] = "model/v999"
        path.write_text(json.dumps(doc))
        with pytest.raises(store.SchemaVersionError):
            store.load_model(path)

    def test_dimension_mismatch_rejected_before_construction(self, tmp_path, mlp_model):
        path = tmp_path / "m.json"
        store.save_model(mlp_model, path)
        doc = json.loads(path.read_text())
        doc["head"] = [[0.0, 0.0], [0.0, 0.0]]
        path.write_text(json.dumps(doc))
        with pytest.raises(store.MalformedFileError):
            store.load_model(path)


class TestPoolRoundTrip:
    def test_pool_roundtrip(self, tmp_path):
        pool = make_pool(num_classes=7, input_dim=3, spread=2.0, covariance_scale=0.5, seed=11)
        path = tmp_path / "pool.json"
        store.save_pool(pool, path)
        loaded = store.load_pool(path)
        np.testing.assert_array_equal(loaded.prototypes, pool.prototypes)
        assert loaded.class_order == pool.class_order
        assert loaded.seed == pool.seed

    def test_pool_save_deterministic(self, tmp_path):
        pool = make_pool(num_classes=5, input_dim=2, seed=3)
        h1 = store.save_pool(pool, tmp_path / "a.json")
        h2 = store.save_pool(pool, tmp_path / "b.json")
        assert h1 == h2


class TestFeatureCsv:
    def test_tiny_file(self, tmp_path):
        path = tmp_path / "toy.csv"
        path.write_text("f0,f1,label\n1.0,2.0,7\n3.0,4.0,8\n5.0,6.0,7\n")
        data, mapping = store.ingest_feature_csv(path)
        assert data.n == 3
        assert data.instances.shape == (3, 2)
        assert mapping == ["7", "8"]
        assert list(data.labels) == [0, 1, 0]

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(store.DatasetFormatError):
            store.ingest_feature_csv(path)

    def test_header_only_rejected(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("f0,label\n")
        with pytest.raises(store.DatasetFormatError):
            store.ingest_feature_csv(path)

    def test_ragged_rows_rejected(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("f0,f1,label\n1.0,2.0,0\n1.0,0\n")
        with pytest.raises(store.DatasetFormatError):
            store.ingest_feature_csv(path)

    def test_non_numeric_feature_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("f0,label\nfoo,0\n")
        with pytest.raises(store.DatasetFormatError):
            store.ingest_feature_csv(path)

    def test_unknown_label_column_rejected(self, tmp_path):
        path = tmp_path / "col.csv"
        path.write_text("f0,f1\n1.0,2.0\n")
        with pytest.raises(store.DatasetFormatError):
            store.ingest_feature_csv(path)

    def test_thousand_row_roundtrip(self, tmp_path, rng):
        from otdistill.models import LabeledDataset

        X = rng.normal(size=(1000, 5))
        y = rng.integers(0, 4, 1000)
        data = LabeledDataset(X, y, (10, 11, 12, 13))
        path = tmp_path / "big.csv"
        store.export_feature_csv(data, path)
        back, mapping = store.ingest_feature_csv(path)
        np.testing.assert_array_equal(back.instances, data.instances)
        # label ids follow first appearance; values map back to the originals
        recovered = np.array([int(mapping[i]) for i in back.labels])
        original = np.array([data.label_set[i] for i in data.labels])
        np.testing.assert_array_equal(recovered, original)


class TestManifest:
    def _repo(self, tmp_path, n=3):
        for i in range(n):
            arch = Architecture("linear", input_dim=2, embed_dim=2)
            model = build_classifier(arch, (0, 1), seed=i)
            store.save_model(model, tmp_path / f"w{i}.json", model_id=f"w{i}", training={"seed": i})
        manifest = store.build_manifest(tmp_path)
        store.save_manifest(manifest, tmp_path)
        return manifest

    def test_empty_directory_gives_empty_manifest(self, tmp_path):
        manifest = store.build_manifest(tmp_path)
        assert manifest.entries == []

    def test_entries_listed_with_label_sets(self, tmp_path):
        manifest = self._repo(tmp_path, n=10)
        assert len(manifest.entries) == 10
        assert all(e.label_set == (0, 1) for e in manifest.entries)
        assert manifest.teacher_ids == sorted(manifest.teacher_ids)

    def test_verify_flags_exactly_the_modified_entry(self, tmp_path):
        self._repo(tmp_path)
        target = tmp_path / "w1.json"
        doc = json.loads(target.read_text())
        doc["label_set"] = [1, 0]
        target.write_text(json.dumps(doc))
        result = store.verify_manifest(tmp_path)
        assert result.drifted == ["w1"]
        assert sorted(result.ok) == ["w0", "w2"]
        assert not result.clean

    def test_verify_reports_missing(self, tmp_path):
        self._repo(tmp_path)
        (tmp_path / "w2.json").unlink()
        result = store.verify_manifest(tmp_path)
        assert result.missing == ["w2"]

    def test_duplicate_teacher_id_rejected(self, tmp_path):
        arch = Architecture("linear", input_dim=2, embed_dim=2)
        model = build_classifier(arch, (0, 1), seed=0)
        store.save_model(model, tmp_path / "a.json", model_id="dup")
        store.save_model(model, tmp_path / "b.json", model_id="dup")
        with pytest.raises(store.StoreError, match="duplicate"):
            store.build_manifest(tmp_path)

    def test_repository_load_checks_hash(self, tmp_path):
        self._repo(tmp_path)
        repo = store.Repository(tmp_path)
        assert len(repo) == 3
        model = repo.load("w0")
        assert model.label_set == (0, 1)
        # corrupt one model after the manifest was written
        target = tmp_path / "w0.json"
        doc = json.loads(target.read_text())
        doc["head"] = [[1.0, 1.0], [1.0, 1.0]]
        target.write_text(json.dumps(doc))
        with pytest.raises(store.HashMismatchError):
            store.Repository(tmp_path).load("w0")

    def test_manifest_records_pool_hash(self, tmp_path):
        pool = make_pool(num_classes=4, input_dim=2, seed=0)
        pool_path = tmp_path / "pool.json"
        expected = store.save_pool(pool, pool_path)
        self._repo(tmp_path)
        manifest = store.build_manifest(tmp_path, pool_path=pool_path)
        assert manifest.pool_hash == expected

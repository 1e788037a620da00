import numpy as np
import pytest
from hypothesis import given, strategies as st

from mucs.data import Dataset, DatasetError, GeneratedItem, ToyDataSpec, build_toy_dataset, remove_topk, topk_count, \
    topk_ids
from mucs.scoring import AttributionResult


def _result(ds, values, item="g"):
    return AttributionResult("m", item, dict(zip(ds.ids, map(float, values))))


class TestDataset:
    def test_toy_set_shape_range_balance(self):
        ds = build_toy_dataset(ToyDataSpec())
        assert ds.x.shape == (500, 3, 16, 16)
        assert ds.x.min() >= -1 and ds.x.max() <= 1
        assert np.bincount(ds.c).tolist() == [50] * 10
        # calibrated so that the second moment sits near sigma_data^2
        assert float(np.mean(ds.x.astype(np.float64) ** 2)) == pytest.approx(0.25, abs=0.02)

    def test_toy_set_is_reproducible(self):
        a = build_toy_dataset(ToyDataSpec(size=30, seed=4))
        b = build_toy_dataset(ToyDataSpec(size=30, seed=4))
        assert a.manifest_hash() == b.manifest_hash()
        assert build_toy_dataset(ToyDataSpec(size=30, seed=5)).manifest_hash() != a.manifest_hash()

    def test_unconditional(self):
        ds = build_toy_dataset(ToyDataSpec(size=20, conditional=False))
        assert ds.c is None and ds.cond_mode == "none" and ds.cond_batch([0]) is None

    def test_immutable(self, tiny_data):
        with pytest.raises(ValueError):
            tiny_data.x[0, 0, 0, 0] = 0.0

    def test_validation(self):
        x = np.zeros((2, 3, 4, 4), dtype=np.float32)
        with pytest.raises(DatasetError):
            Dataset(("a", "a"), x)
        with pytest.raises(DatasetError):
            Dataset(("a", "b"), x + 2)
        with pytest.raises(DatasetError):
            Dataset(("a",), x)
        with pytest.raises(DatasetError):
            build_toy_dataset(ToyDataSpec(size=5))

    def test_save_load_roundtrip(self, tiny_data, tmp_path):
        tiny_data.save(tmp_path / "d")
        back = Dataset.load(tmp_path / "d")
        assert back.ids == tiny_data.ids
        assert np.array_equal(back.x, tiny_data.x) and np.array_equal(back.c, tiny_data.c)

    def test_load_detects_tampering(self, tiny_data, tmp_path):
        d = tiny_data.save(tmp_path / "d")
        lines = (d / "manifest.jsonl").read_text().splitlines()
        lines[1], lines[2] = lines[2], lines[1]
        (d / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError):
            Dataset.load(d)

    def test_without(self, tiny_data):
        reduced = tiny_data.without(tiny_data.ids[:3])
        assert len(reduced) == len(tiny_data) - 3
        assert set(reduced.ids).isdisjoint(tiny_data.ids[:3])
        with pytest.raises(DatasetError):
            tiny_data.without(["nope"])

    def test_generated_item_record_roundtrip(self, tiny_item):
        back = GeneratedItem.from_record(tiny_item.to_record())
        assert back.id == tiny_item.id and back.seed == tiny_item.seed and back.c_hat == tiny_item.c_hat
        assert np.allclose(back.x_hat, tiny_item.x_hat)


class TestTopk:
    @given(st.floats(0.001, 0.99), st.integers(1, 5000))
    def test_topk_count_matches_ceiling(self, k, n):
        count = topk_count(k, n)
        assert count >= 1
        assert count >= k * n - 1e-6
        assert count - 1 < max(k * n, 1) + 1e-6

    def test_topk_count_rounding_guard(self):
        assert topk_count(0.02, 350) == 7
        assert topk_count(0.02, 500) == 10

    def test_ties_broken_by_id(self):
        assert topk_ids({"b": 1.0, "a": 1.0, "c": 0.5}, 2) == ("a", "b")

    def test_remove_union(self, tiny_data):
        n = len(tiny_data)
        r1 = _result(tiny_data, np.arange(n), "g1")
        r2 = _result(tiny_data, -np.arange(n), "g2")
        reduced, removal = remove_topk(tiny_data, [r1, r2], 0.05)
        assert set(removal.ids) == {tiny_data.ids[-1], tiny_data.ids[-2], tiny_data.ids[0], tiny_data.ids[1]}
        assert len(reduced) == n - 4
        assert removal.per_item["g1"] == (tiny_data.ids[-1], tiny_data.ids[-2])

    def test_remove_rejects_incomplete_or_exhausting(self, tiny_data):
        partial = AttributionResult("m", "g", {tiny_data.ids[0]: 1.0})
        with pytest.raises(DatasetError):
            remove_topk(tiny_data, [partial], 0.05)
        with pytest.raises(DatasetError):
            remove_topk(tiny_data, [], 0.05)
        with pytest.raises(DatasetError):
            remove_topk(tiny_data, [_result(tiny_data, np.zeros(len(tiny_data)))], 0.0)
        rng = np.random.default_rng(0)
        many = [_result(tiny_data, rng.permutation(len(tiny_data)), f"g{i}") for i in range(200)]
        with pytest.raises(DatasetError):
            remove_topk(tiny_data, many, 0.5)

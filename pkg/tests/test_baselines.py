import numpy as np
import pytest

from mucs.baselines import AutoencoderEmbedder, FlattenEmbedder, RandomProjectionEmbedder, attribute_condition_cosine, \
    attribute_embedding_cosine, attribute_forward_inf, attribute_random, cosine_rows
from mucs.data import Dataset, GeneratedItem, ToyDataSpec, build_toy_dataset
from mucs.diffusion.config import ConfigError
from mucs.rng import Stream


def _item(x, c=0, item_id="q"):
    return GeneratedItem(item_id, np.asarray(x, dtype=np.float32), c, 0, "none", (0.002, 80.0, 7.0, 6), 1.5)


def test_random_reproducible_per_key(tiny_data):
    a = attribute_random(tiny_data, Stream(1).child("r"), "g")
    b = attribute_random(tiny_data, Stream(1).child("r"), "g")
    c = attribute_random(tiny_data, Stream(2).child("r"), "g")
    assert a.scores == b.scores != c.scores
    assert set(a.scores) == set(tiny_data.ids)


def test_condition_cosine_is_class_indicator(tiny_data):
    res = attribute_condition_cosine(tiny_data, _item(tiny_data.x[0], c=3))
    for i, c in zip(tiny_data.ids, tiny_data.c):
        assert res.scores[i] == (1.0 if c == 3 else 0.0)


def test_condition_cosine_top_k_is_the_item_class(tiny_data):
    res = attribute_condition_cosine(tiny_data, _item(tiny_data.x[0], c=5))
    top = res.ranking()[: int((tiny_data.c == 5).sum())]
    assert all(tiny_data.c[tiny_data.ids.index(i)] == 5 for i in top)


def test_condition_cosine_needs_conditions():
    ds = build_toy_dataset(ToyDataSpec(size=20, conditional=False))
    with pytest.raises(ConfigError):
        attribute_condition_cosine(ds, _item(ds.x[0]))


def test_cosine_rows_guards_zero_norm():
    got = cosine_rows(np.array([[1.0, 0.0], [0.0, 0.0], [-2.0, 0.0]]), np.array([3.0, 0.0]))
    assert got.tolist() == [1.0, 0.0, -1.0]


@pytest.mark.parametrize("embedder", [FlattenEmbedder(), RandomProjectionEmbedder(seed=3)])
def test_exact_copy_scores_one_and_ranks_first(tiny_data, embedder):
    res = attribute_embedding_cosine(tiny_data, _item(tiny_data.x[11]), embedder)
    assert res.scores[tiny_data.ids[11]] == pytest.approx(1.0, abs=1e-12)
    assert res.ranking()[0] == tiny_data.ids[11]
    assert res.method == f"cos-{embedder.name}"


def test_flatten_prefers_near_duplicate(tiny_data, rng):
    target = np.clip(tiny_data.x[4] + 0.01 * rng.standard_normal(tiny_data.x[4].shape), -1, 1)
    res = attribute_embedding_cosine(tiny_data, _item(target), FlattenEmbedder())
    assert res.ranking()[0] == tiny_data.ids[4]


def test_projection_dimension_checked():
    with pytest.raises(ConfigError):
        RandomProjectionEmbedder(input_dim=10).embed(np.zeros((1, 3, 4, 4)))


def test_autoencoder_deterministic(tiny_data):
    a = AutoencoderEmbedder.fit(tiny_data, latent=8, steps=5, batch_size=8, seed=1)
    b = AutoencoderEmbedder.fit(tiny_data, latent=8, steps=5, batch_size=8, seed=1)
    ea, eb = a.embed(tiny_data.x[:3]), b.embed(tiny_data.x[:3])
    assert ea.shape == (3, 8) and np.array_equal(ea, eb)


class TestForwardInf:
    def test_zero_steps_scores_zero(self, tiny_data, tiny_item, tiny_f1):
        res, trace = attribute_forward_inf(tiny_data, tiny_item, tiny_f1, 0, 1e-3, Stream(0), num_draws=4)
        assert trace.steps == 0 and res.meta["f2"] == tiny_f1.digest()
        # F1 and F2 see independent draws, so the differences only vanish on average
        v = np.array(list(res.scores.values()))
        assert abs(v.mean()) < 3 * v.std(ddof=1) / np.sqrt(v.size)

    def test_ascent_is_unbounded(self, tiny_data, tiny_item, tiny_f1, tiny_null):
        res, trace = attribute_forward_inf(tiny_data, tiny_item, tiny_f1, 40, 1e-2, Stream(0), num_draws=4)
        assert trace.steps == 40
        assert max(trace.ga_terms()) > tiny_null.value
        assert res.method == "forward-inf" and res.meta["steps"] == 40

    def test_negative_steps_rejected(self, tiny_data, tiny_item, tiny_f1):
        with pytest.raises(ConfigError):
            attribute_forward_inf(tiny_data, tiny_item, tiny_f1, -1, 1e-3, Stream(0))

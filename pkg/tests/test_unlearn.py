import dataclasses

import pytest
import torch

from mucs.diffusion.config import ConfigError
from mucs.diffusion.network import group_of
from mucs.null_loss import NullLossEstimate
from mucs.rng import Stream
from mucs.unlearn import StepCap, UnlearnConfig, UnlearnTrace, UnlearningError, parse_mode, unlearn, unlearn_variant


def _null(value):
    return NullLossEstimate(value, 1, (value,), "x", 0, "k")


def _changed(f1, f2):
    return {n for n in f1.weights if not torch.equal(f1.weights[n], f2.weights[n])}


def test_mlp_mask_leaves_everything_else_bit_identical(tiny_f1, train_item, tiny_data, tiny_null):
    f2, trace = unlearn(tiny_f1, train_item, tiny_data, tiny_null, UnlearnConfig(max_steps=15), Stream(0))
    assert trace.steps > 0
    changed = _changed(tiny_f1, f2)
    assert changed
    assert {group_of(n) for n in changed} <= {"cond_mlp", "block_mlp"}
    assert f2.role == "F2" and f2.provenance["parent"] == tiny_f1.digest()


def test_mask_all_touches_every_group(tiny_f1, tiny_item, tiny_data, tiny_null):
    f2, _ = unlearn_variant(tiny_f1, tiny_item, tiny_data, tiny_null, "mask=all+fixed-steps=3", Stream(0))
    groups = {group_of(n) for n in _changed(tiny_f1, f2)}
    assert groups == {"encoder", "decoder", "cond_embed", "cond_mlp", "block_mlp", "block_mod"}


def test_already_at_threshold_costs_zero_steps(tiny_f1, tiny_item, tiny_data):
    # a null loss far below the item's loss puts it past 0.95 * L_null at once
    f2, trace = unlearn(tiny_f1, tiny_item, tiny_data, _null(1e-6), UnlearnConfig(), Stream(0))
    assert trace.steps == 0 and trace.stop_reason == "threshold"
    assert f2.same_weights(tiny_f1)


def test_ga_term_bounded_by_null_every_step(tiny_f1, train_item, tiny_data, tiny_null):
    cfg = UnlearnConfig(max_steps=25, lam=0.3)
    _, trace = unlearn(tiny_f1, train_item, tiny_data, tiny_null, cfg, Stream(1))
    assert trace.steps > 0
    assert all(cfg.lam * ga <= cfg.lam * tiny_null.value + 1e-12 for ga in trace.ga_terms())


def test_stops_at_threshold_when_reachable(tiny_f1, train_item, tiny_data, tiny_null):
    cfg = UnlearnConfig(lr=5e-3, max_steps=500)
    _, trace = unlearn(tiny_f1, train_item, tiny_data, tiny_null, cfg, Stream(2))
    assert trace.stop_reason == "threshold"
    assert trace.final_ga >= 0.95 * tiny_null.value
    assert all(ga < 0.95 * tiny_null.value for ga in trace.ga_terms())


@pytest.mark.parametrize("n", [0, 1, 7])
def test_fixed_steps_exact(tiny_f1, tiny_item, tiny_data, tiny_null, n):
    _, trace = unlearn_variant(tiny_f1, tiny_item, tiny_data, tiny_null, f"fixed-steps={n}", Stream(0))
    assert trace.steps == n and trace.stop_reason == "fixed"


def test_fixed_steps_ignore_threshold(tiny_f1, tiny_item, tiny_data):
    _, trace = unlearn_variant(tiny_f1, tiny_item, tiny_data, _null(1e-6), "fixed-steps=4", Stream(0))
    assert trace.steps == 4


def test_lambda_isolated(tiny_f1, train_item, tiny_data, tiny_null):
    base = UnlearnConfig(fixed_steps=1, clamp=True, stop_rule=False)
    _, a = unlearn(tiny_f1, train_item, tiny_data, tiny_null, base, Stream(5))
    _, b = unlearn(tiny_f1, train_item, tiny_data, tiny_null, parse_mode("lambda=0.1", base), Stream(5))
    (ft_a, ga_a, obj_a), (ft_b, ga_b, obj_b) = a.rows[0], b.rows[0]
    assert (ft_a, ga_a) == (ft_b, ga_b)
    assert obj_a == pytest.approx(ft_a - 0.2 * ga_a, rel=1e-5)
    assert obj_b == pytest.approx(ft_b - 0.1 * ga_b, rel=1e-5)


def test_reproducible(tiny_f1, train_item, tiny_data, tiny_null):
    cfg = UnlearnConfig(max_steps=5)
    a, _ = unlearn(tiny_f1, train_item, tiny_data, tiny_null, cfg, Stream(9))
    b, _ = unlearn(tiny_f1, train_item, tiny_data, tiny_null, cfg, Stream(9))
    assert a.same_weights(b) and not a.same_weights(tiny_f1)


def test_f1_untouched(tiny_f1, train_item, tiny_data, tiny_null):
    before = {n: t.clone() for n, t in tiny_f1.weights.items()}
    unlearn(tiny_f1, train_item, tiny_data, tiny_null, UnlearnConfig(max_steps=3), Stream(0))
    assert all(torch.equal(before[n], tiny_f1.weights[n]) for n in before)


def test_divergence_aborts_with_trace(tiny_f1, tiny_item, tiny_data):
    cfg = UnlearnConfig(lam=1.0, mask="all", clamp=False, stop_rule=False, fine_tune=False, fixed_steps=400, lr=50.0)
    with pytest.raises(UnlearningError) as info:
        unlearn(tiny_f1, tiny_item, tiny_data, None, cfg, Stream(0))
    assert info.value.trace.stop_reason == "diverged"
    assert info.value.trace.steps < 400


def test_requires_null_for_clamp(tiny_f1, tiny_item, tiny_data):
    with pytest.raises(ConfigError):
        unlearn(tiny_f1, tiny_item, tiny_data, None, UnlearnConfig(), Stream(0))


def test_rejects_non_f1(tiny_f1, tiny_item, tiny_data, tiny_null):
    with pytest.raises(ConfigError):
        unlearn(tiny_f1.with_role("F2"), tiny_item, tiny_data, tiny_null, UnlearnConfig(), Stream(0))


class TestModes:
    def test_parse(self):
        cfg = parse_mode("lambda=0.1+mask=blocks+sigma-shift")
        assert (cfg.lam, cfg.mask, cfg.sigma_shift) == (0.1, "blocks", 0.3)
        fixed = parse_mode("fixed-steps=109")
        assert fixed.fixed_steps == 109 and not fixed.clamp and not fixed.stop_rule
        assert not parse_mode("ga-only").fine_tune
        assert parse_mode("default") == dataclasses.replace(UnlearnConfig(), mode="default")

    @pytest.mark.parametrize("mode", ["lambda", "warp=3", "fixed-steps", "lambda=2"])
    def test_unknown_rejected(self, mode):
        with pytest.raises(ConfigError):
            parse_mode(mode)


def test_step_cap_median():
    cap = StepCap()
    assert cap.value == 2000
    for steps in (10, 30, 20):
        t = UnlearnTrace("default", 1.0, 0.2, [(0, 0, 0)] * steps, "threshold")
        cap.record(t)
    cap.record(UnlearnTrace("default", 1.0, 0.2, [(0, 0, 0)] * 99, "cap"))
    assert cap.value == 400

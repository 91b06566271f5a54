import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kdlab import autodiff as ad
from kdlab.autodiff import Tensor
from kdlab.errors import ConfigError, DataError, DimensionError, ParameterError
from kdlab.losses import (
    DistillConfig,
    at_loss,
    attention_map,
    ce_loss,
    composite_loss,
    count_branches,
    entropy,
    kd_loss,
    soften,
)

TAUS = [0.5, 1.0, 4.0, 20.0]
logit_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 8)), elements=st.floats(-30, 30))


def test_ce_matches_manual():
    z = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    y = np.array([0, 2])
    with ad.default_dtype(np.float64):
        got = ce_loss(Tensor(z), y).item()
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert got == pytest.approx(-(ls[0, 0] + ls[1, 2]) / 2, rel=1e-12)


def test_ce_label_checks():
    with pytest.raises(DataError):
        ce_loss(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DimensionError):
        ce_loss(Tensor(np.zeros((2, 3))), [0])


@given(logit_rows, st.sampled_from(TAUS))
def test_kd_at_match_is_tau_squared_entropy(z, tau):
    with ad.default_dtype(np.float64):
        got = kd_loss(Tensor(z), z, tau).item()
        want = tau**2 * entropy(soften(Tensor(z), tau).data).mean()
    assert got == pytest.approx(want, rel=1e-6, abs=1e-9)


@given(logit_rows, st.integers(0, 2**31 - 1))
def test_kd_lower_bound(t, seed):
    s = np.random.default_rng(seed).normal(scale=5, size=t.shape)
    with ad.default_dtype(np.float64):
        assert kd_loss(Tensor(s), t, 4.0).item() >= kd_loss(Tensor(t), t, 4.0).item() - 1e-9


@given(arrays(np.float64, (20, 10), elements=st.floats(-50, 50)))
def test_soften_preserves_argmax(z):
    # rows whose top two logits differ by less than rounding cannot be ordered after softening
    top2 = np.sort(z, axis=1)[:, -2:]
    keep = top2[:, 1] - top2[:, 0] > 1e-6
    base = z.argmax(axis=1)[keep]
    for tau in TAUS:
        with ad.default_dtype(np.float64):
            assert np.array_equal(soften(Tensor(z), tau).data.argmax(axis=1)[keep], base)


@given(arrays(np.float64, (4, 6), elements=st.floats(-10, 10)))
def test_entropy_nondecreasing_in_temperature(z):
    with ad.default_dtype(np.float64):
        h = [entropy(soften(Tensor(z), t).data) for t in sorted(TAUS + [2.0, 8.0])]
    for lo, hi in zip(h, h[1:]):
        assert np.all(hi >= lo - 1e-9)


def test_entropy_uniform_and_onehot():
    np.testing.assert_allclose(entropy(np.full((1, 4), 0.25)), [np.log(4)])
    np.testing.assert_allclose(entropy(np.array([[1.0, 0.0, 0.0]])), [0.0])


def test_kd_gradient_does_not_reach_teacher():
    s = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    t = Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
    with ad.Tape():
        loss = kd_loss(s, t, 4.0)
    ad.backward(loss)
    assert s.grad is not None and t.grad is None


def test_kd_shape_mismatch():
    with pytest.raises(DimensionError):
        kd_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)), 4.0)


def test_temperature_must_be_positive():
    with pytest.raises(ParameterError):
        kd_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), 0.0)


def test_attention_map_is_unit_norm(rng):
    a = Tensor(rng.standard_normal((3, 4, 5, 5)))
    m = attention_map(a).data
    assert m.shape == (3, 25)
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, rtol=1e-5)
    with pytest.raises(DimensionError):
        attention_map(Tensor(np.ones((3, 4))))


def test_at_loss_zero_on_identical_maps_and_beta_zero(rng):
    maps = [attention_map(Tensor(rng.standard_normal((2, 3, 4, 4))))]
    assert at_loss(maps, [m.data for m in maps], 1000.0).item() == 0.0
    other = [attention_map(Tensor(rng.standard_normal((2, 3, 4, 4))))]
    assert at_loss(maps, other, 0.0).item() == 0.0
    assert at_loss(maps, other, 2.0).item() == pytest.approx(2 * at_loss(maps, other, 1.0).item(), rel=1e-6)


def test_at_loss_mismatch_lists_blocks(rng):
    s = [Tensor(np.ones((2, 16))), Tensor(np.ones((2, 4)))]
    t = [np.ones((2, 16)), np.ones((2, 9))]
    with pytest.raises(ConfigError, match="block 1"):
        at_loss(s, t, 1.0)
    with pytest.raises(ConfigError, match="blocks"):
        at_loss(s, t[:1], 1.0)


def _outs(rng, n=6, k=4):
    return (Tensor(rng.standard_normal((n, k))), []), (rng.standard_normal((n, k)), []), rng.integers(0, k, n)


def test_alpha_one_is_bitwise_ce(rng):
    s, t, y = _outs(rng)
    got = composite_loss(s, t, y, DistillConfig(alpha=1.0), epoch=0).data
    assert got.tobytes() == ce_loss(s[0], y).data.tobytes()


def test_alpha_zero_is_pure_kd(rng):
    s, t, y = _outs(rng)
    got = composite_loss(s, t, y, DistillConfig(alpha=0.0, temperature=3.0), epoch=0).item()
    assert got == pytest.approx(kd_loss(s[0], t[0], 3.0).item(), rel=1e-6)


def test_composite_mix(rng):
    s, t, y = _outs(rng)
    cfg = DistillConfig(alpha=0.9, temperature=4.0)
    want = 0.9 * ce_loss(s[0], y).item() + 0.1 * kd_loss(s[0], t[0], 4.0).item()
    assert composite_loss(s, t, y, cfg, epoch=0).item() == pytest.approx(want, rel=1e-5)


def test_switch_drops_teacher_branch(rng):
    s, t, y = _outs(rng)
    cfg = DistillConfig(alpha=0.9, switch_epoch=3)
    with count_branches() as c:
        composite_loss(s, t, y, cfg, epoch=2)
        after = composite_loss(s, None, y, cfg, epoch=3)
    assert c[("kd", 2)] == 1 and c[("kd", 3)] == 0 and c[("ce", 3)] == 1
    assert after.data.tobytes() == ce_loss(s[0], y).data.tobytes()


def test_missing_teacher_is_config_error(rng):
    s, _, y = _outs(rng)
    with pytest.raises(ConfigError):
        composite_loss(s, None, y, DistillConfig(), epoch=0)


def test_at_branch_runs_with_maps(rng):
    a = Tensor(rng.standard_normal((2, 3, 4, 4)))
    s = (Tensor(rng.standard_normal((2, 3))), [a])
    t = (rng.standard_normal((2, 3)), [rng.standard_normal((2, 5, 4, 4))])
    with count_branches() as c:
        composite_loss(s, t, np.array([0, 1]), DistillConfig(at_beta=10.0), epoch=0)
    assert c[("at", 0)] == 1


@pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(temperature=0.0), dict(at_beta=-1.0), dict(switch_epoch=-1)])
def test_distill_config_validation(kw):
    with pytest.raises(ParameterError):
        DistillConfig(**kw).validate()


def test_switch_beyond_schedule():
    with pytest.raises(ParameterError):
        DistillConfig(switch_epoch=11).validate(total_epochs=10)
    DistillConfig(switch_epoch=10).validate(total_epochs=10)


def test_distill_config_round_trip():
    cfg = DistillConfig(0.5, 20.0, 0.0, 7)
    assert DistillConfig.from_dict(cfg.to_dict()) == cfg

import itertools

import numpy as np
import pytest

from lesionseg import ops
from lesionseg.gradcheck import grad_check
from lesionseg.network import (
    VARIANT_ROWS,
    MiniInception,
    Network,
    NetworkConfig,
    VariantFlags,
    analytic_parameter_count,
    make_variant,
)
from lesionseg.tensor import Tensor

TINY = NetworkConfig(num_stages=2, base_channels=2, num_classes=3)
# Two input channels: with a single channel the 1x1x1 convs of the first block
# feed batch norm with one scalar weight per output, so their exact gradient is
# zero by scale invariance and a relative error is meaningless there.
E2E = NetworkConfig(num_stages=3, base_channels=2, num_classes=3, input_channels=2)


def e2e_loss_check(seed: int, config: NetworkConfig = E2E, max_entries: int = 3):
    """Sampled finite-difference check of dice_ce_loss w.r.t. every parameter tensor."""
    net = Network(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, config.input_channels, 8, 8, 8))
    y = rng.integers(0, config.num_classes, size=(2, 8, 8, 8))
    params = list(net.parameters.values())

    def fn(*_):
        return ops.dice_ce_loss(net.forward(Tensor(x)), y)

    return grad_check(fn, params, h=1e-6, tol=1e-3, max_entries=max_entries, seed=seed)


def test_desk_parameter_count_matches_closed_form():
    cfg = NetworkConfig(num_classes=3)
    net = Network(cfg)
    assert net.parameter_count() == analytic_parameter_count(cfg) == 2_657_299


@pytest.mark.parametrize("row", sorted(VARIANT_ROWS))
@pytest.mark.parametrize("deep", [False, True])
def test_parameter_count_closed_form_all_variants(row, deep):
    cfg = make_variant(NetworkConfig(num_stages=3, base_channels=4, num_classes=5, deep_supervision=deep), row)
    assert Network(cfg).parameter_count() == analytic_parameter_count(cfg)


@pytest.mark.parametrize("row", sorted(VARIANT_ROWS))
def test_variant_forward_shapes(row):
    cfg = make_variant(NetworkConfig(num_stages=3, base_channels=4, num_classes=4), row)
    net = Network(cfg)
    out = net.forward(np.zeros((2, 1, 8, 12, 16), np.float32))
    assert out.shape == (2, 4, 8, 12, 16)


def test_variant_rows_match_flag_matrix():
    rows = {k: v.as_tuple() for k, v in VARIANT_ROWS.items()}
    assert rows == {
        "I": (False, False, False),
        "II": (False, True, True),
        "III": (True, False, True),
        "IV": (True, True, False),
        "V": (True, True, True),
    }


def test_strict_capacity_order_for_every_flag_superset():
    base = NetworkConfig(num_stages=3, base_channels=4, num_classes=3)
    flags = [VariantFlags(*bits) for bits in itertools.product((False, True), repeat=3)]
    counts = {f: Network(NetworkConfig(**{**base.__dict__, "variant": f})).parameter_count() for f in flags}
    for a, b in itertools.permutations(flags, 2):
        if a.issubset(b):
            assert counts[a] < counts[b], (a, b)


def test_deep_supervision_outputs():
    cfg = NetworkConfig(num_stages=4, base_channels=2, num_classes=3, deep_supervision=True)
    outs = Network(cfg).forward(np.zeros((1, 1, 16, 16, 16), np.float32), return_aux=True)
    assert [o.shape for o in outs] == [(1, 3, 16, 16, 16), (1, 3, 4, 4, 4), (1, 3, 8, 8, 8)]


def test_indivisible_input_rejected():
    with pytest.raises(ValueError, match="divisible"):
        Network(NetworkConfig(num_stages=3, base_channels=2)).forward(np.zeros((1, 1, 8, 8, 6), np.float32))


def test_wrong_channel_count_rejected():
    with pytest.raises(ValueError):
        Network(TINY).forward(np.zeros((1, 2, 4, 4, 4), np.float32))


def test_invalid_configs():
    with pytest.raises(ValueError):
        NetworkConfig(num_stages=1)
    with pytest.raises(ValueError):
        NetworkConfig(num_classes=1)
    with pytest.raises(ValueError):
        make_variant(NetworkConfig(), "VI")


def test_same_seed_same_weights():
    a, b = Network(TINY, seed=7), Network(TINY, seed=7)
    c = Network(TINY, seed=8)
    for n in a.parameters:
        np.testing.assert_array_equal(a.parameters[n].data, b.parameters[n].data)
    assert any(not np.array_equal(a.parameters[n].data, c.parameters[n].data) for n in a.parameters)


def test_mini_inception_residual_identity_when_channels_match():
    rng = np.random.default_rng(0)
    blk = MiniInception(rng, 3, 3, VariantFlags(True, True, True))
    assert blk.proj is None
    blk2 = MiniInception(rng, 2, 3, VariantFlags(True, True, True))
    assert blk2.proj is not None


def test_right_branch_first_norm_has_no_shift():
    blk = MiniInception(np.random.default_rng(0), 2, 4, VariantFlags(True, True, True))
    assert blk.right1.bn.beta is None and blk.right2.bn.beta is not None
    names = {n for n, _ in blk.named_parameters()}
    assert "right1.bn.beta" not in names and "right1.bn.gamma" in names


def test_every_parameter_receives_gradient():
    # 16^3 keeps the bottleneck at 4^3; at 2^3 the zero-padded corner taps of a
    # 3x3x3 kernel see only two voxels and die with ReLU far more often
    net = Network(NetworkConfig(num_stages=3, base_channels=2, num_classes=3), seed=1, dtype=np.float64)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 1, 16, 16, 16))
    y = rng.integers(0, 3, size=(2, 16, 16, 16))
    ops.dice_ce_loss(net.forward(Tensor(x)), y).backward()
    total = nonzero = 0
    for name, t in net.parameters.items():
        assert t.grad is not None, name
        total += t.grad.size
        nonzero += int(np.count_nonzero(t.grad))
    assert nonzero / total > 0.99


def test_state_arrays_cover_parameters_and_buffers():
    net = Network(TINY)
    state = net.state_arrays()
    assert set(net.parameters) <= set(state)
    assert any(k.endswith("running_mean") for k in state)


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient_sample(seed):
    # the acceptance suite runs 20 seeds
    rep = e2e_loss_check(seed)
    assert rep.max_rel_error < 1e-3

from types import SimpleNamespace

import numpy as np
import pytest

from cumnet.complexity import layer_mac, network_mac, training_complexity, zero_aware_mac
from cumnet.engine import Conv2D, Dense, Layer, Network, build_vgg
from cumnet.errors import AccountingError
from cumnet.morph import deepen_at
from cumnet.prune import PruneConfig, freeze_net2net_zero_mask, prune_filters

from oracles import count_macs_loop


def stage(it, mac):
    return SimpleNamespace(iterations=it, macs=mac)


def test_dense_mac():
    assert layer_mac(Dense(4, 3), (4,)) == 12


def test_conv_mac_matches_loop_count():
    conv = Conv2D(1, 2, 3, padding=1)
    assert layer_mac(conv, (1, 8, 8)) == 1152
    net = build_vgg([2], (1, 8, 8), 2, batch_norm=False)
    assert count_macs_loop(net) - 2 * 8 * 8 * 2 == 1152


def test_empty_layer_is_zero():
    assert layer_mac(Conv2D(3, 0, 3), (3, 5, 5)) == 0
    assert layer_mac(Dense(0, 4), (0,)) == 0


def test_unknown_kind_rejected():
    class Weird(Layer):
        kind = "Weird"
    with pytest.raises(AccountingError):
        layer_mac(Weird(), (1,))


def test_single_layer_net_equals_layer_mac():
    net = Network([Dense(5, 3)], (5,), 3)
    assert network_mac(net) == layer_mac(net.layers[0], (5,)) == 15


def test_two_layer_hand_sum():
    net = build_vgg([], (6,), 3, hidden=(4,))
    assert network_mac(net) == 6 * 4 + 4 * 3


@pytest.mark.parametrize("seed", range(4))
def test_vgg_net_matches_loop_counter(seed):
    rng = np.random.default_rng(seed)
    cfg = [int(rng.integers(1, 5)), "M", int(rng.integers(1, 5))]
    net = build_vgg(cfg, (int(rng.integers(1, 3)), 8, 8), 4, seed=seed)
    assert network_mac(net) == count_macs_loop(net)


def test_zero_aware_equals_dense_without_zeros():
    net = build_vgg([3, "M", 4], (1, 8, 8), 3, seed=1)
    assert zero_aware_mac(net) == network_mac(net)


def test_half_zero_conv_weights_halve_conv_macs():
    net = build_vgg([4, 4], (1, 6, 6), 3, seed=2, batch_norm=False)
    conv_before = sum(layer_mac(net.layers[i], s) for i, s in zip(net.conv_layers(), [(1, 6, 6), (4, 6, 6)]))
    for i in net.conv_layers():
        w = net.layers[i].params["weight"]
        flat = w.reshape(-1)
        flat[::2] = 0
    dense_part = network_mac(net) - conv_before
    assert zero_aware_mac(net) - dense_part == conv_before // 2


def test_zero_aware_after_prune_and_mask_matches_skip_counter():
    net = build_vgg([6, "M", 6], (1, 8, 8), 4, seed=3)
    net, _ = prune_filters(net, PruneConfig(0.5, scope="layer"))
    net, _ = deepen_at(net, 0)
    net = freeze_net2net_zero_mask(net)
    assert zero_aware_mac(net) == count_macs_loop(net, skip_zero_weights=True)
    assert zero_aware_mac(net) < network_mac(net)


def test_complexity_product_arithmetic():
    rep = training_complexity([stage(10, 100), stage(20, 200)])
    assert rep.total == 5000
    assert [s.product for s in rep.stages] == [1000, 4000]
    assert training_complexity([stage(7, 13)]).total == 91


def test_ratio_and_linearity():
    cum = [stage(10, 100), stage(20, 200)]
    base = [stage(30, 200)]
    rep = training_complexity(cum, baseline=base)
    assert rep.baseline_total == 6000 and rep.ratio == pytest.approx(5000 / 6000)
    c = 3
    assert training_complexity([stage(10 * c, 100), stage(20 * c, 200)]).total == c * rep.total
    assert training_complexity([stage(10, 100 * c), stage(20, 200 * c)]).total == c * rep.total
    # scaling the per-iteration cost leaves the ratio unchanged
    assert training_complexity(cum, base, cost_per_iteration=96).ratio == rep.ratio


def test_empty_reports_rejected():
    with pytest.raises(AccountingError):
        training_complexity([])


def test_per_stage_cost_factors():
    rep = training_complexity([stage(10, 100), stage(20, 200)], cost_per_iteration=[2, 3])
    assert rep.total == 2 * 1000 + 3 * 4000
    with pytest.raises(AccountingError):
        training_complexity([stage(1, 1)], cost_per_iteration=[1, 2])


def test_one_stage_baseline_consistency():
    base = [stage(42, 777)]
    assert training_complexity(base).total == training_complexity(base, base).baseline_total == 42 * 777
    assert training_complexity(base, base).ratio == 1.0

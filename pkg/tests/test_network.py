import numpy as np
import pytest

from gateca import CheckpointError, gates
from gateca.gates import GateDistribution, mixture_forward
from gateca.network import (
    Layer, WiringError, WiringSpec, backward, backward_batch, build_wiring,
    forward_hard, forward_hard_batch, forward_soft, forward_soft_batch,
    init_params, load_params, save_params, sharpened, LogicNetwork,
)

from helpers import fd_gradient, rel_err

RNG = np.random.default_rng(99)


def one_hot_net(wiring, ops_per_layer):
    logits = []
    for layer, ops in zip(wiring.layers, ops_per_layer):
        arr = np.zeros((layer.width, 16))
        arr[np.arange(layer.width), ops] = 1000.0
        logits.append(arr)
    return LogicNetwork(wiring, logits)


# ---------------------------------------------------------------- wiring

def test_wiring_determinism():
    w1 = build_wiring(17, [128, 64], "cover_inputs_then_random", seed=7)
    w2 = build_wiring(17, [128, 64], "cover_inputs_then_random", seed=7)
    for l1, l2 in zip(w1.layers, w2.layers):
        assert np.array_equal(l1.in0, l2.in0)
        assert np.array_equal(l1.in1, l2.in1)


def test_cover_policy_covers_inputs():
    w = build_wiring(17, [128, 128], "cover_inputs_then_random", seed=3)
    used = set(w.layers[0].in0) | set(w.layers[0].in1)
    assert used == set(range(17))


def test_cover_policy_covers_every_layer():
    w = build_wiring(264, [256, 256], "cover_inputs_then_random", seed=5)
    for layer, prev in zip(w.layers, [264, 256]):
        used = set(layer.in0) | set(layer.in1)
        assert used == set(range(prev))


def test_halving_pairs_structure():
    w = build_wiring(16, [8, 4, 2, 1], "halving_pairs", seed=0)
    for layer in w.layers:
        assert np.array_equal(layer.in0, 2 * np.arange(layer.width))
        assert np.array_equal(layer.in1, 2 * np.arange(layer.width) + 1)


def test_wiring_rejects_width_one_source():
    with pytest.raises(WiringError):
        build_wiring(8, [4, 1, 2], "uniform_random", seed=0)
    with pytest.raises(WiringError):
        build_wiring(1, [4], "cover_inputs_then_random", seed=0)


def test_wiring_forbids_equal_pair():
    for policy in ("cover_inputs_then_random", "uniform_random"):
        w = build_wiring(9, [50, 50], policy, seed=11)
        for layer in w.layers:
            assert np.all(layer.in0 != layer.in1)
    with pytest.raises(WiringError):
        WiringSpec(4, [Layer([0, 1], [0, 2])])


def test_wiring_rejects_out_of_range():
    with pytest.raises(WiringError):
        WiringSpec(4, [Layer([0, 4], [1, 2])])


# ---------------------------------------------------------------- init

def test_init_determinism_and_sigma_zero():
    w = build_wiring(9, [8, 4], seed=1)
    n1 = init_params(w, ("normal", 1.0), seed=42)
    n2 = init_params(w, ("normal", 1.0), seed=42)
    for a, b in zip(n1.logits, n2.logits):
        assert np.array_equal(a, b)

    flat = init_params(w, ("normal", 0.0), seed=0)
    assert all(np.all(arr == 0) for arr in flat.logits)
    out, _ = forward_soft(flat, np.zeros(9))
    assert np.allclose(out, 0.5, atol=1e-12)


def test_passthrough_bias_argmax():
    w = build_wiring(9, [8, 4], seed=1)
    net = init_params(w, ("passthrough_bias", 1.0, 5.0), seed=9)
    for arr in net.logits:
        assert np.all(np.argmax(arr, axis=1) == gates.A)


# ---------------------------------------------------------------- forward

def test_single_node_and():
    w = WiringSpec(2, [Layer([0], [1])])
    net = one_hot_net(w, [[gates.AND]])
    out, _ = forward_soft(net, [1.0, 1.0])
    assert out[0] == pytest.approx(1.0, abs=1e-12)
    assert forward_hard(net, [1, 1])[0] == 1
    assert forward_hard(net, [1, 0])[0] == 0


def test_all_false_network_outputs_zero():
    w = build_wiring(6, [8, 4], seed=2)
    net = one_hot_net(w, [[gates.FALSE] * 8, [gates.FALSE] * 4])
    out, _ = forward_soft(net, RNG.random(6))
    assert np.allclose(out, 0.0, atol=1e-12)


def test_forward_matches_manual_mixture_composition():
    w = build_wiring(5, [6, 4, 3], "uniform_random", seed=8)
    net = init_params(w, ("normal", 1.5), seed=21)
    x = RNG.random(5)
    out, _ = forward_soft(net, x)

    vals = x.astype(float)
    for layer, logits in zip(w.layers, net.logits):
        nxt = np.empty(layer.width)
        for i in range(layer.width):
            dist = GateDistribution(logits[i])
            nxt[i] = mixture_forward(dist, vals[layer.in0[i]], vals[layer.in1[i]])
        vals = nxt
    assert np.allclose(out, vals, atol=1e-12)


def test_forward_output_in_unit_interval():
    w = build_wiring(7, [16, 8, 4], seed=3)
    net = init_params(w, ("normal", 2.0), seed=5)
    outs, _ = forward_soft_batch(net, RNG.random((50, 7)))
    assert np.all(outs >= -1e-12) and np.all(outs <= 1 + 1e-12)


def test_forward_rejects_bad_width():
    w = build_wiring(5, [4], seed=0)
    net = init_params(w, seed=0)
    with pytest.raises(ValueError):
        forward_soft(net, np.zeros(6))
    with pytest.raises(ValueError):
        forward_hard(net, np.zeros(4, dtype=int))


# ---------------------------------------------------------------- backward

def test_param_grads_sum_to_zero():
    w = build_wiring(6, [10, 5], seed=4)
    net = init_params(w, ("normal", 1.0), seed=4)
    x = RNG.random((20, 6))
    out, tape = forward_soft_batch(net, x)
    grads, _ = backward_batch(net, tape, RNG.normal(size=out.shape))
    for arr in grads:
        assert np.max(np.abs(arr.sum(axis=1))) < 1e-7


def test_backward_matches_finite_differences():
    w = build_wiring(5, [8, 3], "uniform_random", seed=12)
    net = init_params(w, ("normal", 1.0), seed=13)
    x = RNG.uniform(0.1, 0.9, 5)
    weights = RNG.normal(size=3)

    def loss():
        out, _ = forward_soft(net, x)
        return float(weights @ out)

    out, tape = forward_soft(net, x)
    grads, input_grad = backward(net, tape, weights)

    coords = [(ai, fi) for ai in range(2)
              for fi in RNG.choice(net.logits[ai].size, 12, replace=False)]
    fd = fd_gradient(loss, net.logits, coords, h=1e-5)
    an = np.array([grads[ai].reshape(-1)[fi] for ai, fi in coords])
    assert np.all(rel_err(an, fd, floor=1e-7) < 1e-4)

    # input gradient against finite differences too
    for i in range(5):
        orig = x[i]
        x[i] = orig + 1e-6
        up = loss()
        x[i] = orig - 1e-6
        dn = loss()
        x[i] = orig
        assert rel_err(input_grad[i], (up - dn) / 2e-6, floor=1e-7) < 1e-4


def test_passthrough_chain_routes_gradient():
    # Two stacked layers of pass-through-A gates: input_grad is output_grad
    # routed along the in0 wiring.
    w = WiringSpec(3, [Layer([0, 1, 2], [1, 2, 0]), Layer([2, 0], [0, 1])])
    net = one_hot_net(w, [[gates.A] * 3, [gates.A] * 2])
    x = RNG.random(3)
    out, tape = forward_soft(net, x)
    assert np.allclose(out, [x[2], x[0]], atol=1e-12)
    _, input_grad = backward(net, tape, np.array([1.0, 3.0]))
    assert np.allclose(input_grad, [3.0, 0.0, 1.0], atol=1e-9)


# ---------------------------------------------------------------- hard mode

def test_hard_equals_soft_for_exact_one_hot():
    w = build_wiring(6, [12, 6, 3], seed=6)
    ops = [RNG.integers(0, 16, layer.width) for layer in w.layers]
    net = one_hot_net(w, ops)
    for _ in range(20):
        bits = RNG.integers(0, 2, 6)
        soft, _ = forward_soft(net, bits.astype(float))
        hard = forward_hard(net, bits)
        assert np.array_equal(soft, hard.astype(float))


def test_sharpened_net_close_to_hard():
    w = build_wiring(8, [16, 8, 4], seed=7)
    net = init_params(w, ("normal", 1.0), seed=8)
    sharp = sharpened(net, margin=30.0)
    bits = RNG.integers(0, 2, (50, 8))
    soft, _ = forward_soft_batch(sharp, bits.astype(float))
    hard = forward_hard_batch(sharp, bits)
    assert np.max(np.abs(soft - hard)) < 1e-6
    assert np.array_equal(np.rint(soft).astype(np.uint8), hard)
    # sharpening must not change the argmax the hard pass uses
    for a, b in zip(net.layer_argmax(), sharp.layer_argmax()):
        assert np.array_equal(a, b)


def test_all_true_network():
    w = build_wiring(4, [6, 2], seed=9)
    net = one_hot_net(w, [[gates.TRUE] * 6, [gates.TRUE] * 2])
    assert np.all(forward_hard(net, [0, 1, 0, 0]) == 1)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    w = build_wiring(9, [8, 4, 2], "cover_inputs_then_random", seed=14)
    net = init_params(w, ("normal", 1.0), seed=15)
    path = tmp_path / "net.json"
    save_params(net, path)
    loaded = load_params(path)
    x = RNG.random(9)
    a, _ = forward_soft(net, x)
    b, _ = forward_soft(loaded, x)
    assert np.array_equal(a, b)
    for p, q in zip(net.logits, loaded.logits):
        assert np.array_equal(p, q)
    assert loaded.wiring.layer_widths == [8, 4, 2]
    assert loaded.wiring.seed == 14
    assert loaded.rng_seed == 15


def test_checkpoint_truncated_file(tmp_path):
    w = build_wiring(9, [4], seed=0)
    net = init_params(w, seed=0)
    path = tmp_path / "net.json"
    save_params(net, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_params(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "net.json"
    path.write_text('{"format_version": 999}')
    with pytest.raises(CheckpointError):
        load_params(path)

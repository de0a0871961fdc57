import numpy as np
import pytest

from gateca import CheckpointError, gates
from gateca.circuit import (
    HardCircuit, census, circuits_equivalent, crystallize, enumerate_inputs_packed,
    eval_circuit, eval_packed, export_dot, load_netlist, pack_lanes, prune,
    save_netlist, unpack_lanes,
)
from gateca.network import Layer, LogicNetwork, WiringSpec, build_wiring, \
    forward_hard, init_params

from helpers import naive_circuit_eval

RNG = np.random.default_rng(31)


def random_circuit(rng, n_inputs=None, n_nodes=None):
    n_inputs = n_inputs or int(rng.integers(2, 10))
    n_nodes = n_nodes or int(rng.integers(1, 40))
    ops, in0, in1 = [], [], []
    for j in range(n_nodes):
        hi = n_inputs + j
        ops.append(int(rng.integers(0, 16)))
        in0.append(int(rng.integers(0, hi)))
        in1.append(int(rng.integers(0, hi)))
    k = int(rng.integers(1, min(n_nodes, 4) + 1))
    outputs = rng.integers(0, n_inputs + n_nodes, k)
    return HardCircuit(n_inputs, ops, in0, in1, outputs)


def one_hot_net(wiring, ops_per_layer):
    logits = []
    for layer, ops in zip(wiring.layers, ops_per_layer):
        arr = np.zeros((layer.width, 16))
        arr[np.arange(layer.width), ops] = 1000.0
        logits.append(arr)
    return LogicNetwork(wiring, logits)


# ---------------------------------------------------------------- crystallize

def test_crystallize_single_xor():
    net = one_hot_net(WiringSpec(2, [Layer([0], [1])]), [[gates.XOR]])
    c = crystallize(net)
    assert c.node_count == 1 and c.ops[0] == gates.XOR
    assert list(eval_circuit(c, [1, 0])) == [1]
    assert list(eval_circuit(c, [1, 1])) == [0]


def test_crystallize_matches_forward_hard():
    for seed in range(5):
        w = build_wiring(7, [10, 6, 3], "uniform_random", seed=seed)
        net = init_params(w, ("normal", 1.5), seed=seed + 50)
        c = crystallize(net)
        for _ in range(20):
            bits = RNG.integers(0, 2, 7)
            assert np.array_equal(eval_circuit(c, bits), forward_hard(net, bits))


def test_crystallize_ties_break_low():
    w = WiringSpec(2, [Layer([0], [1])])
    net = LogicNetwork(w, [np.zeros((1, 16))])
    assert crystallize(net).ops[0] == 0


# ---------------------------------------------------------------- census

def test_census_all_pass_through():
    c = HardCircuit(3, [gates.A] * 10, list(range(3)) * 3 + [0],
                    [(i + 1) % 3 for i in range(3)] * 3 + [1], [12])
    g = census(c)
    assert g.total == 10 and g.active == 0


def test_census_mixed():
    c = HardCircuit(2, [gates.XOR, gates.XOR, gates.XOR, gates.A, gates.B],
                    [0, 0, 1, 0, 0], [1, 1, 0, 1, 1], [6])
    g = census(c)
    assert g.active == 3
    assert g.histogram[gates.XOR] == 3


# ---------------------------------------------------------------- prune

def test_prune_constant_output():
    # output is a TRUE gate fed by a big dead subgraph
    rng = np.random.default_rng(0)
    base = random_circuit(rng, n_inputs=4, n_nodes=20)
    ops = np.append(base.ops, gates.TRUE)
    in0 = np.append(base.in0, 0)
    in1 = np.append(base.in1, 1)
    c = HardCircuit(4, ops, in0, in1, [4 + 20])
    p = prune(c)
    assert p.node_count == 1
    assert p.ops[0] == gates.TRUE


def test_prune_removes_unreferenced_subgraph():
    c = HardCircuit(
        3,
        [gates.XOR, gates.AND, gates.OR, gates.NAND],  # only node 0 feeds out
        [0, 1, 3, 3], [1, 2, 4, 5], [3])
    p = prune(c)
    assert p.node_count == 1
    assert p.ops[0] == gates.XOR


def test_prune_folds_pass_throughs():
    # XOR -> chain of A/B pass-throughs -> output collapses to the XOR alone
    c = HardCircuit(
        2,
        [gates.XOR, gates.A, gates.B, gates.A],
        [0, 2, 0, 4], [1, 0, 3, 0], [5])
    p = prune(c)
    assert p.node_count == 1 and p.ops[0] == gates.XOR
    assert circuits_equivalent(c, p)


def test_prune_propagates_constants():
    # AND(x, TRUE) -> x; OR(x, TRUE) -> TRUE
    c = HardCircuit(
        2,
        [gates.TRUE, gates.AND, gates.OR],
        [0, 0, 1], [1, 2, 2], [3, 4])
    p = prune(c)
    assert circuits_equivalent(c, p)
    # first output collapses to input 0, second to a constant TRUE node
    assert p.outputs[0] == 0
    assert p.ops[p.outputs[1] - 2] == gates.TRUE


def test_prune_preserves_behavior_randomized():
    for seed in range(60):
        rng = np.random.default_rng(seed)
        c = random_circuit(rng)
        p = prune(c)
        assert circuits_equivalent(c, p), seed
        assert census(p).active <= census(c).active


def test_prune_idempotent():
    for seed in range(30):
        rng = np.random.default_rng(100 + seed)
        c = random_circuit(rng)
        p = prune(c)
        assert prune(p) == p


def test_prune_large_input_sampled_equivalence():
    rng = np.random.default_rng(7)
    c = random_circuit(rng, n_inputs=24, n_nodes=80)
    p = prune(c)
    assert circuits_equivalent(c, p, samples=100000, seed=1)


# ---------------------------------------------------------------- export

def test_export_dot_single_gate():
    c = HardCircuit(2, [gates.NAND], [0], [1], [2])
    text = export_dot(c)
    assert "NAND" in text
    assert "in0 -> g0" in text and "in1 -> g0" in text
    assert "-> out0" in text


def test_netlist_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    c = random_circuit(rng, n_inputs=6, n_nodes=25)
    path = tmp_path / "net.json"
    save_netlist(c, path)
    assert load_netlist(path) == c


def test_netlist_rejects_bad_version(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format_version": 42, "input_width": 1, "nodes": [], "outputs": []}')
    with pytest.raises(CheckpointError):
        load_netlist(path)


# ---------------------------------------------------------------- packed

def test_pack_unpack_round_trip():
    bits = RNG.integers(0, 2, (3, 130), dtype=np.uint8)
    assert np.array_equal(unpack_lanes(pack_lanes(bits), 130), bits)


def test_eval_packed_equals_naive():
    for seed in range(40):
        rng = np.random.default_rng(seed)
        c = random_circuit(rng, n_nodes=int(rng.integers(1, 64)))
        lanes = int(rng.integers(1, 130))
        bits = rng.integers(0, 2, (c.input_width, lanes), dtype=np.uint8)
        packed = eval_packed(c, pack_lanes(bits), n_lanes=lanes)
        got = unpack_lanes(packed, lanes)
        for lane in range(lanes):
            want = naive_circuit_eval(c, bits[:, lane])
            assert list(got[:, lane]) == want, (seed, lane)


def test_eval_packed_identical_lanes():
    rng = np.random.default_rng(3)
    c = random_circuit(rng, n_inputs=5, n_nodes=30)
    bits = rng.integers(0, 2, (5, 1), dtype=np.uint8)
    wide = np.repeat(bits, 77, axis=1)
    out = unpack_lanes(eval_packed(c, pack_lanes(wide), n_lanes=77), 77)
    assert np.all(out == out[:, :1])


def test_true_gate_fills_active_lanes():
    c = HardCircuit(2, [gates.TRUE], [0], [1], [2])
    bits = np.zeros((2, 64), dtype=np.uint8)
    out = eval_packed(c, pack_lanes(bits))
    assert out[0, 0] == np.uint64(0xFFFFFFFFFFFFFFFF)


def test_lane_overflow_rejected():
    c = HardCircuit(2, [gates.AND], [0], [1], [2])
    packed = pack_lanes(np.zeros((2, 64), dtype=np.uint8))
    with pytest.raises(ValueError):
        eval_packed(c, packed, n_lanes=65)


def test_enumerate_inputs_packed():
    packed, n = enumerate_inputs_packed(3)
    bits = unpack_lanes(packed, n)
    codes = {tuple(bits[:, lane]) for lane in range(n)}
    assert len(codes) == 8

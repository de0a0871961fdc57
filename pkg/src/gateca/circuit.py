"""Discrete circuits: crystallization, pruning, export, packed evaluation.

A HardCircuit is a flat netlist in topological order. References use one
unified index space: indices below input_width name circuit inputs, higher
indices name earlier nodes. The packed evaluator maps each gate to bitwise
word operations, so one pass evaluates up to 64 independent input vectors
per word lane; the CA rollout packs every grid cell into a lane.
"""

import json

import numpy as np

from . import CheckpointError
from .ca import SYNCHRONOUS, gather_neighborhoods
from .gates import (
    A, B, FALSE, GATE_NAMES, N_GATES, PASS_THROUGH_OPS, TRUE, TRUTH,
)

NETLIST_VERSION = 1

WORD_BITS = 64
_WORD_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


class HardCircuit:
    """Fixed netlist of 2-input gates in topological order."""

    def __init__(self, input_width, ops, in0, in1, outputs):
        self.input_width = int(input_width)
        self.ops = np.asarray(ops, dtype=np.int64)
        self.in0 = np.asarray(in0, dtype=np.int64)
        self.in1 = np.asarray(in1, dtype=np.int64)
        self.outputs = np.asarray(outputs, dtype=np.int64)
        n = len(self.ops)
        if not (len(self.in0) == len(self.in1) == n):
            raise ValueError("ops/in0/in1 lengths differ")
        if np.any((self.ops < 0) | (self.ops >= N_GATES)):
            raise ValueError("opcode out of range")
        limits = self.input_width + np.arange(n)
        if n and (np.any(self.in0 >= limits) or np.any(self.in1 >= limits)
                  or self.in0.min(initial=0) < 0 or self.in1.min(initial=0) < 0):
            raise ValueError("references must point strictly backward")
        if len(self.outputs) and (
                self.outputs.min() < 0
                or self.outputs.max() >= self.input_width + n):
            raise ValueError("output reference out of range")

    @property
    def node_count(self):
        return len(self.ops)

    @property
    def output_width(self):
        return len(self.outputs)

    def __eq__(self, other):
        if not isinstance(other, HardCircuit):
            return NotImplemented
        return (self.input_width == other.input_width
                and np.array_equal(self.ops, other.ops)
                and np.array_equal(self.in0, other.in0)
                and np.array_equal(self.in1, other.in1)
                and np.array_equal(self.outputs, other.outputs))


class GateCensus:
    """Gate counts: total, active (non-pass-through), per-opcode histogram."""

    def __init__(self, total, active, histogram):
        self.total = total
        self.active = active
        self.histogram = histogram

    def to_doc(self):
        return {
            "total": self.total,
            "active": self.active,
            "histogram": {GATE_NAMES[op]: n for op, n in
                          enumerate(self.histogram) if n},
        }


def census(circuit):
    hist = np.bincount(circuit.ops, minlength=N_GATES).tolist()
    active = circuit.node_count - sum(hist[op] for op in PASS_THROUGH_OPS)
    return GateCensus(circuit.node_count, active, hist)


# ---------------------------------------------------------------- crystallize

def crystallize(net):
    """Freeze a LogicNetwork to its per-node argmax opcodes."""
    ops, in0, in1 = [], [], []
    base = 0
    prev_base = 0
    for li, (layer, layer_ops) in enumerate(zip(net.wiring.layers,
                                                net.layer_argmax())):
        if li == 0:
            offset = 0
        else:
            offset = net.input_width + prev_base
        ops.append(layer_ops)
        in0.append(layer.in0 + offset)
        in1.append(layer.in1 + offset)
        prev_base = base
        base += layer.width
    last_width = net.wiring.layers[-1].width
    out_base = net.input_width + base - last_width
    return HardCircuit(
        net.input_width,
        np.concatenate(ops),
        np.concatenate(in0),
        np.concatenate(in1),
        np.arange(out_base, out_base + last_width),
    )


class ModelCircuits:
    """Crystallized CA model: one circuit per kernel plus the update circuit."""

    def __init__(self, kernel_circuits, update_circuit, channels, kernel_out_bits):
        self.kernel_circuits = list(kernel_circuits)
        self.update_circuit = update_circuit
        self.channels = channels
        self.kernel_out_bits = kernel_out_bits


def crystallize_model(model):
    return ModelCircuits(
        [crystallize(k) for k in model.kernels],
        crystallize(model.update_net),
        model.channels,
        model.kernel_out_bits,
    )


def compose_cell_circuit(circuits):
    """Fuse kernels + update into one per-cell circuit.

    Inputs are the cell's full 3x3 patch, one index per (position, channel)
    pair laid out position-major: index = position * C + channel, with
    position 0 the center (so the cell's own state is the first C inputs).
    Outputs are the C next-state bits.
    """
    C = circuits.channels
    bits = circuits.kernel_out_bits
    input_width = 9 * C
    ops, in0, in1 = [], [], []
    next_id = input_width

    def emit(op, a, b):
        nonlocal next_id
        ops.append(op)
        in0.append(a)
        in1.append(b)
        next_id += 1
        return next_id - 1

    # kernel instances, one per (kernel, channel), in kernel-major order
    perception_refs = []
    for kc in circuits.kernel_circuits:
        for c in range(C):
            base = {}
            for j in range(kc.node_count):
                def resolve(r):
                    if r < 9:  # kernel input: neighborhood position r
                        return r * C + c
                    return base[r - 9]
                base[j] = emit(kc.ops[j], resolve(kc.in0[j]), resolve(kc.in1[j]))
            perception_refs.extend(base[o - 9] for o in kc.outputs)

    uc = circuits.update_circuit
    assert uc.input_width == C + len(perception_refs)
    ubase = {}
    for j in range(uc.node_count):
        def resolve(r):
            if r < C:       # state bit: center position, channel r
                return r
            if r < uc.input_width:
                return perception_refs[r - C]
            return ubase[r - uc.input_width]
        ubase[j] = emit(uc.ops[j], resolve(uc.in0[j]), resolve(uc.in1[j]))
    outputs = [ubase[o - uc.input_width] if o >= uc.input_width
               else (o if o < C else perception_refs[o - C])
               for o in uc.outputs]
    return HardCircuit(input_width, ops, in0, in1, outputs)


# ---------------------------------------------------------------- pruning

def _residual(op, known_side, value):
    """Collapse a gate with one constant input to 0/1/x/not-x.

    known_side is 0 if in0 is the constant. Returns ("const", v),
    ("alias",) for the live input, or ("not",).
    """
    if known_side == 0:
        lo, hi = TRUTH[op, 2 * value + 0], TRUTH[op, 2 * value + 1]
    else:
        lo, hi = TRUTH[op, 0 + value], TRUTH[op, 2 + value]
    if lo == hi:
        return ("const", int(lo))
    if (lo, hi) == (0, 1):
        return ("alias",)
    return ("not",)


def prune(circuit):
    """Behavior-preserving shrink: constant propagation, pass-through and
    single-dependency folding, then removal of everything not reachable
    from the outputs."""
    n_in = circuit.input_width
    # resolution per unified index: ("ref", idx into the new node list or
    # input) or ("const", bit)
    resolved = {i: ("ref", i) for i in range(n_in)}
    new_ops, new_in0, new_in1 = [], [], []

    def emit(op, a, b):
        new_ops.append(op)
        new_in0.append(a)
        new_in1.append(b)
        return n_in + len(new_ops) - 1

    def emit_not(ref):
        return emit(12, ref, ref)  # NOT A; duplicate wire is fine post-fold

    for j in range(circuit.node_count):
        op = int(circuit.ops[j])
        r0 = resolved[int(circuit.in0[j])]
        r1 = resolved[int(circuit.in1[j])]
        uid = n_in + j
        if op == FALSE or op == TRUE:
            resolved[uid] = ("const", 1 if op == TRUE else 0)
            continue
        if r0[0] == "const" and r1[0] == "const":
            resolved[uid] = ("const", int(TRUTH[op, 2 * r0[1] + r1[1]]))
            continue
        if r0[0] == "const" or r1[0] == "const":
            if r0[0] == "const":
                side, live = 0, r1[1]
                kind = _residual(op, 0, r0[1])
            else:
                side, live = 1, r0[1]
                kind = _residual(op, 1, r1[1])
            if kind[0] == "const":
                resolved[uid] = ("const", kind[1])
            elif kind[0] == "alias":
                resolved[uid] = ("ref", live)
            else:
                resolved[uid] = ("ref", emit_not(live))
            continue
        a, b = r0[1], r1[1]
        if op == A:
            resolved[uid] = ("ref", a)
            continue
        if op == B:
            resolved[uid] = ("ref", b)
            continue
        if a == b:
            # diagonal collapse: behavior determined by f(0,0), f(1,1)
            lo, hi = int(TRUTH[op, 0]), int(TRUTH[op, 3])
            if lo == hi:
                resolved[uid] = ("const", lo)
            elif (lo, hi) == (0, 1):
                resolved[uid] = ("ref", a)
            else:
                resolved[uid] = ("ref", emit_not(a))
            continue
        resolved[uid] = ("ref", emit(op, a, b))

    # materialize constant outputs as single gates
    const_nodes = {}
    outputs = []
    for o in circuit.outputs:
        r = resolved[int(o)]
        if r[0] == "const":
            if r[1] not in const_nodes:
                # constants need inputs to exist; wire to input 0 harmlessly
                const_nodes[r[1]] = emit(TRUE if r[1] else FALSE, 0, 0)
            outputs.append(const_nodes[r[1]])
        else:
            outputs.append(r[1])

    # keep only nodes backward-reachable from outputs
    n_new = len(new_ops)
    live = np.zeros(n_new, dtype=bool)
    stack = [o - n_in for o in outputs if o >= n_in]
    while stack:
        j = stack.pop()
        if live[j]:
            continue
        live[j] = True
        for r in (new_in0[j], new_in1[j]):
            if r >= n_in:
                stack.append(r - n_in)

    remap = {}
    f_ops, f_in0, f_in1 = [], [], []
    for j in range(n_new):
        if not live[j]:
            continue
        remap[n_in + j] = n_in + len(f_ops)
        f_ops.append(new_ops[j])
        f_in0.append(new_in0[j] if new_in0[j] < n_in else remap[new_in0[j]])
        f_in1.append(new_in1[j] if new_in1[j] < n_in else remap[new_in1[j]])
    f_outputs = [o if o < n_in else remap[o] for o in outputs]
    return HardCircuit(n_in, f_ops, f_in0, f_in1, f_outputs)


# ---------------------------------------------------------------- export

def export_dot(circuit, path=None):
    """DOT digraph with gate-name labels; returns the text."""
    lines = ["digraph circuit {", "  rankdir=LR;",
             "  node [shape=box, fontname=\"monospace\"];"]
    used_inputs = sorted(
        {int(r) for r in np.concatenate([circuit.in0, circuit.in1,
                                         circuit.outputs])
         if r < circuit.input_width})
    for i in used_inputs:
        lines.append(f'  in{i} [shape=ellipse, label="in{i}"];')

    def ref_name(r):
        return f"in{r}" if r < circuit.input_width else f"g{r - circuit.input_width}"

    for j in range(circuit.node_count):
        label = GATE_NAMES[circuit.ops[j]]
        lines.append(f'  g{j} [label="{label}"];')
        lines.append(f'  {ref_name(int(circuit.in0[j]))} -> g{j} [label="a"];')
        lines.append(f'  {ref_name(int(circuit.in1[j]))} -> g{j} [label="b"];')
    for k, o in enumerate(circuit.outputs):
        lines.append(f'  out{k} [shape=plaintext, label="out{k}"];')
        lines.append(f"  {ref_name(int(o))} -> out{k};")
    lines.append("}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def circuit_to_doc(circuit):
    return {
        "format_version": NETLIST_VERSION,
        "input_width": circuit.input_width,
        "nodes": [
            {"id": circuit.input_width + j, "op": int(circuit.ops[j]),
             "in0": int(circuit.in0[j]), "in1": int(circuit.in1[j])}
            for j in range(circuit.node_count)
        ],
        "outputs": circuit.outputs.tolist(),
    }


def save_netlist(circuit, path):
    with open(path, "w") as fh:
        json.dump(circuit_to_doc(circuit), fh)


def circuit_from_doc(doc):
    try:
        if doc.get("format_version") != NETLIST_VERSION:
            raise CheckpointError(
                f"unsupported netlist version {doc.get('format_version')!r}")
        n_in = doc["input_width"]
        nodes = doc["nodes"]
        for j, node in enumerate(nodes):
            if node["id"] != n_in + j:
                raise CheckpointError("node ids must be dense and in order")
        return HardCircuit(
            n_in,
            [n["op"] for n in nodes],
            [n["in0"] for n in nodes],
            [n["in1"] for n in nodes],
            doc["outputs"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed netlist: {exc}") from exc


def load_netlist(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read netlist {path}: {exc}") from exc
    return circuit_from_doc(doc)


# ---------------------------------------------------------------- packed eval

def pack_lanes(bits):
    """Pack [planes, lanes] 0/1 rows into [planes, words] uint64 lanes."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim == 1:
        bits = bits[None]
    n = bits.shape[1]
    nwords = (n + WORD_BITS - 1) // WORD_BITS
    packed8 = np.packbits(bits, axis=1, bitorder="little")
    buf = np.zeros((bits.shape[0], nwords * 8), dtype=np.uint8)
    buf[:, :packed8.shape[1]] = packed8
    return buf.view("<u8")


def unpack_lanes(words, n_lanes):
    """Inverse of pack_lanes: [planes, words] -> [planes, n_lanes] uint8."""
    words = np.ascontiguousarray(words, dtype="<u8")
    bits = np.unpackbits(words.view(np.uint8), axis=1, bitorder="little")
    return bits[:, :n_lanes]


def _word_op(op, a, b, ones):
    if op == 0:
        return np.zeros_like(a)
    if op == 1:
        return a & b
    if op == 2:
        return a & ~b
    if op == 3:
        return a.copy()
    if op == 4:
        return ~a & b
    if op == 5:
        return b.copy()
    if op == 6:
        return a ^ b
    if op == 7:
        return a | b
    if op == 8:
        return ones & ~(a | b)
    if op == 9:
        return ones & ~(a ^ b)
    if op == 10:
        return ones & ~b
    if op == 11:
        return a | (ones & ~b)
    if op == 12:
        return ones & ~a
    if op == 13:
        return (ones & ~a) | b
    if op == 14:
        return ones & ~(a & b)
    return ones.copy()  # TRUE


def eval_packed(circuit, packed_inputs, n_lanes=None):
    """Evaluate all word lanes at once; lane L of the output equals the
    sequential evaluation of lane L of the inputs."""
    packed_inputs = np.asarray(packed_inputs, dtype=np.uint64)
    if packed_inputs.ndim != 2 or packed_inputs.shape[0] != circuit.input_width:
        raise ValueError(
            f"expected [{circuit.input_width}, nwords] packed inputs, "
            f"got {packed_inputs.shape}")
    nwords = packed_inputs.shape[1]
    if n_lanes is not None and n_lanes > nwords * WORD_BITS:
        raise ValueError(f"{n_lanes} lanes exceed {nwords * WORD_BITS} packed bits")
    if n_lanes is None:
        ones = np.full(nwords, _WORD_ONES, dtype=np.uint64)
    else:
        ones = pack_lanes(np.ones(n_lanes, dtype=np.uint8))[0]
        if len(ones) != nwords:
            raise ValueError("n_lanes inconsistent with packed input width")
    values = list(packed_inputs)
    for j in range(circuit.node_count):
        values.append(_word_op(int(circuit.ops[j]),
                               values[int(circuit.in0[j])],
                               values[int(circuit.in1[j])], ones))
    return np.stack([values[int(o)] for o in circuit.outputs])


def eval_circuit(circuit, bits):
    """Single-vector convenience wrapper around eval_packed."""
    packed = pack_lanes(np.asarray(bits, dtype=np.uint8)[:, None])
    return unpack_lanes(eval_packed(circuit, packed, n_lanes=1), 1)[:, 0]


def enumerate_inputs_packed(input_width):
    """All 2^input_width inputs, one per lane (input_width <= 20 or so)."""
    n = 1 << input_width
    lanes = np.arange(n, dtype=np.uint64)
    bits = ((lanes[None, :] >> np.arange(input_width, dtype=np.uint64)[:, None])
            & np.uint64(1)).astype(np.uint8)
    return pack_lanes(bits), n


def circuits_equivalent(c1, c2, samples=100000, seed=0):
    """Oracle equality check: exhaustive up to 16 inputs, sampled above."""
    if c1.input_width != c2.input_width or c1.output_width != c2.output_width:
        return False
    if c1.input_width <= 16:
        packed, n = enumerate_inputs_packed(c1.input_width)
    else:
        rng = np.random.default_rng(seed)
        n = samples
        bits = rng.integers(0, 2, (c1.input_width, n), dtype=np.uint8)
        packed = pack_lanes(bits)
    o1 = eval_packed(c1, packed, n_lanes=n)
    o2 = eval_packed(c2, packed, n_lanes=n)
    return bool(np.array_equal(o1, o2))


# ---------------------------------------------------------------- CA rollout

def _pack_patch_planes(grid, boundary):
    # [9C, nwords]: plane (pos*C + c) carries cell lanes in row-major order.
    H, W, C = grid.shape
    neigh = gather_neighborhoods(grid.astype(np.uint8), boundary)
    planes = neigh.transpose(3, 2, 0, 1).reshape(9 * C, H * W)
    return pack_lanes(planes)


def step_packed(grid, cell_circuit, boundary, mask=None):
    """One hard CA step with all cells packed across word lanes."""
    H, W, C = grid.shape
    if cell_circuit.input_width != 9 * C:
        raise ValueError("cell circuit input width must be 9*channels")
    packed = _pack_patch_planes(grid, boundary)
    out = eval_packed(cell_circuit, packed, n_lanes=H * W)
    new_grid = unpack_lanes(out, H * W).reshape(C, H, W).transpose(1, 2, 0)
    if mask is not None:
        keep = ~mask
        new_grid = new_grid.copy()
        new_grid[keep] = grid[keep]
    return new_grid


def hard_rollout_packed(circuits, grid0, steps, boundary,
                        schedule=SYNCHRONOUS, fault_fn=None):
    """Packed hard rollout, bit-identical to the network-level hard rollout.

    `circuits` is a ModelCircuits (composed on the fly) or an already
    composed per-cell HardCircuit.
    """
    cell = circuits if isinstance(circuits, HardCircuit) \
        else compose_cell_circuit(circuits)
    grid = np.asarray(grid0, dtype=np.uint8)
    H, W, _ = grid.shape
    masks = schedule.mask_stream((H, W))
    trajectory = [grid]
    for t in range(1, steps + 1):
        grid = step_packed(grid, cell, boundary, mask=next(masks))
        if fault_fn is not None:
            dead = fault_fn(t)
            if dead is not None and dead.any():
                grid = grid.copy()
                grid[dead] = 0
        trajectory.append(grid)
    return trajectory

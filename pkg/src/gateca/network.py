"""Layered logic-gate networks with fixed wiring and learnable gate choice.

Wiring never changes after construction; what is learned is, per node, a
distribution over the 16 gate opcodes. The soft forward pass mixes the gate
relaxations under each node's softmax and records an activation tape; the
backward pass replays the tape in reverse for exact gradients. The hard
forward pass evaluates each node's argmax opcode on bits.

All heavy paths are batched: arrays have shape [batch, width] and a layer
is a handful of vectorized numpy ops. Because every gate relaxation is
bilinear, a node's softmax mixture reduces to four effective coefficients
(probs @ COEFFS), which is what the layer kernels below compute with.
"""

import json

import numpy as np

from . import CheckpointError
from ._kernels import backward_layer, forward_layer, hard_layer
from .gates import COEFFS, N_GATES, softmax

CHECKPOINT_VERSION = 1

WIRING_POLICIES = ("cover_inputs_then_random", "halving_pairs", "uniform_random")


class WiringError(ValueError):
    pass


class Layer:
    """One layer of gate nodes: paired input indices into the previous layer."""

    __slots__ = ("in0", "in1", "_scatter")

    def __init__(self, in0, in1):
        self.in0 = np.asarray(in0, dtype=np.int64)
        self.in1 = np.asarray(in1, dtype=np.int64)
        if self.in0.shape != self.in1.shape or self.in0.ndim != 1:
            raise WiringError("in0/in1 must be 1-d arrays of equal length")
        if np.any(self.in0 == self.in1):
            raise WiringError("a node may not wire both inputs to the same source")
        self._scatter = None

    @property
    def width(self):
        return len(self.in0)

    def scatter_plan(self):
        # Precomputed segments for np.add.reduceat: scatter-add of the
        # concat(dA, dB) columns back onto previous-layer outputs, in a
        # fixed deterministic order.
        if self._scatter is None:
            cat = np.concatenate([self.in0, self.in1])
            order = np.argsort(cat, kind="stable")
            sorted_idx = cat[order]
            uniq, starts = np.unique(sorted_idx, return_index=True)
            self._scatter = (order, starts, uniq)
        return self._scatter


class WiringSpec:
    """Immutable description of a network's topology."""

    def __init__(self, input_width, layers, policy="explicit", seed=None):
        if input_width < 1:
            raise WiringError("input_width must be >= 1")
        self.input_width = int(input_width)
        self.layers = list(layers)
        self.policy = policy
        self.seed = seed
        prev = self.input_width
        for i, layer in enumerate(self.layers):
            hi = max(int(layer.in0.max()), int(layer.in1.max()))
            lo = min(int(layer.in0.min()), int(layer.in1.min()))
            if lo < 0 or hi >= prev:
                raise WiringError(f"layer {i} wires outside previous width {prev}")
            prev = layer.width

    @property
    def layer_widths(self):
        return [layer.width for layer in self.layers]

    @property
    def node_count(self):
        return sum(self.layer_widths)

    @property
    def output_width(self):
        return self.layers[-1].width


def _paired_draw(rng, source_width, width, cover):
    """Draw `width` index pairs from [0, source_width), in0 != in1.

    With cover=True every source index appears at least once whenever the
    2*width slots allow it; excess slots are uniform.
    """
    if source_width < 2:
        raise WiringError(
            "cannot wire a layer onto a single-output layer (in0 != in1 is unsatisfiable)"
        )
    slots = 2 * width
    if cover:
        if slots <= source_width:
            values = rng.permutation(source_width)[:slots]
        else:
            values = np.concatenate([
                rng.permutation(source_width),
                rng.integers(0, source_width, size=slots - source_width),
            ])
            rng.shuffle(values)
    else:
        values = rng.integers(0, source_width, size=slots)
    in0 = values[0::2].copy()
    in1 = values[1::2].copy()
    for i in np.nonzero(in0 == in1)[0]:
        while in1[i] == in0[i]:
            in1[i] = rng.integers(0, source_width)
    return in0, in1


def build_wiring(input_width, layer_widths, policy="cover_inputs_then_random", seed=0):
    """Deterministically wire a layered network.

    cover_inputs_then_random: at every layer, cover as many distinct sources
    as the slot count allows before drawing the remainder uniformly.
    halving_pairs: node i reads (2i, 2i+1); requires prev width >= 2*width.
    uniform_random: both inputs uniform, in0 != in1.
    """
    if policy not in WIRING_POLICIES:
        raise WiringError(f"unknown wiring policy {policy!r}")
    if not layer_widths or any(w < 1 for w in layer_widths):
        raise WiringError("layer_widths must be non-empty positive counts")
    rng = np.random.default_rng(seed)
    layers = []
    prev = input_width
    for width in layer_widths:
        if policy == "halving_pairs":
            if prev < 2 * width:
                raise WiringError(
                    f"halving_pairs needs previous width >= {2 * width}, got {prev}"
                )
            idx = np.arange(width, dtype=np.int64)
            layers.append(Layer(2 * idx, 2 * idx + 1))
        else:
            in0, in1 = _paired_draw(
                rng, prev, width, cover=(policy == "cover_inputs_then_random")
            )
            layers.append(Layer(in0, in1))
        prev = width
    return WiringSpec(input_width, layers, policy=policy, seed=seed)


class LogicNetwork:
    """Wiring plus one 16-logit distribution per node."""

    def __init__(self, wiring, logits, rng_seed=None, temperature=1.0):
        self.wiring = wiring
        self.logits = [np.asarray(l, dtype=np.float64) for l in logits]
        if len(self.logits) != len(wiring.layers):
            raise ValueError("one logits array per layer required")
        for arr, layer in zip(self.logits, wiring.layers):
            if arr.shape != (layer.width, N_GATES):
                raise ValueError(f"logits shape {arr.shape} != ({layer.width}, 16)")
        self.rng_seed = rng_seed
        self.temperature = temperature

    @property
    def input_width(self):
        return self.wiring.input_width

    @property
    def output_width(self):
        return self.wiring.output_width

    @property
    def node_count(self):
        return self.wiring.node_count

    def parameters(self):
        return self.logits

    def layer_probs(self):
        return [softmax(l, self.temperature) for l in self.logits]

    def layer_argmax(self):
        # Ties break toward the lowest opcode (np.argmax picks the first max).
        return [np.argmax(l, axis=1) for l in self.logits]


def init_params(wiring, init=("normal", 1.0), seed=0, temperature=1.0):
    """Create a LogicNetwork with randomized logits.

    init is ("normal", sigma) or ("passthrough_bias", sigma, bias); the
    latter adds `bias` to every node's pass-through-A logit, which keeps
    early gradients flowing through deep stacks.
    """
    rng = np.random.default_rng(seed)
    kind = init[0]
    if kind == "normal":
        sigma = float(init[1])
        bias = 0.0
    elif kind == "passthrough_bias":
        sigma = float(init[1])
        bias = float(init[2])
    else:
        raise ValueError(f"unknown init {init!r}")
    logits = []
    for layer in wiring.layers:
        arr = sigma * rng.standard_normal((layer.width, N_GATES))
        if bias:
            arr[:, 3] += bias
        logits.append(arr)
    return LogicNetwork(wiring, logits, rng_seed=seed, temperature=temperature)


class ActivationTape:
    """The network input plus every layer's outputs from one forward pass.

    A node's input pair (a, b) is recovered during the reverse pass by
    indexing the previous layer's stored outputs through the fixed wiring;
    materializing the pairs would double the tape, and training is
    memory-bound.
    """

    __slots__ = ("inputs", "layer_out")

    def __init__(self, inputs, layer_out):
        self.inputs = inputs
        self.layer_out = layer_out

    @property
    def output(self):
        return self.layer_out[-1]

    def values_feeding(self, li):
        return self.inputs if li == 0 else self.layer_out[li - 1]

    def node_inputs(self, wiring, li):
        """The (a, b) pairs layer `li`'s nodes consumed."""
        prev = self.values_feeding(li)
        layer = wiring.layers[li]
        return prev[:, layer.in0], prev[:, layer.in1]


def _mix_coeffs(net):
    # [width, 4] effective bilinear coefficients per layer.
    return [p @ COEFFS for p in net.layer_probs()]


def forward_soft_batch(net, inputs, dtype=None):
    """Soft forward over a [batch, input_width] array. Returns (out, tape)."""
    inputs = np.asarray(inputs)
    if dtype is not None:
        inputs = inputs.astype(dtype, copy=False)
    if inputs.ndim != 2 or inputs.shape[1] != net.input_width:
        raise ValueError(
            f"expected [batch, {net.input_width}] inputs, got {inputs.shape}"
        )
    x = np.ascontiguousarray(inputs)
    x0 = x
    layer_out = []
    for layer, w in zip(net.wiring.layers, _mix_coeffs(net)):
        x = forward_layer(x, layer, w)
        layer_out.append(x)
    return x, ActivationTape(x0, layer_out)


def forward_soft(net, input_vec):
    """Single-vector soft forward. Returns (output vector, tape)."""
    out, tape = forward_soft_batch(net, np.asarray(input_vec, dtype=np.float64)[None])
    return out[0], tape


def backward_batch(net, tape, output_grad):
    """Reverse pass over a batch tape.

    Returns (param_grads, input_grad): one [width, 16] float64 array per
    layer (summed over the batch) and the gradient w.r.t. the inputs.
    """
    g = np.asarray(output_grad)
    if g.shape != tape.output.shape:
        raise ValueError(
            f"output_grad shape {g.shape} != {tape.output.shape}"
        )
    g = g.astype(tape.output.dtype, copy=False)
    probs = net.layer_probs()
    param_grads = [None] * len(net.logits)
    g = np.ascontiguousarray(g)
    for li in range(len(net.wiring.layers) - 1, -1, -1):
        layer = net.wiring.layers[li]
        prev = tape.values_feeding(li)
        # Moments against the four bilinear basis functions give the exact
        # gradient w.r.t. the 16 gate probabilities in one contraction.
        p = probs[li]
        moments, g = backward_layer(g, prev, p @ COEFFS, layer)
        dprobs = moments @ COEFFS.T
        dlogits = p * (dprobs - (p * dprobs).sum(axis=1, keepdims=True))
        param_grads[li] = dlogits / net.temperature
    return param_grads, g


def backward(net, tape, output_grad):
    """Single-vector reverse pass. Returns (param_grads, input_grad)."""
    g = np.asarray(output_grad, dtype=np.float64)[None]
    param_grads, input_grad = backward_batch(net, tape, g)
    return param_grads, input_grad[0]


def forward_hard_batch(net, inputs):
    """Hard forward over a [batch, input_width] 0/1 array (argmax opcodes)."""
    x = np.asarray(inputs)
    if x.ndim != 2 or x.shape[1] != net.input_width:
        raise ValueError(
            f"expected [batch, {net.input_width}] inputs, got {x.shape}"
        )
    x = np.ascontiguousarray(x.astype(np.int8, copy=False))
    for layer, ops in zip(net.wiring.layers, net.layer_argmax()):
        x = hard_layer(x, layer, COEFFS[ops])
    return x.astype(np.uint8)


def forward_hard(net, input_vec):
    return forward_hard_batch(net, np.asarray(input_vec)[None])[0]


def sharpened(net, margin=30.0):
    """Copy of `net` with one-hot-at-argmax logits (argmax logit = margin)."""
    logits = []
    for arr in net.logits:
        hot = np.zeros_like(arr)
        hot[np.arange(len(arr)), np.argmax(arr, axis=1)] = margin
        logits.append(hot)
    return LogicNetwork(net.wiring, logits, rng_seed=net.rng_seed,
                        temperature=net.temperature)


def network_to_doc(net):
    return {
        "kind": "logic_network",
        "input_width": net.input_width,
        "layer_widths": net.wiring.layer_widths,
        "wiring_policy": net.wiring.policy,
        "wiring_seed": net.wiring.seed,
        "rng_seed": net.rng_seed,
        "temperature": net.temperature,
        "wiring": [
            {"in0": layer.in0.tolist(), "in1": layer.in1.tolist()}
            for layer in net.wiring.layers
        ],
        "logits": [arr.tolist() for arr in net.logits],
    }


def network_from_doc(doc):
    try:
        layers = [Layer(d["in0"], d["in1"]) for d in doc["wiring"]]
        wiring = WiringSpec(
            doc["input_width"], layers,
            policy=doc.get("wiring_policy", "explicit"),
            seed=doc.get("wiring_seed"),
        )
        net = LogicNetwork(
            wiring,
            [np.asarray(arr, dtype=np.float64) for arr in doc["logits"]],
            rng_seed=doc.get("rng_seed"),
            temperature=doc.get("temperature", 1.0),
        )
    except (KeyError, TypeError, ValueError, WiringError) as exc:
        raise CheckpointError(f"malformed network document: {exc}") from exc
    if net.wiring.layer_widths != list(doc.get("layer_widths", net.wiring.layer_widths)):
        raise CheckpointError("layer_widths metadata disagrees with wiring")
    return net


def save_params(net, path):
    """Write a versioned JSON checkpoint (bit-exact logits round-trip)."""
    doc = {"format_version": CHECKPOINT_VERSION}
    doc.update(network_to_doc(net))
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_params(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {doc.get('format_version')!r}"
            if isinstance(doc, dict) else "checkpoint is not a JSON object"
        )
    return network_from_doc(doc)

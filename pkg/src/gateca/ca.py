"""Cellular-automaton substrate: grids, perception, stepping, BPTT.

A cell's state is a C-bit vector. One step gathers every cell's 3x3
neighborhood per channel, runs each perception kernel over those 9-vectors
(the kernel is shared across cells and channels), concatenates the cell's
own state with the perception bits, and feeds that through the update
network, whose output replaces the state directly. Asynchronous schedules
freeze a random subset of cells each step; frozen cells keep their state
bit-for-bit, so their gradient path is an identity copy.

Soft mode keeps per-step tapes so `backprop_through_time` can run the exact
reverse pass; hard mode evaluates argmax opcodes on 0/1 grids.
"""

import numpy as np
from PIL import Image

from . import CheckpointError
from .network import (
    CHECKPOINT_VERSION, Layer, LogicNetwork, WiringSpec, backward_batch,
    forward_hard_batch, forward_soft_batch, network_from_doc, network_to_doc,
)

# Neighborhood slot order: center first, then the 8 neighbors row-major.
NEIGHBOR_OFFSETS = (
    (0, 0),
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


class BoundaryPolicy:
    """Out-of-grid reads: per-channel constant padding, or toroidal wrap."""

    def __init__(self, mode, pad_values=None):
        if mode not in ("constant", "toroidal"):
            raise ValueError(f"unknown boundary mode {mode!r}")
        self.mode = mode
        self.pad_values = None
        if mode == "constant":
            self.pad_values = np.asarray(pad_values, dtype=np.float64)
            if self.pad_values.ndim != 1:
                raise ValueError("pad_values must be a per-channel vector")
            if not np.all(np.isin(self.pad_values, (0.0, 1.0))):
                raise ValueError("pad values must be 0 or 1")

    @classmethod
    def constant(cls, value, channels):
        return cls("constant", np.full(channels, float(value)))

    @classmethod
    def toroidal(cls):
        return cls("toroidal")

    def to_doc(self):
        if self.mode == "constant":
            return {"mode": "constant", "pad_values": self.pad_values.tolist()}
        return {"mode": "toroidal"}

    @classmethod
    def from_doc(cls, doc):
        if doc["mode"] == "constant":
            return cls("constant", doc["pad_values"])
        return cls.toroidal()


class UpdateSchedule:
    """Synchronous, or asynchronous Bernoulli(rate) cell masks per step."""

    def __init__(self, mode="synchronous", rate=1.0, seed=0):
        if mode not in ("synchronous", "asynchronous"):
            raise ValueError(f"unknown schedule mode {mode!r}")
        if mode == "asynchronous" and not 0.0 < rate <= 1.0:
            raise ValueError("async rate must be in (0, 1]")
        self.mode = mode
        self.rate = float(rate) if mode == "asynchronous" else 1.0
        self.seed = seed

    def mask_stream(self, shape):
        """Per-step update masks; reseeded identically on every call."""
        if self.mode == "synchronous":
            while True:
                yield None
        rng = np.random.default_rng(self.seed)
        while True:
            yield rng.random(shape) < self.rate

    def to_doc(self):
        return {"mode": self.mode, "rate": self.rate, "seed": self.seed}

    @classmethod
    def from_doc(cls, doc):
        return cls(doc["mode"], doc.get("rate", 1.0), doc.get("seed", 0))


SYNCHRONOUS = UpdateSchedule("synchronous")


class CaModel:
    """Perception kernels + update network, shared by every cell.

    Kernels with identical wiring (the default) are fused into one banked
    network evaluated in a single pass per layer; each kernel's logits then
    alias rows of the bank's arrays, so both views stay in sync.
    """

    def __init__(self, kernels, update_net, channels):
        self.kernels = list(kernels)
        self.update_net = update_net
        self.channels = int(channels)
        for k in self.kernels:
            if k.input_width != 9:
                raise ValueError("perception kernels must take 9 inputs")
        bits = {k.output_width for k in self.kernels}
        if len(bits) != 1:
            raise ValueError("kernels must share one output width")
        self.kernel_out_bits = bits.pop()
        expect = self.channels + self.perception_width
        if update_net.input_width != expect:
            raise ValueError(
                f"update net input width {update_net.input_width} != {expect}"
            )
        if update_net.output_width != self.channels:
            raise ValueError("update net must output one bit per channel")
        self.kernel_bank = self._build_bank()

    def _build_bank(self):
        first = self.kernels[0].wiring
        for k in self.kernels[1:]:
            if k.wiring.layer_widths != first.layer_widths:
                return None
            for la, lb in zip(k.wiring.layers, first.layers):
                if not (np.array_equal(la.in0, lb.in0)
                        and np.array_equal(la.in1, lb.in1)):
                    return None
        K = len(self.kernels)
        layers, logits = [], []
        prev = first.input_width
        for li, layer in enumerate(first.layers):
            if li == 0:
                in0 = np.tile(layer.in0, K)
                in1 = np.tile(layer.in1, K)
            else:
                offs = np.repeat(np.arange(K) * prev, layer.width)
                in0 = np.tile(layer.in0, K) + offs
                in1 = np.tile(layer.in1, K) + offs
            layers.append(Layer(in0, in1))
            logits.append(np.concatenate(
                [k.logits[li] for k in self.kernels], axis=0))
            prev = layer.width
        bank = LogicNetwork(
            WiringSpec(first.input_width, layers, policy="kernel_bank"),
            logits, temperature=self.kernels[0].temperature)
        # re-point each kernel's logits at rows of the bank arrays
        for li, layer in enumerate(first.layers):
            for ki, k in enumerate(self.kernels):
                k.logits[li] = bank.logits[li][
                    ki * layer.width:(ki + 1) * layer.width]
        return bank

    @property
    def kernel_count(self):
        return len(self.kernels)

    @property
    def perception_width(self):
        return self.kernel_count * self.channels * self.kernel_out_bits

    def networks(self):
        nets = [*self.kernels, self.update_net]
        if self.kernel_bank is not None:
            nets.append(self.kernel_bank)
        return nets

    def parameters(self):
        if self.kernel_bank is not None:
            return [*self.kernel_bank.logits, *self.update_net.logits]
        return [arr for net in (*self.kernels, self.update_net)
                for arr in net.logits]


def zero_grads(model):
    return [np.zeros_like(arr) for arr in model.parameters()]


# ---------------------------------------------------------------- geometry

def _padded(grid, boundary):
    H, W, C = grid.shape[-3:]
    out = np.empty(grid.shape[:-3] + (H + 2, W + 2, C), dtype=grid.dtype)
    out[...] = boundary.pad_values.astype(grid.dtype)
    out[..., 1:-1, 1:-1, :] = grid
    return out


def gather_neighborhoods(grid, boundary):
    """[...,H,W,C,9] neighbor values per cell and channel, slot order fixed.

    Leading axes (e.g. a batch of grids) pass through untouched.
    """
    H, W, C = grid.shape[-3:]
    out = np.empty(grid.shape + (9,), dtype=grid.dtype)
    if boundary.mode == "toroidal":
        for s, (di, dj) in enumerate(NEIGHBOR_OFFSETS):
            out[..., s] = np.roll(grid, (-di, -dj), axis=(-3, -2))
    else:
        pad = _padded(grid, boundary)
        for s, (di, dj) in enumerate(NEIGHBOR_OFFSETS):
            out[..., s] = pad[..., 1 + di:1 + di + H, 1 + dj:1 + dj + W, :]
    return out


def scatter_neighborhoods(neigh_grad, boundary):
    """Adjoint of gather_neighborhoods: [...,H,W,C,9] grads onto the grid."""
    H, W, C = neigh_grad.shape[-4:-1]
    if boundary.mode == "toroidal":
        acc = np.zeros(neigh_grad.shape[:-1], dtype=neigh_grad.dtype)
        for s, (di, dj) in enumerate(NEIGHBOR_OFFSETS):
            acc += np.roll(neigh_grad[..., s], (di, dj), axis=(-3, -2))
        return acc
    pad = np.zeros(neigh_grad.shape[:-4] + (H + 2, W + 2, C),
                   dtype=neigh_grad.dtype)
    for s, (di, dj) in enumerate(NEIGHBOR_OFFSETS):
        pad[..., 1 + di:1 + di + H, 1 + dj:1 + dj + W, :] += neigh_grad[..., s]
    return pad[..., 1:-1, 1:-1, :]


def neighborhood(grid, i, j, c, boundary):
    """The 9-vector one kernel sees for cell (i,j), channel c."""
    return gather_neighborhoods(grid, boundary)[i, j, c]


# ---------------------------------------------------------------- cell-level

def perceive_cells(model, neighborhoods, mode="soft"):
    """Run all kernels on [B, C, 9] neighborhoods.

    Returns ([B, K*C*bits] perception in kernel-major/channel/bit order,
    kernel tape(s) or None in hard mode).
    """
    B, C, _ = neighborhoods.shape
    flat = neighborhoods.reshape(B * C, 9)
    K, bits = model.kernel_count, model.kernel_out_bits
    if model.kernel_bank is not None:
        if mode == "soft":
            out, tape = forward_soft_batch(model.kernel_bank, flat)
        else:
            out, tape = forward_hard_batch(model.kernel_bank, flat), None
        # bank emits [B*C, K*bits]; the contract wants kernel-major over
        # (channel, bit), so swap the channel and kernel axes
        perception = np.ascontiguousarray(
            out.reshape(B, C, K, bits).transpose(0, 2, 1, 3)
        ).reshape(B, K * C * bits)
        return perception, tape
    outs, tapes = [], []
    for net in model.kernels:
        if mode == "soft":
            out, tape = forward_soft_batch(net, flat)
            tapes.append(tape)
        else:
            out = forward_hard_batch(net, flat)
        outs.append(out.reshape(B, C * bits))
    perception = np.concatenate(outs, axis=1)
    return perception, (tapes if mode == "soft" else None)


def update_cells(model, states, perception, mode="soft"):
    """Run the update network on [B, C] states ++ [B, KCb] perception."""
    inputs = np.concatenate([states, perception], axis=1)
    if mode == "soft":
        return forward_soft_batch(model.update_net, inputs)
    return forward_hard_batch(model.update_net, inputs), None


def perceive_cells_backward(model, tapes, perception_grad, C):
    """Reverse of perceive_cells.

    Returns (param grad arrays in model.parameters() kernel order,
    neighborhood grads [B, C, 9]).
    """
    B = perception_grad.shape[0]
    K, bits = model.kernel_count, model.kernel_out_bits
    if model.kernel_bank is not None:
        g = np.ascontiguousarray(
            perception_grad.reshape(B, K, C, bits).transpose(0, 2, 1, 3)
        ).reshape(B * C, K * bits)
        pgrads, igrad = backward_batch(model.kernel_bank, tapes, g)
        return pgrads, igrad.reshape(B, C, 9)
    neigh_grad = np.zeros((B * C, 9), dtype=perception_grad.dtype)
    kernel_grads = []
    width = C * bits
    for ki, net in enumerate(model.kernels):
        sl = perception_grad[:, ki * width:(ki + 1) * width]
        g = sl.reshape(B * C, bits)
        pgrads, igrad = backward_batch(net, tapes[ki], g)
        kernel_grads.extend(pgrads)
        neigh_grad += igrad
    return kernel_grads, neigh_grad.reshape(B, C, 9)


# ---------------------------------------------------------------- stepping

class StepTape:
    __slots__ = ("kernel_tapes", "update_tape", "mask", "boundary")

    def __init__(self, kernel_tapes, update_tape, mask, boundary):
        self.kernel_tapes = kernel_tapes
        self.update_tape = update_tape
        self.mask = mask
        self.boundary = boundary


def perceive(grid, model, boundary, mode="soft"):
    """Perception tensor [..., H, W, K*C*bits] for one grid or a batch."""
    C = grid.shape[-1]
    if C != model.channels:
        raise ValueError(f"grid has {C} channels, model expects {model.channels}")
    neigh = gather_neighborhoods(grid, boundary)
    perception, tapes = perceive_cells(model, neigh.reshape(-1, C, 9), mode)
    return perception.reshape(grid.shape[:-1] + (model.perception_width,)), tapes


def step(grid, model, boundary, schedule=SYNCHRONOUS, mode="soft", mask=None):
    """One CA step reading only the pre-step grid.

    `grid` is [H,W,C] or a batch [...,H,W,C]. Returns (new_grid, StepTape or
    None, mask or None). An explicit `mask` (shape grid.shape[:-1]) overrides
    the schedule; rollout draws one mask per step from the schedule's stream.
    """
    C = grid.shape[-1]
    if mask is None and schedule.mode == "asynchronous":
        mask = next(schedule.mask_stream(grid.shape[:-1]))
    perception, ktapes = perceive(grid, model, boundary, mode)
    states = grid.reshape(-1, C)
    out, utape = update_cells(model, states, perception.reshape(states.shape[0], -1), mode)
    new_grid = out.reshape(grid.shape)
    if mask is not None:
        keep = ~mask if mask.dtype == bool else mask < 0.5
        new_grid = new_grid.copy()
        new_grid[keep] = grid[keep]
    tape = StepTape(ktapes, utape, mask, boundary) if mode == "soft" else None
    return new_grid, tape, mask


class RolloutTape:
    __slots__ = ("steps",)

    def __init__(self, steps):
        self.steps = steps


class RematTape:
    """BPTT record that stores per-step grids and masks instead of full
    activation tapes; each step is re-run forward during the reverse pass.

    Training is memory-bound here: replaying one step right before its
    backward keeps that step's activations hot, and the stored state is two
    orders of magnitude smaller. Gradients are bit-identical to the stored
    variant because the forward pass is deterministic.
    """

    __slots__ = ("grids", "masks", "boundary")

    def __init__(self, grids, masks, boundary):
        self.grids = grids
        self.masks = masks
        self.boundary = boundary


def rollout(grid0, model, steps, boundary, schedule=SYNCHRONOUS, mode="soft",
            fault_fn=None, keep_tapes=None, tape_mode="full"):
    """Iterate `steps` CA updates. Returns (trajectory, tape or None).

    trajectory is a list of steps+1 grids including the initial one.
    fault_fn(t) may return a [H,W] bool mask of cells whose state is forced
    to all-zero after step t (t counts from 1). tape_mode "full" records
    activation tapes; "remat" records only masks and replays steps during
    the reverse pass (cheaper for big rollouts, same gradients).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if keep_tapes is None:
        keep_tapes = mode == "soft"
    if fault_fn is not None and keep_tapes and mode == "soft":
        raise ValueError("fault injection during differentiable rollouts "
                         "is not supported")
    masks = schedule.mask_stream(grid0.shape[:-1])
    trajectory = [grid0]
    tapes, used_masks = [], []
    grid = grid0
    for t in range(1, steps + 1):
        mask = next(masks)
        grid, tape, _ = step(grid, model, boundary, mode=mode, mask=mask)
        if fault_fn is not None:
            dead = fault_fn(t)
            if dead is not None and dead.any():
                grid = grid.copy()
                grid[..., dead, :] = 0
        trajectory.append(grid)
        if keep_tapes and tape_mode == "full":
            tapes.append(tape)
        elif keep_tapes:
            used_masks.append(mask)
    if not keep_tapes:
        return trajectory, None
    if tape_mode == "full":
        return trajectory, RolloutTape(tapes)
    return trajectory, RematTape(trajectory, used_masks, boundary)


def _backward_one_step(model, st, g, shape, C, kernel_grads, update_grads):
    if st.mask is not None:
        m = st.mask.astype(g.dtype)[..., None]
        g_update_out = (g * m).reshape(-1, C)
        g_carried = g * (1.0 - m)
    else:
        g_update_out = g.reshape(-1, C)
        g_carried = None
    pgrads, igrad = backward_batch(model.update_net, st.update_tape, g_update_out)
    for acc, pg in zip(update_grads, pgrads):
        acc += pg
    g_state = igrad[:, :C].reshape(shape)
    g_perc = igrad[:, C:]
    kgrads, neigh_grad = perceive_cells_backward(
        model, st.kernel_tapes, g_perc, C)
    for acc, pg in zip(kernel_grads, kgrads):
        acc += pg
    scattered = scatter_neighborhoods(
        neigh_grad.reshape(shape + (9,)), st.boundary)
    g = g_state + scattered
    if g_carried is not None:
        g = g + g_carried
    return g


def backprop_through_time(model, tape, final_grad):
    """Exact reverse pass over a soft rollout (single grid or batch).

    Accepts a RolloutTape (stored activations) or a RematTape (activations
    replayed step by step; bit-identical gradients). Returns (param_grads
    aligned with model.parameters(), grad wrt grid0). Frozen cells pass
    their state gradient through unchanged; parameter gradients are summed
    over all cells and steps.
    """
    shape = final_grad.shape
    C = shape[-1]
    params = model.parameters()
    n_update = len(model.update_net.logits)
    kernel_grads = [np.zeros_like(a) for a in params[:-n_update]]
    update_grads = [np.zeros_like(a) for a in params[-n_update:]]
    g = np.asarray(final_grad)
    if isinstance(tape, RematTape):
        for t in range(len(tape.masks) - 1, -1, -1):
            _, st, _ = step(tape.grids[t], model, tape.boundary,
                            mask=tape.masks[t])
            g = _backward_one_step(model, st, g, shape, C,
                                   kernel_grads, update_grads)
    else:
        for st in reversed(tape.steps):
            g = _backward_one_step(model, st, g, shape, C,
                                   kernel_grads, update_grads)
    return kernel_grads + update_grads, g


# ---------------------------------------------------------------- model I/O

def model_to_doc(model, meta=None):
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "ca_model",
        "channels": model.channels,
        "kernel_out_bits": model.kernel_out_bits,
        "kernels": [network_to_doc(k) for k in model.kernels],
        "update_net": network_to_doc(model.update_net),
    }
    if meta:
        doc["meta"] = meta
    return doc


def model_from_doc(doc):
    if doc.get("kind") != "ca_model":
        raise CheckpointError("not a ca_model checkpoint")
    kernels = [network_from_doc(d) for d in doc["kernels"]]
    return CaModel(kernels, network_from_doc(doc["update_net"]), doc["channels"])


def save_model(model, path, meta=None):
    import json
    with open(path, "w") as fh:
        json.dump(model_to_doc(model, meta), fh)


def load_model(path):
    import json
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    return model_from_doc(doc)


def load_model_meta(path):
    import json
    with open(path) as fh:
        return json.load(fh).get("meta", {})


# ---------------------------------------------------------------- snapshots

def grid_to_image(grid, rgb=False):
    arr = np.asarray(grid)
    if rgb:
        if arr.shape[2] < 3:
            raise ValueError("rgb export needs at least 3 channels")
        data = (np.clip(arr[:, :, :3], 0, 1) * 255).astype(np.uint8)
        return Image.fromarray(data, mode="RGB")
    data = (np.clip(arr[:, :, 0], 0, 1) * 255).astype(np.uint8)
    return Image.fromarray(data, mode="L")


def save_grid_png(grid, path, rgb=False):
    # Fixed encoder settings so reruns produce identical bytes.
    grid_to_image(grid, rgb=rgb).save(path, format="PNG", optimize=False,
                                      compress_level=6)


def save_grid_pbm(grid, path):
    """Channel 0 as a plain-text portable bitmap (diff-friendly)."""
    bits = (np.asarray(grid)[:, :, 0] > 0.5).astype(np.uint8)
    H, W = bits.shape
    lines = [f"P1", f"{W} {H}"]
    lines += [" ".join(str(v) for v in row) for row in bits]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_grid_pbm(path):
    with open(path) as fh:
        tokens = [t for line in fh
                  for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P1":
        raise ValueError(f"{path} is not a plain PBM file")
    W, H = int(tokens[1]), int(tokens[2])
    bits = np.array(tokens[3:3 + W * H], dtype=np.uint8).reshape(H, W)
    return bits

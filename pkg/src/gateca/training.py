"""Losses, targets, optimizer, and the training loops.

Two training regimes share the optimizer and model plumbing:

* rule-table training (Game of Life): every epoch is one full batch over
  all 512 possible 3x3 neighborhoods, supervising each sample's center
  cell after a single soft step.
* pattern training (checkerboard / lizard / colored grid): every step
  draws fresh initial grids, rolls the CA forward T soft steps, scores
  only the final grid, and backpropagates through time.

Gradients are clipped at a global norm before the adaptive-moment update;
the continuous relaxations are numerically touchy in deep stacks and the
clip keeps early steps from blowing up.
"""

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from importlib import resources

import numpy as np

from . import TrainingDiverged
from .ca import (
    BoundaryPolicy, CaModel, UpdateSchedule, SYNCHRONOUS,
    backprop_through_time, perceive_cells, perceive_cells_backward, rollout,
    update_cells,
)
from .network import (
    Layer, WiringSpec, backward_batch, build_wiring, forward_hard_batch,
    init_params,
)

# ---------------------------------------------------------------- targets


def life_next_center(bits):
    """Conway's rule for one neighborhood vector [center, 8 neighbors]."""
    live = int(sum(bits[1:]))
    if bits[0]:
        return 1 if live in (2, 3) else 0
    return 1 if live == 3 else 0


def gol_dataset():
    """All 512 neighborhood transitions: ([512, 9] bits, [512] labels)."""
    X = np.zeros((512, 9), dtype=np.float64)
    y = np.zeros(512, dtype=np.float64)
    for code in range(512):
        bits = [(code >> k) & 1 for k in range(9)]
        X[code] = bits
        y[code] = life_next_center(bits)
    return X, y


def _asset_text(name):
    return resources.files("gateca").joinpath("assets", name).read_text()


def _parse_pnm_tokens(text, magic):
    tokens = [t for line in text.splitlines()
              for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != magic:
        raise ValueError(f"expected {magic} bitmap")
    return tokens


def lizard_target():
    """Bundled 20x20 lizard silhouette (channel-0 bits)."""
    tokens = _parse_pnm_tokens(_asset_text("lizard_20x20.pbm"), "P1")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[3:3 + w * h], dtype=np.float64).reshape(h, w)


def colored_grid_target():
    """Bundled 14x14 RGB target; every pixel is a corner of the RGB cube."""
    tokens = _parse_pnm_tokens(_asset_text("colored_grid_14x14.ppm"), "P3")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:4 + w * h * 3], dtype=np.float64).reshape(h, w, 3)
    return data / maxval


def checkerboard_target(size):
    """2x2-square checkerboard: cell (i,j) = (floor(i/2)+floor(j/2)) mod 2."""
    i, j = np.indices((size, size))
    return ((i // 2 + j // 2) % 2).astype(np.float64)


def make_target(kind, size=None):
    if kind == "gol":
        return gol_dataset()[1]
    if kind == "checkerboard":
        return checkerboard_target(size)
    if kind == "lizard":
        return lizard_target()
    if kind == "colored_grid":
        return colored_grid_target()
    raise ValueError(f"unknown target kind {kind!r}")


# ---------------------------------------------------------------- losses

def loss_gol(pred, labels):
    """Sum of squared errors over the 512 rule-table predictions."""
    d = pred - labels
    return float((d * d).sum()), 2.0 * d


def loss_channel0(final_grid, target):
    """Squared error on channel 0 only; gradient is zero elsewhere.

    Accepts one grid [H,W,C] or a batch [...,H,W,C]; batches sum.
    """
    if final_grid.shape[-3:-1] != target.shape:
        raise ValueError(f"grid {final_grid.shape} vs target {target.shape}")
    d = final_grid[..., 0] - target
    grad = np.zeros(final_grid.shape, dtype=np.float64)
    grad[..., 0] = 2.0 * d
    return float((d * d).sum()), grad


def loss_rgb(final_grid, target):
    """Squared error on channels 0-2; gradient is zero on the rest."""
    if final_grid.shape[-1] < 3 or final_grid.shape[-3:-1] != target.shape[:2]:
        raise ValueError(f"grid {final_grid.shape} vs target {target.shape}")
    d = final_grid[..., :3] - target
    grad = np.zeros(final_grid.shape, dtype=np.float64)
    grad[..., :3] = 2.0 * d
    return float((d * d).sum()), grad


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerSettings:
    rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8


class AdamState:
    """First/second-moment state for one parameter list."""

    def __init__(self, params, settings=None, clip_norm=1.0):
        self.settings = settings or OptimizerSettings()
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def clip_global_norm(grads, clip_norm):
    total = float(sum(float((g * g).sum()) for g in grads))
    norm = total ** 0.5
    if clip_norm and norm > clip_norm:
        scale = clip_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adam_step(params, grads, state):
    """In-place adaptive-moment update after global-norm clipping."""
    s = state.settings
    grads, _ = clip_global_norm(grads, state.clip_norm)
    state.t += 1
    bc1 = 1.0 - s.beta1 ** state.t
    bc2 = 1.0 - s.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * (g * g)
        p -= s.rate * (m / bc1) / (np.sqrt(v / bc2) + s.epsilon)
    return params, state


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    experiment: str
    channels: int
    kernel_count: int
    kernel_layers: list
    update_layers: list
    steps: int = 1
    grid_size: int = 16
    boundary: str = "pad0"
    async_rate: float = 0.0          # 0 = synchronous
    init_policy: tuple = ("bernoulli", 0.5)
    kernel_structured: bool = True
    param_init: tuple = ("passthrough_bias", 1.0, 5.0)
    kernel_init: tuple = ("normal", 1.0)   # shallow kernels: diverse start
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    clip_norm: float = 1.0
    epochs: int = 2000               # rule-table training
    train_steps: int = 2000          # pattern training
    batch_size: int = 1
    wiring_seed: int = 0
    param_seed: int = 0
    data_seed: int = 0
    schedule_seed: int = 0
    dtype: str = "float64"
    eval_every: int = 25
    eval_grids: int = 8
    checkpoint_every: int = 0        # 0 = only final
    temperature: float = 1.0
    temperature_final: float = 0.0   # >0 anneals geometrically toward this

    def boundary_policy(self):
        return boundary_from_name(self.boundary, self.channels)

    def to_json(self):
        doc = asdict(self)
        doc["init_policy"] = list(self.init_policy)
        doc["param_init"] = list(self.param_init)
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        doc["init_policy"] = tuple(doc.get("init_policy", ("bernoulli", 0.5)))
        doc["param_init"] = tuple(doc.get("param_init", ("passthrough_bias", 1.0, 5.0)))
        doc["kernel_init"] = tuple(doc.get("kernel_init", ("normal", 1.0)))
        doc["optimizer"] = OptimizerSettings(**doc.get("optimizer", {}))
        return cls(**doc)


def boundary_from_name(name, channels):
    if name == "pad0":
        return BoundaryPolicy.constant(0, channels)
    if name == "pad1":
        return BoundaryPolicy.constant(1, channels)
    if name == "torus":
        return BoundaryPolicy.toroidal()
    raise ValueError(f"unknown boundary {name!r} (pad0|pad1|torus)")


def structured_kernel_wiring(layer_widths):
    """Kernel wiring whose first 8-gate layer pairs the center with each
    neighbor; deeper layers halve."""
    if layer_widths[0] != 8:
        raise ValueError("structured kernels need a first layer of width 8")
    layers = [Layer(np.zeros(8, dtype=np.int64), np.arange(1, 9))]
    prev = 8
    for width in layer_widths[1:]:
        if prev < 2 * width:
            raise ValueError("kernel tail must halve")
        idx = np.arange(width, dtype=np.int64)
        layers.append(Layer(2 * idx, 2 * idx + 1))
        prev = width
    return WiringSpec(9, layers, policy="structured_center_pairs")


def build_model(cfg):
    """Instantiate the CA model a config describes, deterministically."""
    wire_seeds = np.random.SeedSequence(cfg.wiring_seed).generate_state(
        cfg.kernel_count + 1)
    param_seeds = np.random.SeedSequence(cfg.param_seed).generate_state(
        cfg.kernel_count + 1)
    kernels = []
    kinit = cfg.kernel_init or cfg.param_init
    for k in range(cfg.kernel_count):
        if cfg.kernel_structured:
            wiring = structured_kernel_wiring(cfg.kernel_layers)
        else:
            wiring = build_wiring(9, cfg.kernel_layers,
                                  "cover_inputs_then_random",
                                  seed=int(wire_seeds[k]))
        kernels.append(init_params(wiring, kinit,
                                   seed=int(param_seeds[k]),
                                   temperature=cfg.temperature))
    bits = cfg.kernel_layers[-1]
    in_width = cfg.channels + cfg.kernel_count * cfg.channels * bits
    update_wiring = build_wiring(in_width, cfg.update_layers,
                                 "cover_inputs_then_random",
                                 seed=int(wire_seeds[-1]))
    update = init_params(update_wiring, cfg.param_init,
                         seed=int(param_seeds[-1]),
                         temperature=cfg.temperature)
    return CaModel(kernels, update, cfg.channels)


def initial_grid(policy, size, channels, rng, dtype="float64"):
    shape = (size, size, channels)
    dt = np.dtype(dtype)
    kind = policy[0]
    if kind == "bernoulli":
        return (rng.random(shape) < policy[1]).astype(dt)
    if kind == "all_zero":
        return np.zeros(shape, dtype=dt)
    if kind == "center_seed":
        grid = np.zeros(shape, dtype=dt)
        grid[size // 2, size // 2, :] = 1
        return grid
    raise ValueError(f"unknown init policy {kind!r}")


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: CaModel
    config: TrainConfig
    history: list            # (step, loss, wall_ms)
    eval_history: list       # (step, metric)
    converged: bool
    initial_loss: float
    final_loss: float


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "wall_ms"])
        w.writerows(history)


def _single_cell_forward(model, X, mode="soft"):
    """Forward the update rule for a batch of standalone neighborhoods.

    X is [N, 9] with slot 0 the center; channel count must be 1.
    Returns (predictions [N], tapes or None).
    """
    neigh = X[:, None, :]
    perception, ktapes = perceive_cells(model, neigh, mode)
    states = X[:, :1]
    out, utape = update_cells(model, states, perception, mode)
    return out[:, 0], (ktapes, utape)


def _single_cell_backward(model, tapes, out_grad):
    ktapes, utape = tapes
    g = out_grad[:, None]
    upd_grads, igrad = backward_batch(model.update_net, utape, g)
    perc_grad = igrad[:, 1:]
    kernel_grads, _ = perceive_cells_backward(model, ktapes, perc_grad, 1)
    return kernel_grads + upd_grads


def gol_hard_accuracy(model, X, y):
    pred, _ = _single_cell_forward(model, X.astype(np.uint8), mode="hard")
    return int((pred == y.astype(np.uint8)).sum())


def train_gol(cfg, on_epoch=None, model=None):
    """Rule-table training; stops at perfect hard accuracy.

    batch_size selects shuffled minibatches per epoch; 0 (or 512) trains
    full-batch. Minibatch gradient noise is what finally breaks the
    knife-edge gate mixtures whose argmax disagrees with their soft
    behavior; full-batch runs stall a handful of samples short.
    """
    X, y = gol_dataset()
    X = X.astype(np.dtype(cfg.dtype))
    model = model or build_model(cfg)
    params = model.parameters()
    opt = AdamState(params, cfg.optimizer, cfg.clip_norm)
    rng = np.random.default_rng(cfg.data_seed)
    bs = cfg.batch_size if 0 < cfg.batch_size < len(X) else len(X)
    history, eval_history = [], []
    t0 = time.perf_counter()
    initial_loss = None
    converged = False
    loss = float("nan")
    for epoch in range(1, cfg.epochs + 1):
        set_temperature(model, annealed_temperature(cfg, epoch, cfg.epochs))
        order = rng.permutation(len(X)) if bs < len(X) else np.arange(len(X))
        loss = 0.0
        for lo in range(0, len(X), bs):
            idx = order[lo:lo + bs]
            pred, tapes = _single_cell_forward(model, X[idx])
            part, grad = loss_gol(pred.astype(np.float64), y[idx])
            loss += part
            grads = _single_cell_backward(model, tapes, grad)
            adam_step(params, grads, opt)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        if initial_loss is None:
            initial_loss = loss
        history.append((epoch, loss, (time.perf_counter() - t0) * 1e3))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            acc = gol_hard_accuracy(model, X, y)
            eval_history.append((epoch, acc))
            if on_epoch:
                on_epoch(epoch, loss, acc)
            if acc == 512:
                converged = True
                break
    return TrainResult(model, cfg, history, eval_history, converged,
                       initial_loss, loss)


def set_temperature(model, tau):
    for net in model.networks():
        net.temperature = tau


def annealed_temperature(cfg, i, total):
    """Geometric temperature schedule; sharper softmax closes the gap
    between the trained mixture and its crystallized argmax."""
    if not cfg.temperature_final or total <= 1:
        return cfg.temperature
    frac = (i - 1) / (total - 1)
    return cfg.temperature * (cfg.temperature_final / cfg.temperature) ** frac


def pattern_loss_fn(cfg):
    return loss_rgb if cfg.experiment == "colored_grid" else loss_channel0


def pattern_accuracy(traj_final, target, rgb=False):
    """Fraction of exactly-correct pattern bits in a hard grid."""
    if rgb:
        pred = traj_final[:, :, :3]
        return float((pred == target).mean())
    return float((traj_final[:, :, 0] == target).mean())


def evaluate_pattern_model(model, cfg, target, seeds=None, grid_size=None,
                           steps=None, rng=None):
    """Hard-rollout pixel accuracy from fresh initial grids."""
    grid_size = grid_size or cfg.grid_size
    steps = steps or cfg.steps
    boundary = boundary_from_name(cfg.boundary, cfg.channels)
    rgb = cfg.experiment == "colored_grid"
    rng = rng or np.random.default_rng(0)
    grids = np.stack([
        initial_grid(cfg.init_policy, grid_size, cfg.channels, rng)
        for _ in range(cfg.eval_grids)]).astype(np.uint8)
    if cfg.async_rate:
        sched = UpdateSchedule("asynchronous", cfg.async_rate,
                               seed=int(rng.integers(1 << 31)))
    else:
        sched = SYNCHRONOUS
    traj, _ = rollout(grids, model, steps, boundary, sched, mode="hard")
    return [pattern_accuracy(final, target, rgb) for final in traj[-1]]


def train_pattern(cfg, on_step=None, checkpoint_fn=None, model=None):
    """Pattern training: fresh inits, soft rollout, final-step loss, BPTT."""
    target = make_target(cfg.experiment, cfg.grid_size)
    loss_fn = pattern_loss_fn(cfg)
    model = model or build_model(cfg)
    params = model.parameters()
    opt = AdamState(params, cfg.optimizer, cfg.clip_norm)
    boundary = cfg.boundary_policy()
    rng_data = np.random.default_rng(cfg.data_seed)
    rng_sched = np.random.default_rng(cfg.schedule_seed)
    rng_eval = np.random.default_rng(np.random.SeedSequence(
        cfg.data_seed).spawn(1)[0])
    history, eval_history = [], []
    t0 = time.perf_counter()
    initial_loss = None
    converged = False
    loss_mean = float("nan")
    for step_i in range(1, cfg.train_steps + 1):
        set_temperature(model, annealed_temperature(cfg, step_i, cfg.train_steps))
        grids0 = np.stack([
            initial_grid(cfg.init_policy, cfg.grid_size, cfg.channels,
                         rng_data, cfg.dtype)
            for _ in range(cfg.batch_size)])
        if cfg.async_rate:
            sched = UpdateSchedule("asynchronous", cfg.async_rate,
                                   seed=int(rng_sched.integers(1 << 31)))
        else:
            sched = SYNCHRONOUS
        traj, tape = rollout(grids0, model, cfg.steps, boundary, sched,
                             tape_mode="remat")
        loss_sum, grad = loss_fn(traj[-1].astype(np.float64), target)
        pgrads, _ = backprop_through_time(model, tape, grad)
        del traj, tape
        loss_mean = loss_sum / cfg.batch_size
        if not np.isfinite(loss_mean):
            raise TrainingDiverged(f"non-finite loss at step {step_i}")
        if initial_loss is None:
            initial_loss = loss_mean
        grads = [g / cfg.batch_size for g in pgrads]
        adam_step(params, grads, opt)
        history.append((step_i, loss_mean, (time.perf_counter() - t0) * 1e3))
        if checkpoint_fn and cfg.checkpoint_every and \
                step_i % cfg.checkpoint_every == 0:
            checkpoint_fn(step_i, model)
        if step_i % cfg.eval_every == 0 or step_i == cfg.train_steps:
            accs = evaluate_pattern_model(model, cfg, target, rng=rng_eval)
            eval_history.append((step_i, float(np.mean(accs))))
            if on_step:
                on_step(step_i, loss_mean, accs)
            if all(a == 1.0 for a in accs):
                converged = True
                break
    return TrainResult(model, cfg, history, eval_history, converged,
                       initial_loss, loss_mean)


def train(cfg, **kwargs):
    if cfg.experiment == "gol":
        return train_gol(cfg, **kwargs)
    return train_pattern(cfg, **kwargs)


# ---------------------------------------------------------------- presets

def preset(name, seed=0):
    """Per-experiment architectures and schedules (seed shifts all streams)."""
    base = dict(wiring_seed=seed, param_seed=seed + 1000,
                data_seed=seed + 2000, schedule_seed=seed + 3000)
    if name == "gol":
        return TrainConfig(
            experiment="gol", channels=1, kernel_count=16,
            kernel_layers=[8, 4, 2, 1],
            update_layers=[128] * 16 + [64, 32, 16, 8, 4, 2, 1],
            grid_size=3, boundary="pad0", epochs=2000, eval_every=2,
            batch_size=64,
            optimizer=OptimizerSettings(rate=0.02),
            **base)
    if name in ("checkerboard", "checkerboard_async"):
        return TrainConfig(
            experiment="checkerboard", channels=8, kernel_count=16,
            kernel_layers=[8, 4, 2],
            update_layers=[256] * 10 + [128, 64, 32, 16, 8, 8],
            steps=20, grid_size=16, boundary="pad0",
            async_rate=0.6 if name.endswith("async") else 0.0,
            init_policy=("bernoulli", 0.5),
            train_steps=2500, batch_size=1, eval_every=25, eval_grids=8,
            dtype="float32",
            optimizer=OptimizerSettings(rate=0.02),
            **base)
    if name == "lizard":
        return TrainConfig(
            experiment="lizard", channels=128, kernel_count=4,
            kernel_layers=[8, 4, 2, 1],
            update_layers=[512] * 8 + [256, 128],
            steps=12, grid_size=20, boundary="pad0",
            init_policy=("center_seed",),
            train_steps=3000, batch_size=1, eval_every=50, eval_grids=1,
            dtype="float32",
            **base)
    if name == "colored_grid":
        return TrainConfig(
            experiment="colored_grid", channels=64, kernel_count=4,
            kernel_layers=[8, 4, 2],
            update_layers=[512] * 8 + [256, 128, 64],
            steps=30, grid_size=14, boundary="pad1",
            init_policy=("all_zero",),
            train_steps=3000, batch_size=1, eval_every=50, eval_grids=1,
            dtype="float32",
            **base)
    raise ValueError(f"unknown experiment {name!r}")


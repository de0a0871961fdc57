"""Experiment orchestration: train or load a model, crystallize it, run
hard rollouts at training and generalization scales, inject faults, and
write every artifact (frames, netlists, reports, error curves) into one
run directory.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import GatecaError
from .ca import (
    BoundaryPolicy, SYNCHRONOUS, UpdateSchedule, load_model, rollout,
    save_grid_pbm, save_grid_png, save_model,
)
from .circuit import (
    census, compose_cell_circuit, crystallize_model, export_dot,
    hard_rollout_packed, prune, save_netlist,
)
from .training import (
    TrainConfig, boundary_from_name, gol_dataset, gol_hard_accuracy,
    initial_grid, make_target, pattern_accuracy, preset, train,
    write_history_csv,
)

# Reported in the run summaries for side-by-side comparison; these are the
# reference implementation-independent counts quoted per experiment, never
# asserted (they are seed-dependent).
REFERENCE_ACTIVE_GATES = {
    "gol": 336,
    "checkerboard": 22,
    "checkerboard_pruned": 5,
    "lizard": 577,
    "colored_grid": 465,
}


class FaultPolicy:
    """Cell-disabling schemes: a disabled cell's state is forced to
    all-zero after every step, so neighbors read zeros from it next step."""

    def __init__(self, mode="none", region=None, revive_step=None,
                 size=(10, 10), seed=0):
        if mode not in ("none", "permanent", "transient", "roaming"):
            raise ValueError(f"unknown fault mode {mode!r}")
        self.mode = mode
        self.region = region
        self.revive_step = revive_step
        self.size = size
        self.seed = seed

    @classmethod
    def parse(cls, spec):
        """CLI grammar: none | permanent:r,c,h,w | transient:r,c,h,w@T |
        roaming[:h,w][:seed]"""
        if spec in (None, "", "none"):
            return cls("none")
        kind, _, rest = spec.partition(":")
        if kind == "permanent":
            r, c, h, w = (int(v) for v in rest.split(","))
            return cls("permanent", region=(r, c, h, w))
        if kind == "transient":
            coords, _, revive = rest.partition("@")
            r, c, h, w = (int(v) for v in coords.split(","))
            return cls("transient", region=(r, c, h, w),
                       revive_step=int(revive))
        if kind == "roaming":
            parts = rest.split(":") if rest else []
            size = (10, 10)
            seed = 0
            if parts and "," in parts[0]:
                h, w = (int(v) for v in parts[0].split(","))
                size = (h, w)
                parts = parts[1:]
            if parts and parts[0]:
                seed = int(parts[0])
            return cls("roaming", size=size, seed=seed)
        raise ValueError(f"cannot parse fault spec {spec!r}")

    def mask_fn(self, H, W):
        """fault_fn(t) for rollouts; returns None when nothing is disabled."""
        if self.mode == "none":
            return None
        if self.mode in ("permanent", "transient"):
            r, c, h, w = self.region
            if not (0 <= r and 0 <= c and r + h <= H and c + w <= W):
                raise ValueError(f"fault region {self.region} outside {H}x{W}")
            mask = np.zeros((H, W), dtype=bool)
            mask[r:r + h, c:c + w] = True
            revive = self.revive_step

            def fn(t):
                if revive is not None and t >= revive:
                    return None
                return mask
            return fn
        rng = np.random.default_rng(self.seed)
        fh, fw = self.size
        if fh > H or fw > W:
            raise ValueError(f"fault size {self.size} outside {H}x{W}")

        def roaming(t):
            r = int(rng.integers(0, H - fh + 1))
            c = int(rng.integers(0, W - fw + 1))
            mask = np.zeros((H, W), dtype=bool)
            mask[r:r + fh, c:c + fw] = True
            return mask
        return roaming


def error_t(target, grid):
    """Sum of absolute differences on the pattern channels.

    A 2-d target compares channel 0; an RGB target compares channels 0-2.
    """
    target = np.asarray(target)
    grid = np.asarray(grid)
    if target.ndim == 2:
        if grid.shape[:2] != target.shape:
            raise ValueError(f"grid {grid.shape} vs target {target.shape}")
        return float(np.abs(target - grid[:, :, 0]).sum())
    if grid.shape[:2] != target.shape[:2] or grid.shape[2] < 3:
        raise ValueError(f"grid {grid.shape} vs target {target.shape}")
    return float(np.abs(target - grid[:, :, :3]).sum())


@dataclass
class RunReport:
    experiment: str
    seeds: dict
    config_hash: str
    census: dict = field(default_factory=dict)
    error_series: dict = field(default_factory=dict)
    final_accuracy: dict = field(default_factory=dict)
    reference_gates: dict = field(default_factory=dict)
    wall_ms: float = 0.0
    converged: bool = False
    artifacts: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def config_hash(cfg):
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]


def _frame_name(t, fmt):
    return f"frame_{t:05d}.{fmt}"


def write_frames(trajectory, times, out_dir, fmt="png", rgb=False,
                 prefix=""):
    written = []
    out_dir = Path(out_dir)
    for t in times:
        if t >= len(trajectory):
            continue
        name = prefix + _frame_name(t, fmt)
        path = out_dir / name
        if fmt == "png":
            save_grid_png(trajectory[t], path, rgb=rgb)
        else:
            save_grid_pbm(trajectory[t], path)
        written.append(name)
    return written


# Per-experiment inference scales and frame dump times.
INFERENCE_PLANS = {
    "gol": dict(scales=[(32, 90)], frames=[0, 60, 84], boundary="torus",
                init=("bernoulli", 0.5)),
    "checkerboard": dict(scales=[(16, 20), (64, 80)],
                         frames={16: [0, 10, 20], 64: [0, 40, 80]}),
    "checkerboard_async": dict(scales=[(16, 50), (64, 100)],
                               frames={16: [0, 25, 50], 64: [0, 50, 100]}),
    "lizard": dict(scales=[(20, 12), (40, 13)],
                   frames={20: [0, 6, 12], 40: [0, 6, 13]}),
    "colored_grid": dict(scales=[(14, 30)], frames={14: [0, 6, 12, 18, 24, 30]},
                         rgb=True),
}


def run_experiment(name, overrides=None, out_dir="runs", seed=0,
                   load_checkpoint=None, frame_format="png",
                   train_fn=train):
    """Train (or load) one experiment, crystallize, simulate, and report."""
    if name not in INFERENCE_PLANS:
        raise GatecaError(f"unknown experiment {name!r}")
    t0 = time.perf_counter()
    cfg = preset(name, seed=seed)
    for key, value in (overrides or {}).items():
        if not hasattr(cfg, key):
            raise GatecaError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(
        experiment=name,
        seeds={"wiring": cfg.wiring_seed, "param": cfg.param_seed,
               "data": cfg.data_seed, "schedule": cfg.schedule_seed},
        config_hash=config_hash(cfg),
    )

    if load_checkpoint:
        model = load_model(load_checkpoint)
        result = None
    else:
        result = train_fn(cfg)
        model = result.model
        report.converged = result.converged
        write_history_csv(result.history, out / "loss_history.csv")
        report.artifacts.append("loss_history.csv")
    save_model(model, out / "model.json", meta={"config": json.loads(cfg.to_json())})
    report.artifacts.append("model.json")

    circuits = crystallize_model(model)
    cell = compose_cell_circuit(circuits)
    pruned = prune(cell)
    report.census = {
        "cell_circuit": census(cell).to_doc(),
        "pruned": census(pruned).to_doc(),
    }
    report.reference_gates = {
        "reported_active": REFERENCE_ACTIVE_GATES.get(name),
        "reported_pruned": REFERENCE_ACTIVE_GATES.get(f"{name}_pruned"),
    }
    save_netlist(cell, out / "netlist.json")
    save_netlist(pruned, out / "netlist_pruned.json")
    export_dot(pruned, out / "circuit_pruned.dot")
    report.artifacts += ["netlist.json", "netlist_pruned.json",
                         "circuit_pruned.dot"]

    plan = INFERENCE_PLANS[name]
    rgb = plan.get("rgb", False)
    if name == "gol":
        X, y = gol_dataset()
        acc = gol_hard_accuracy(model, X, y)
        report.final_accuracy["rule_table"] = acc / 512.0
        size, steps = plan["scales"][0]
        rng = np.random.default_rng(cfg.data_seed + 99)
        grid0 = (rng.random((size, size, 1)) < 0.5).astype(np.uint8)
        traj = hard_rollout_packed(cell, grid0, steps,
                                   BoundaryPolicy.toroidal())
        report.artifacts += write_frames(traj, plan["frames"], out,
                                         frame_format)
    else:
        rng = np.random.default_rng(cfg.data_seed + 99)
        boundary_name = cfg.boundary
        for size, steps in plan["scales"]:
            target = make_target(cfg.experiment, size)
            grid0 = initial_grid(cfg.init_policy, size, cfg.channels,
                                 rng).astype(np.uint8)
            boundary = boundary_from_name(boundary_name, cfg.channels)
            sched = (UpdateSchedule("asynchronous", cfg.async_rate,
                                    seed=cfg.schedule_seed + size)
                     if cfg.async_rate else SYNCHRONOUS)
            traj = hard_rollout_packed(cell, grid0, steps, boundary, sched)
            series = [error_t(target, g) for g in traj]
            key = f"{size}x{size}"
            report.error_series[key] = series
            report.final_accuracy[key] = pattern_accuracy(
                traj[-1], target, rgb)
            frames = plan["frames"][size]
            report.artifacts += write_frames(
                traj, frames, out, frame_format, rgb=rgb,
                prefix=f"{key}_")
            with open(out / f"error_{key}.csv", "w") as fh:
                fh.write("step,error\n")
                fh.writelines(f"{t},{e}\n" for t, e in enumerate(series))
            report.artifacts.append(f"error_{key}.csv")

    report.wall_ms = (time.perf_counter() - t0) * 1e3
    (out / "report.json").write_text(report.to_json())
    return report


def train_until_converged(name, out_dir, max_seeds=5, overrides=None,
                          on_progress=None):
    """Try successive seeds until one converges; returns (report, seed)."""
    last = None
    for seed in range(max_seeds):
        report = run_experiment(name, overrides=overrides,
                                out_dir=Path(out_dir) / f"seed{seed}",
                                seed=seed)
        if on_progress:
            on_progress(seed, report)
        if report.converged:
            return report, seed
        last = report
    return last, max_seeds - 1


def run_async_study(sync_checkpoint, async_checkpoint, out_dir,
                    grid_size=64, steps=100, rate=0.6, fault_size=(10, 10),
                    seeds=range(5), init=("bernoulli", 0.5)):
    """Roaming-fault robustness comparison of two trained models.

    Both models run under asynchronous updates while a fault region of the
    given size is disabled at a random position every step; emits per-step
    error curves (CSV + chart) per seed and a summary with the mean error
    of each model. The directional outcome is reported, never asserted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = {"sync": load_model(sync_checkpoint),
              "async": load_model(async_checkpoint)}
    channels = models["sync"].channels
    target = make_target("checkerboard", grid_size)
    boundary = BoundaryPolicy.constant(0, channels)
    curves = {label: [] for label in models}
    artifacts = []
    for label, model in models.items():
        cell = compose_cell_circuit(crystallize_model(model))
        for seed in seeds:
            rng = np.random.default_rng(1000 + seed)
            grid0 = initial_grid(init, grid_size, channels, rng).astype(np.uint8)
            fault = FaultPolicy("roaming", size=fault_size, seed=seed)
            sched = UpdateSchedule("asynchronous", rate, seed=2000 + seed)
            traj = hard_rollout_packed(cell, grid0, steps, boundary, sched,
                                       fault_fn=fault.mask_fn(grid_size, grid_size))
            curves[label].append([error_t(target, g) for g in traj])
    for label in curves:
        path = out / f"error_{label}.csv"
        with open(path, "w") as fh:
            fh.write("step," + ",".join(f"seed{s}" for s in seeds) + "\n")
            for t in range(steps + 1):
                row = [str(t)] + [str(c[t]) for c in curves[label]]
                fh.write(",".join(row) + "\n")
        artifacts.append(path.name)
    chart = _plot_error_curves(curves, out / "error_comparison.png")
    if chart:
        artifacts.append(chart)
    summary = {
        "grid_size": grid_size,
        "steps": steps,
        "rate": rate,
        "fault_size": list(fault_size),
        "seeds": list(seeds),
        "mean_error": {label: float(np.mean(c)) for label, c in curves.items()},
        "async_not_worse": float(np.mean(curves["async"]))
                           <= float(np.mean(curves["sync"])),
        "artifacts": artifacts,
    }
    (out / "async_study.json").write_text(json.dumps(summary, indent=2,
                                                     sort_keys=True))
    return summary


def _plot_error_curves(curves, path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    colors = {"sync": "tab:blue", "async": "tab:red"}
    for label, runs in curves.items():
        arr = np.asarray(runs)
        for row in arr:
            ax.plot(row, color=colors.get(label, "gray"), alpha=0.25, lw=0.8)
        ax.plot(arr.mean(axis=0), color=colors.get(label, "gray"),
                label=f"{label}-trained (mean)")
    ax.set_xlabel("step")
    ax.set_ylabel("error (sum of absolute differences)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path).name

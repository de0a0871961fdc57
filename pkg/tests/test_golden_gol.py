"""End-to-end checks against a hand-wired Game of Life model."""

import numpy as np

from gateca.ca import BoundaryPolicy, UpdateSchedule, rollout, step
from gateca.circuit import (
    census, compose_cell_circuit, crystallize_model, hard_rollout_packed,
)

from golden import gol_model
from helpers import life_rule, life_step

RNG = np.random.default_rng(2024)


def all_512_neighborhoods():
    for code in range(512):
        bits = [(code >> k) & 1 for k in range(9)]
        grid = np.zeros((3, 3, 1), dtype=np.uint8)
        grid[1, 1, 0] = bits[0]
        slots = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)]
        for b, (i, j) in zip(bits[1:], slots):
            grid[i, j, 0] = b
        yield grid, bits


def test_golden_model_implements_life_rule_exhaustively():
    model = gol_model()
    b = BoundaryPolicy.constant(0, 1)
    for grid, bits in all_512_neighborhoods():
        out, _, _ = step(grid, model, b, mode="hard")
        assert out[1, 1, 0] == life_rule(bits[0], sum(bits[1:]))


def test_golden_soft_equals_hard_exactly():
    model = gol_model()
    b = BoundaryPolicy.toroidal()
    grid = RNG.integers(0, 2, (6, 6, 1))
    soft, _, _ = step(grid.astype(float), model, b, mode="soft")
    hard, _, _ = step(grid.astype(np.uint8), model, b, mode="hard")
    assert np.array_equal(soft, hard.astype(float))


def test_golden_hard_step_matches_brute_force():
    model = gol_model()
    for _ in range(5):
        grid = RNG.integers(0, 2, (8, 9, 1)).astype(np.uint8)
        out, _, _ = step(grid, model, BoundaryPolicy.toroidal(), mode="hard")
        assert np.array_equal(out[:, :, 0], life_step(grid[:, :, 0]))
        out0, _, _ = step(grid, model, BoundaryPolicy.constant(0, 1), mode="hard")
        assert np.array_equal(out0[:, :, 0], life_step(grid[:, :, 0], toroidal=False))


def test_packed_rollout_matches_network_rollout():
    model = gol_model()
    circuits = crystallize_model(model)
    grid0 = RNG.integers(0, 2, (16, 16, 1)).astype(np.uint8)
    b = BoundaryPolicy.toroidal()
    traj_net, _ = rollout(grid0, model, 10, b, mode="hard")
    traj_packed = hard_rollout_packed(circuits, grid0, 10, b)
    for a, c in zip(traj_net, traj_packed):
        assert np.array_equal(a, c)


def test_packed_rollout_matches_with_async_schedule():
    model = gol_model()
    circuits = crystallize_model(model)
    grid0 = RNG.integers(0, 2, (9, 7, 1)).astype(np.uint8)
    b = BoundaryPolicy.constant(0, 1)
    sched = UpdateSchedule("asynchronous", 0.6, seed=42)
    traj_net, _ = rollout(grid0, model, 8, b, sched, mode="hard")
    traj_packed = hard_rollout_packed(circuits, grid0, 8, b, sched)
    for a, c in zip(traj_net, traj_packed):
        assert np.array_equal(a, c)


def test_glider_translates_one_cell_per_four_steps():
    model = gol_model()
    cell = compose_cell_circuit(crystallize_model(model))
    grid0 = np.zeros((32, 32, 1), dtype=np.uint8)
    # standard glider, travels (+1, +1) every 4 generations
    for i, j in [(1, 2), (2, 3), (3, 1), (3, 2), (3, 3)]:
        grid0[i, j, 0] = 1
    traj = hard_rollout_packed(cell, grid0, 8, BoundaryPolicy.toroidal())
    assert np.array_equal(traj[4], np.roll(grid0, (1, 1), axis=(0, 1)))
    assert np.array_equal(traj[8], np.roll(grid0, (2, 2), axis=(0, 1)))


def test_golden_census_counts_pass_throughs():
    model = gol_model()
    circuits = crystallize_model(model)
    cell = compose_cell_circuit(circuits)
    c = census(cell)
    assert c.total == cell.node_count
    # the copy kernel contributes 9 pass-through gates, the update net 31
    assert c.active == c.total - 9 - 31
    assert sum(c.histogram) == c.total

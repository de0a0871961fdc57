"""Shared test oracles, kept independent of the library code paths they check."""

import numpy as np


def central_diff(f, x, h=1e-6):
    """Central finite difference df/dx at scalar x."""
    return (f(x + h) - f(x - h)) / (2 * h)


def fd_gradient(loss_fn, params, coords, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. selected coordinates.

    params is a list of mutable numpy arrays that loss_fn reads; coords is a
    list of (array_index, flat_index) pairs. Restores the params afterwards.
    """
    grads = []
    for ai, fi in coords:
        flat = params[ai].reshape(-1)
        orig = flat[fi]
        flat[fi] = orig + h
        up = loss_fn()
        flat[fi] = orig - h
        dn = loss_fn()
        flat[fi] = orig
        grads.append((up - dn) / (2 * h))
    return np.array(grads)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def life_rule(center, live_neighbors):
    """Conway's rule: survive on 2-3, birth on exactly 3."""
    if center:
        return 1 if live_neighbors in (2, 3) else 0
    return 1 if live_neighbors == 3 else 0


def life_step(grid, toroidal=True):
    """Brute-force Game of Life step on a 2-d 0/1 array."""
    H, W = grid.shape
    out = np.zeros_like(grid)
    for i in range(H):
        for j in range(W):
            n = 0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    ii, jj = i + di, j + dj
                    if toroidal:
                        n += grid[ii % H, jj % W]
                    elif 0 <= ii < H and 0 <= jj < W:
                        n += grid[ii, jj]
            out[i, j] = life_rule(grid[i, j], n)
    return out


def naive_circuit_eval(circuit, bits):
    """Evaluate a HardCircuit on one python list of input bits, gate by gate."""
    from gateca.gates import TRUTH

    values = list(int(b) for b in bits)
    assert len(values) == circuit.input_width
    for op, i0, i1 in zip(circuit.ops, circuit.in0, circuit.in1):
        values.append(int(TRUTH[op, 2 * values[i0] + values[i1]]))
    return [values[o] for o in circuit.outputs]

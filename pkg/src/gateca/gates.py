"""The 16 two-input logic gates and their continuous relaxations.

Every gate's relaxation is bilinear in its inputs, so each one is stored as
four coefficients (c0, ca, cb, cab) with

    f(a, b) = c0 + ca*a + cb*b + cab*a*b

which agrees with the boolean truth table on {0,1}^2 and maps [0,1]^2 into
[0,1]. A node under training holds 16 logits; its output is the
softmax-weighted mixture of all 16 relaxations, which collapses to a single
bilinear form with probability-averaged coefficients. All derivatives below
are exact closed forms.
"""

import numpy as np

N_GATES = 16

# Opcode order is a serialization contract; never reorder.
FALSE, AND, A_AND_NOT_B, A, NOT_A_AND_B, B, XOR, OR = range(8)
NOR, XNOR, NOT_B, A_OR_NOT_B, NOT_A, NOT_A_OR_B, NAND, TRUE = range(8, 16)

GATE_NAMES = (
    "FALSE", "AND", "A AND (NOT B)", "A", "(NOT A) AND B", "B", "XOR", "OR",
    "NOR", "XNOR", "NOT B", "A OR (NOT B)", "NOT A", "(NOT A) OR B", "NAND",
    "TRUE",
)

PASS_THROUGH_OPS = (A, B)
CONSTANT_OPS = (FALSE, TRUE)

# Rows: opcode. Columns: 1, a, b, a*b.
COEFFS = np.array([
    [0,  0,  0,  0],   # FALSE
    [0,  0,  0,  1],   # AND
    [0,  1,  0, -1],   # A AND (NOT B)
    [0,  1,  0,  0],   # A
    [0,  0,  1, -1],   # (NOT A) AND B
    [0,  0,  1,  0],   # B
    [0,  1,  1, -2],   # XOR
    [0,  1,  1, -1],   # OR
    [1, -1, -1,  1],   # NOR
    [1, -1, -1,  2],   # XNOR
    [1,  0, -1,  0],   # NOT B
    [1,  0, -1,  1],   # A OR (NOT B)
    [1, -1,  0,  0],   # NOT A
    [1, -1,  0,  1],   # (NOT A) OR B
    [1,  0,  0, -1],   # NAND
    [1,  0,  0,  0],   # TRUE
], dtype=np.float64)

# Truth tables derived from the coefficients: TRUTH[op, 2*a + b].
_corners = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float64)
TRUTH = np.rint(
    COEFFS[:, 0][:, None]
    + COEFFS[:, 1][:, None] * _corners[:, 0]
    + COEFFS[:, 2][:, None] * _corners[:, 1]
    + COEFFS[:, 3][:, None] * (_corners[:, 0] * _corners[:, 1])
).astype(np.uint8)
del _corners


class GateDistribution:
    """Learnable categorical distribution over the 16 gate opcodes."""

    __slots__ = ("logits",)

    def __init__(self, logits):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (N_GATES,):
            raise ValueError(f"expected 16 logits, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        self.logits = logits

    def probs(self, temperature=1.0):
        return softmax(self.logits, temperature)


def softmax(logits, temperature=1.0):
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def eval_hard(op, a, b):
    """Boolean truth-table value of `op` on bits a, b."""
    return int(TRUTH[op, 2 * int(a) + int(b)])


def eval_soft(op, a, b):
    """Continuous relaxation of `op` at real-valued a, b in [0, 1]."""
    c0, ca, cb, cab = COEFFS[op]
    return float(c0 + ca * a + cb * b + cab * a * b)


def eval_soft_grad(op, a, b):
    """Exact partials (df/da, df/db) of the relaxation of `op`."""
    _, ca, cb, cab = COEFFS[op]
    return float(ca + cab * b), float(cb + cab * a)


def mixture_forward(dist, a, b, temperature=1.0):
    """Expected relaxation value under the softmax of `dist.logits`."""
    p = dist.probs(temperature)
    w = p @ COEFFS
    return float(w[0] + w[1] * a + w[2] * b + w[3] * a * b)


def mixture_backward(dist, a, b, upstream, temperature=1.0):
    """Gradients of upstream * mixture_forward.

    Returns (dlogits, da, db). dlogits goes through the softmax Jacobian,
    so its entries always sum to zero; da/db are the probability-weighted
    sums of the per-gate partials.
    """
    p = dist.probs(temperature)
    values = COEFFS[:, 0] + COEFFS[:, 1] * a + COEFFS[:, 2] * b + COEFFS[:, 3] * a * b
    dvalues = upstream * values
    dlogits = p * (dvalues - p @ dvalues) / temperature
    w = p @ COEFFS
    da = upstream * (w[1] + w[3] * b)
    db = upstream * (w[2] + w[3] * a)
    return dlogits, float(da), float(db)

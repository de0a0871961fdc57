"""gateca: cellular automata whose update rule is a learnable logic circuit.

Training runs on continuous gate relaxations with full reverse-mode
gradients; inference crystallizes the learned rule into a discrete circuit
that can be pruned, exported, and simulated bit-packed.
"""

__version__ = "0.1.0"


def _tune_allocator():
    # Training allocates and frees many ~100KB-1MB tape arrays per step;
    # glibc returns blocks that size to the OS on free, which makes every
    # step re-fault its pages. Raising the mmap threshold keeps them on the
    # heap. Best effort: silently skipped where unavailable.
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 64 * 1024 * 1024)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()


class GatecaError(Exception):
    """Base class for errors raised by this package."""


class CheckpointError(GatecaError):
    """Checkpoint file is missing, corrupt, or has an unsupported version."""


class TrainingDiverged(GatecaError):
    """Training produced a non-finite loss."""

"""Deterministic fan-out of one master seed into per-stage child seeds.

Every randomized stage of the pipeline draws its generator from
``child_seed(master, label)`` with a stable, documented label, so a single
64-bit master seed pins the whole run bit-for-bit while keeping the stages
statistically independent of each other.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One step of the splitmix64 generator.

    Returns ``(next_state, output)``; both are 64-bit unsigned ints.
    """
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, (z ^ (z >> 31)) & _MASK


def child_seed(master: int, label: str) -> int:
    """Derive a child seed from ``master`` and a purpose label.

    The label is folded into the splitmix64 stream byte by byte, then one
    extra mixing step whitens the result. Distinct labels give unrelated
    streams; the map is pure, so the same (master, label) pair always
    yields the same child.
    """
    state = master & _MASK
    for byte in label.encode("utf-8"):
        state, out = splitmix64(state ^ byte)
        state ^= out
    _, out = splitmix64(state)
    return out

"""Process-level performance knobs.

The training loop allocates and frees multi-megabyte scratch arrays
(im2col buffers, augmented batches) every update.  With glibc's default
mmap threshold those round-trip through mmap/munmap and the page faults
roughly double the update cost, so the CLI raises the threshold once at
startup.  Calling this is optional and never required for correctness.
"""

from __future__ import annotations

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def tune_allocator() -> bool:
    """Keep large scratch buffers on the heap (Linux/glibc only).

    Returns True when the knobs were applied; safely no-ops elsewhere.
    """
    global _done
    if _done:
        return True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 28)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 28)
        _done = True
        return True
    except (OSError, AttributeError):
        return False

"""Named sub-seed derivation and deterministic torch setup."""
from __future__ import annotations

import hashlib


def derive_seed(base: int, *keys: object) -> int:
    """Hash ``base`` and ``keys`` into an independent 63-bit seed.

    Changing one key leaves every other key's stream untouched, which is what
    lets components be re-seeded independently.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def set_deterministic(enabled: bool = True, threads: int | None = 1) -> None:
    import torch

    torch.use_deterministic_algorithms(enabled)
    if threads is not None:
        torch.set_num_threads(threads)

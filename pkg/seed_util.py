import hashlib
from typing import Iterable

SEED_MASK = (1 << 63) - 1


def derive_seed(master_seed: int, *tags: object) -> int:
    """
    Seed for one component or item: the first 8 bytes (little endian) of
    blake2b("master:tag1:tag2..."), masked to 63 bits.

    Args:
        master_seed (int): Run-wide seed.
        *tags: Component name and/or item indices.

    Returns:
        int: Non-negative seed for numpy.random.default_rng.
    """
    text = ":".join(str(part) for part in (master_seed,) + tags)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & SEED_MASK


def derive_seeds(master_seed: int, tag: str, indices: Iterable[int]) -> list:
    return [derive_seed(master_seed, tag, i) for i in indices]

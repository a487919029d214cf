import hashlib

_MASK = (1 << 64) - 1


def seeded_hash(seed: int, text: str) -> int:
    """Stable 64-bit keyed hash of ``text`` (BLAKE2b, key = 64-bit seed)."""
    key = (int(seed) & _MASK).to_bytes(8, "little")
    return int.from_bytes(
        hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=key).digest(), "little")


def sub_seed(seed: int, name: str) -> int:
    """Named child seed, e.g. ``sub_seed(seed, "split")``."""
    return seeded_hash(seed, f"sub-seed:{name}")

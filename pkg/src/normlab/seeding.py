"""Seed fan-out.

A component's seed is the first 8 bytes (little-endian) of
``sha256(f"{global_seed}/{component}")``, reduced to 63 bits. Adding a new
component never shifts the stream of an existing one.
"""

import hashlib


def derive_seed(global_seed: int, component: str) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}/{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)

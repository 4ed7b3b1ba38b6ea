"""Seed splitting.

Every random draw in a run descends from one master seed. ``derive_seed``
hashes the master seed together with a path of labels (``"cekm", "pv", 3``)
with BLAKE2b and keeps the first eight bytes, so a sub-experiment can be
re-run on its own and gets the same stream it had inside the full run.
"""
import hashlib

import numpy as np


def derive_seed(master: int, *labels: object) -> int:
    key = "/".join([str(int(master))] + [str(label) for label in labels])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(master: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))

from __future__ import annotations

import contextlib
import hashlib
import json
from typing import Any

import torch


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch RNG state without leaking it."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % (2**63))
        yield


def derive_seed(*parts: Any) -> int:
    """Stable 32-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**32)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(snapshot: Any) -> str:
    return hashlib.sha256(canonical_json(snapshot).encode()).hexdigest()[:16]


def param_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

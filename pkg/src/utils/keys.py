import hashlib
import json
import re
from functools import lru_cache
from pathlib import Path
from typing import Any

from pydantic import BaseModel

_DIGITS = re.compile(r"(\d+)")


@lru_cache(maxsize=4096)
def natural_key(bus_id: str) -> tuple[Any, ...]:
    """Sort key that orders "9" < "9r" < "10" < "150" < "150r"."""
    parts = _DIGITS.split(bus_id)
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in parts if p != "")


def natural_sorted(bus_ids) -> list[str]:
    return sorted(bus_ids, key=natural_key)


def canonical_json(payload: Any) -> str:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_fingerprint(*payloads: Any) -> str:
    """First 16 hex chars of SHA-256 over the canonical JSON of the payloads."""
    digest = hashlib.sha256()
    for payload in payloads:
        digest.update(canonical_json(payload).encode())
        digest.update(b"\x00")
    return digest.hexdigest()[:16]


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()

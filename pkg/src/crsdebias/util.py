from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass


@dataclass(frozen=True)
class NoValue:
    """Marks a quantity that cannot be computed ("no data", "degenerate", "undefined")."""

    reason: str

    def __bool__(self) -> bool:
        return False

    def __str__(self) -> str:
        return self.reason


def is_value(x) -> bool:
    return not isinstance(x, NoValue) and x is not None


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary JSON-able parts."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1

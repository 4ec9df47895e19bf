"""Locations shared by the node daemon and the key service."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional


def ctr_home() -> Path:
    return Path(os.environ.get("CTR_HOME", Path.home() / ".ctr"))


def platform_key_path(explicit: Optional[Path] = None) -> Path:
    """The simulated attestation key; nodes and the key service must share it."""
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get("CTR_PLATFORM_KEY")
    return Path(env) if env else ctr_home() / "platform.key"

"""Universal 10-20 channel registry.

The label list ships as ``channels.txt`` next to this module (alphabetical,
one label per line); a label's line number is its stable registry index.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .errors import RegistryError


@lru_cache(maxsize=1)
def labels() -> tuple[str, ...]:
    text = resources.files(__package__).joinpath("channels.txt").read_text("ascii")
    return tuple(line.strip() for line in text.splitlines() if line.strip())


@lru_cache(maxsize=1)
def _index() -> dict[str, int]:
    return {name: i for i, name in enumerate(labels())}


def size() -> int:
    return len(labels())


@dataclass(frozen=True)
class ChannelLabel:
    name: str
    registry_index: int


def lookup(name: str) -> ChannelLabel:
    canon = name.strip().upper()
    try:
        return ChannelLabel(canon, _index()[canon])
    except KeyError:
        raise RegistryError(f"channel label {name!r} is not in the 10-20 registry") from None


def lookup_all(names) -> list[ChannelLabel]:
    out = [lookup(n) for n in names]
    seen = set()
    for ch in out:
        if ch.name in seen:
            raise RegistryError(f"duplicate channel label {ch.name!r}")
        seen.add(ch.name)
    return out

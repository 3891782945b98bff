"""Hormone index shared by every module and file format."""

from enum import IntEnum

# Days per simulated individual and the observation window (first two cycles).
T_DAYS = 105
OBS_WINDOW = (1, 70)


class Hormone(IntEnum):
    E = 0
    P = 1
    Ih = 2
    FSH = 3
    LH = 4


HORMONES = tuple(Hormone)
N_HORMONES = len(HORMONES)
HORMONE_NAMES = tuple(h.name for h in HORMONES)


def parse_hormone(name):
    """Look up a hormone by name (case-insensitive) or index."""
    if isinstance(name, (int, Hormone)):
        return Hormone(int(name))
    for h in HORMONES:
        if h.name.lower() == str(name).lower():
            return h
    raise ValueError(f"unknown hormone {name!r}; expected one of {HORMONE_NAMES}")

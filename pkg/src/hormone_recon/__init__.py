"""Reconstruction and forecasting of menstrual-cycle hormone trajectories from sparse measurements."""

__version__ = "0.1.0"

from .hormones import HORMONE_NAMES, Hormone, T_DAYS, OBS_WINDOW  # noqa: E402,F401

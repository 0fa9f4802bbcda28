"""Proportional-fair UA/RA and power control for backhaul-limited small-cell clusters."""

__version__ = "0.1.0"

"""Reditus - hitting-time statistics for shifts, expanding maps and GDMS limit sets."""

from .cli import main

__all__ = ["main"]

"""Mixed-autonomy highway simulation and altruistic MARL laboratory."""

__version__ = "0.1.0"

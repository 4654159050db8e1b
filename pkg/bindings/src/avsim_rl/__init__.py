"""RL bindings for the avsim traffic simulator."""

__version__ = "0.1.0"

from .env import Box, TrafficEnv

__all__ = ["Box", "TrafficEnv", "__version__"]

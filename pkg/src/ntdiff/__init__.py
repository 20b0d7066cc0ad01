"""Tree-structured multi-horizon diffusion forecasting of wildfire risk maps."""

__version__ = "0.1.0"

"""P-Q flexibility areas for LV grids and a robust conic OPF for the MV feeder above them."""

__version__ = "0.1.0"

"""Two-stage attention-MIL fusion of paired H&E and IHC slide features."""

__version__ = "0.1.0"

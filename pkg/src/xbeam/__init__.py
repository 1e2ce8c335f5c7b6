"""Beam-management link simulator with a learned hybrid-array codebook generator."""

__version__ = "0.1.0"

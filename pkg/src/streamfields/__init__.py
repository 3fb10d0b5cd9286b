"""Decomposed dynamic scene fields with channel-streamed feature grids.

Subpackages cover the full pipeline: an autodiff engine (grad), windowed
feature grids (feature_grid), the five scene fields (fields), volume
rendering (render), synthetic ground-truth scenes and metrics (scenes),
optimization (train), the packed stream codec (stream_io), a progressive
streaming server (server) and the command line front end (cli).
"""

__version__ = "0.1.0"

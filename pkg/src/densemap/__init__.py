"""Dense mapping with TSDF submaps, loop-closure re-posing and covariance-gated fusion."""

__version__ = "0.1.0"

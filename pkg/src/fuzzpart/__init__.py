"""Call-graph task partitioning for parallel fuzzing campaigns."""

__version__ = "0.1.0"

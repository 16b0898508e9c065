"""Physics-guided fair neighbour sampling for stream-temperature graphs, on synthetic basins."""

__version__ = "0.1.0"

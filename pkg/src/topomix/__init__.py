"""Learning communication topologies for cooperative agent teams with
monotonic value mixing."""

__version__ = "0.1.0"

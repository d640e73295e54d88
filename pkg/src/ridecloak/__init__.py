"""Privacy-preserving ridesharing matching over encrypted trip data.

Two services share one encryption core: a direct service matching a rider
to a single driver via Bloom-filter trip summaries, and a transfer service
routing a rider across several drivers via an encrypted transfer graph.
"""

__version__ = "0.1.0"

"""Ground -> drone -> satellite retrieval pipeline on synthetic landmark data.

The package trains tiny affine encoders for two cross-view spaces
(ground-drone and satellite-drone), connects them with a random-walk
re-ranker over a drone+satellite similarity graph, and evaluates retrieval
with CMC@K and mAP. Everything is seeded and deterministic; all gradients
are analytic and checked against finite differences.
"""

__version__ = "0.1.0"

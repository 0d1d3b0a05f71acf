"""Multi-scenario click-through-rate modeling lab.

Builds and evaluates CTR models over heterogeneous traffic scenarios: features
embedded in parallel global and scenario-specific subspaces, an auxiliary
network for shared knowledge, per-scenario branch networks whose samples only
ever update their own branch, and a similarity-gated mutual unit that lets
branches borrow from similar scenarios.
"""

__version__ = "0.1.0"

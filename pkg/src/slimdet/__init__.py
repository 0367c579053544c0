"""slimdet: a compression toolkit for small SSD-style detection networks.

The package is organized around an immutable computation-graph IR
(:mod:`slimdet.graph`), a trustworthy reference executor
(:mod:`slimdet.executor`), structural compression passes
(:mod:`slimdet.transforms`, :mod:`slimdet.pipeline`), a MAC/parameter cost
model (:mod:`slimdet.cost`), detection-head utilities
(:mod:`slimdet.detection`), ignore-region-aware evaluation
(:mod:`slimdet.evaluation`), deterministic model builders
(:mod:`slimdet.zoo`), and the brute-force oracles that certify all of the
above (:mod:`slimdet.oracles`).
"""

__version__ = "0.1.0"

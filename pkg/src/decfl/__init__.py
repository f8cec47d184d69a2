"""Deterministic simulator for fully decentralized federated learning.

Nodes sit on a static communication graph, train local MLPs on non-IID
data slices and combine parameters with one of several aggregation
strategies (neighborhood averaging, distance-damped updates, consensus
rules, classic federated averaging). Every run is reproducible from a
single master seed.
"""

__version__ = "0.1.0"

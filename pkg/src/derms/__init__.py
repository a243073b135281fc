"""Primal-dual DER management with adaptive step-size tuning.

The package simulates a radial distribution feeder driven by a coordinator and
per-device local controllers, and ships an independent solver used to check
where the controllers should end up.
"""

__version__ = "0.1.0"

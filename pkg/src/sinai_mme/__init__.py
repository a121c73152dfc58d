"""Measure of maximal entropy diagnostics for finite-horizon Sinai billiards.

Modules
-------
billiard
    Tables, the collision map, derivatives, horizon checks.
symbolic
    Itinerary counting, h_* and s_0 estimates.
pressure
    Partition sums Q_n(t), P_*(t), the root h_top and the sufficient conditions.
curves
    Stable-curve families under T^{-n}, growth lemmas and SSP diagnostics.
ulam
    Twisted Ulam transfer operators and equilibrium measure estimates.
reports
    Experiment specs, cached task graph and report files (driven by ``cli``).
"""

__version__ = "0.1.0"

from .billiard import BilliardTable, PhasePoint, billiard_map, billiard_map_inverse, build_table  # noqa: E402

__all__ = ["__version__", "BilliardTable", "PhasePoint", "billiard_map", "billiard_map_inverse", "build_table"]

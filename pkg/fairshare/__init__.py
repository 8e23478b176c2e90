"""
fairshare
---------
Proportional, modified proportional and balanced fairness on polyhedral
capacity regions: allocation solvers, population-process simulation,
stationary laws, fluid trajectories and numerical verification.
"""

__version__ = "1.0.0"

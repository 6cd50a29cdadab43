"""Eco-driving impact assessment toolkit for signalized intersections.

Scenario generation, discrete-time microsimulation with IDM car following,
per-partition PPO policy training, surrogate emission models, constrained
zero-shot policy selection, and downstream analytics (effectiveness,
correlations, Pareto, safety).
"""

__version__ = "0.1.0"

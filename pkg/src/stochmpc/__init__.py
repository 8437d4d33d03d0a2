"""Chance-constrained stochastic NMPC for a kino-dynamic legged-robot model.

Subpackage map:

- numerics: forward-mode AD entry points, normal quantile, Riccati solver
- model: robot description, kinematics, momentum matrix, dynamics
- constraints: path-constraint residuals and the tracking cost
- chance: covariance propagation, risk allocation, constraint back-offs
- qpsolver: sparse ADMM quadratic-program solver with active-set polish
- ocp: optimal-control problem assembly and the real-time SQP iteration
- refgen: gait plans, stepping stones, reference trajectories
- sim: closed-loop rollouts and the Monte-Carlo benchmark
- cli: command-line front end (bench / rollout / calibrate / validate)
"""

from .backend import backend_name

__version__ = "0.1.0"
__all__ = ["backend_name", "__version__"]

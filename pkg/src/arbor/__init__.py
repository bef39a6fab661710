"""Factor-graph state estimation for mobile robotics, built around a problem tree.

Front-end processors turn timestamped sensor captures into tree nodes
(frames, captures, features, factors, landmarks); the tree is bridged to a
built-in sparse Levenberg-Marquardt solver.  Motion sensors are handled by a
generic pre-integration pipeline that also exposes their calibration
parameters to the estimator.
"""

__version__ = "0.1.0"

"""Monocular(-inertial) 2D-Gaussian-splatting SLAM.

Subsystems:
  geometry     rotations, rigid/similarity transforms, pinhole projection
  splat        differentiable tile rasterizer (forward / full / sampled backward)
  scores       per-splat contribution/error scoring and map management
  map_engine   online mapping loop (densify, train, pose refinement)
  frontend     dense bundle adjustment and correspondence providers
  vi_graph     IMU preintegration and visual-inertial factor graph
  loop         render-based loop detection and map correction
  dyn_eraser   heuristic dynamic-object masking
  harness      synthetic data, metrics, pipeline orchestration, CLI
"""

__version__ = "0.1.0"

"""Desk-scale multi-agent collaborative perception sandbox.

Synthetic LiDAR scenes, a self-contained float64 autodiff core, a teacher /
student training pipeline with diffusion-based feature restoration and gated
fusion, seven point-cloud corruption operators, and a rotated-box AP /
robustness evaluation protocol. Everything is deterministic given a config
and its seeds.
"""

__version__ = "0.1.0"

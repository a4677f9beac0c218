"""relightlab: a desk-scale lab for illumination-robust offline fine-tuning.

Pipeline: train a pixel SAC agent online under one light with scripted expert
interventions; procedurally relight the recorded trajectories (actions,
rewards, terminations preserved); fine-tune offline with a stratified
retention sampler and frozen-source anchors; evaluate across a parametric
illumination-shift gradient.
"""

from . import config, datasets, harness, learners, litworld, nets, numerics, replay

__all__ = ["config", "datasets", "harness", "learners", "litworld", "nets",
           "numerics", "replay"]
__version__ = "0.1.0"

"""mrenet: desk-scale low-shot volumetric segmentation with multimodal prototypes.

The package is organised bottom-up:

- ``tensor``     reverse-mode autodiff over numpy arrays (the only "framework")
- ``params``     named parameter store, Adam state, binary checkpoints
- ``backbone``   modified 3D U-Net feature extractor
- ``embedding``  attention/multi-scale embedding head (coords + SE + ASPP)
- ``head``       multimodal prototype classifier and posteriors
- ``model``      glue: config -> full network forward
- ``training``   loss, online hard example mining, sampling, augmentation, loop
- ``inference``  sliding-window full-volume prediction, Dice / HD95 metrics
- ``synthdata``  deterministic synthetic cohort generator + volume file format
- ``experiments`` experiment runner and ablation grids
- ``cli``        command-line entry points
"""

from mrenet.tensor import Tensor, ConfigError, no_grad

__all__ = ["Tensor", "ConfigError", "no_grad"]
__version__ = "0.1.0"

"""Dense image descriptors from stacked dilated convolutions.

Modules: :mod:`numerics` (primitive differentiable ops), :mod:`arch`
(network zoo and calculators), :mod:`training` (triplet loss, Adam,
checkpoints), :mod:`data` (file formats, sampling, synthetic scenes),
:mod:`matching` (dense extraction and winner-takes-all matching),
:mod:`evaluation` (accuracy, ROC, robustness) and :mod:`cli`.
"""

__version__ = "0.1.0"

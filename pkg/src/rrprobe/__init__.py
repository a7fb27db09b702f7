"""Random Rounding probes for floating-point pipelines.

Core pieces: :class:`RRContext` (stochastic arithmetic), significant-bit
estimation, segmentation agreement metrics, a small U-Net engine, a
gradient-descent registration baseline and a sampling harness.
"""

from .mca import Mode, RRContext, RRScalar, derive_seed, inexact, perturb
from .significance import SampleSet, mean_sigbits, significant_bits
from .segmetrics import LabelVolume, dice, entropy_map, min_pairwise_dice
from .stats import bonferroni, paired_t_test

__all__ = [
    "LabelVolume",
    "Mode",
    "RRContext",
    "RRScalar",
    "SampleSet",
    "bonferroni",
    "derive_seed",
    "dice",
    "entropy_map",
    "inexact",
    "mean_sigbits",
    "min_pairwise_dice",
    "paired_t_test",
    "perturb",
    "significant_bits",
]

__version__ = "0.1.0"

"""Room acoustics simulation with a recursive delay network.

The pipeline: load a polygonal scene, discretize its boundary into patches,
compute the patch-to-patch energy transfer kernel, design a lossless feedback
matrix from it, trace injection/detection filters and an image-source bypass,
then render an impulse response and evaluate room-acoustic metrics on it.
"""

__version__ = "0.1.0"

BAND_CENTERS_HZ = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0, 16000.0)
N_BANDS = len(BAND_CENTERS_HZ)
# Index of the 1 kHz band, used whenever a broadband scalar stands in for a spectrum.
BROADBAND_BAND = 3

DEFAULT_FS = 48000
DEFAULT_SPEED_OF_SOUND = 343.0
DEFAULT_SAMPLE_SPACING = 0.5
DEFAULT_N_RAYS = 100_000
GEOM_EPS = 1e-6


def stage_rng(seed: int, stage: int):
    """Independent generator for one pipeline stage of a seeded run.

    Every random draw in the package goes through this, so a single seed
    pins the whole pipeline while stages stay decoupled (changing the ray
    count does not shift matrix restarts, etc.).
    """
    import numpy as np

    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stage,)))

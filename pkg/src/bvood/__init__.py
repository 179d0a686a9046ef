"""Out-of-distribution detection from the latent space of beta-VAEs.

Pipeline: generate factor partitions (:mod:`bvood.factorgen`), train a grid of
beta-VAEs (:mod:`bvood.vae`, :mod:`bvood.selection`), pick the informative
latent and calibrate its KL threshold, then run a chain of single-latent
detectors (:mod:`bvood.detector`).
"""

__version__ = "0.1.0"

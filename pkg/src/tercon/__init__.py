"""Latent territorial-control estimation from gridded conflict event counts.

The package turns point-located terror and conventional-war events into
per-cell annual count sequences, fits discrete-state hidden Markov models
with independent Poisson emissions to them, and optionally couples the
per-cell chains through a within-year Potts interaction on the cell
neighbor graph. A theory-driven simulator and an evaluation harness close
the loop for validation when no labeled data exists.
"""

__version__ = "0.1.0"

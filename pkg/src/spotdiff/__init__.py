"""Histology-conditioned masked diffusion over gene-expression vectors.

Desk-scale pipeline: visibility schedules and the Bernoulli mask process,
a frozen masked-autoencoder transformer retrofitted with identity-initialized
conditioning, a warm-start training curriculum, a synthetic paired-data
generator with a closed-form oracle, and an evaluation/ablation harness.
"""

__version__ = "0.1.0"

from .schedule import VisibilitySchedule, build_schedule, log_gene_zeta, subsample_schedule

__all__ = [
    "VisibilitySchedule",
    "build_schedule",
    "log_gene_zeta",
    "subsample_schedule",
    "__version__",
]

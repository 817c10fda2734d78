"""Non-negative contrastive learning with Bayesian feature gating.

Dense float64 autodiff core, synthetic latent-class generator, model and
objective, trainer, evaluation metrics and numerical checks of the method's
theoretical claims.
"""

__version__ = "0.1.0"

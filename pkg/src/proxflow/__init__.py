"""Probability flows with a proximal attention layer.

A token ensemble is transported by alternating a learned drift potential
with a prox-attention layer whose kernel performs normalized heat
smoothing under an L1 shrinkage prior. The package provides forward
sample generation, backward maximum-likelihood training with log-density
tracking, the matching loss (likelihood, transport energy, optimality
residual), benchmark and inverse-problem datasets, and an analysis suite
that measures the flow's convergence against closed-form decay bounds.
"""

from .analysis import (GaussianPair, LaplacePair, TheoryParams,
                       directional_consistency, gaussian_fit_kl, kde_2d,
                       kl_upper_bound, l1_moment, mmd, sample_brwp,
                       second_moment)
from .datasets import (GaussianPrior, LaplacePrior, LinearGaussianProblem,
                       StandardNormalBase, linear_gaussian_problem,
                       lorenz_observe, sample_benchmark)
from .dynamics import (TimeGrid, Trajectory, backward_integrate, generate,
                       hjb_residual)
from .layer import (BaselineAttention, RwpoParams, TokenBatch,
                    attention_weights, baseline_attention_step, kernel_u,
                    rwpo_kernel_1d, soft_threshold,
                    sparse_attention_divergence, sparse_attention_step)
from .objective import LossBreakdown, LossWeights, bayesian_loss, nll_term
from .potential import DriftPotential, load_checkpoint, save_checkpoint
from .training import ConditionalProblem, TrainConfig, TrainResult, train

__version__ = "0.1.0"

"""Unbiased, low-variance gradient estimation for factorial Bernoulli latents.

The core is a family of score-function estimators that only ever evaluate
the objective at discrete points: plain REINFORCE with a baseline, a
two-sample leave-one-out baseline, the antithetic-pair estimator with the
raw uniform coefficient (arm), its conditioned variant with the pair
randomness integrated out (disarm), an interpolation between the coupled
and independent pairings, and multi-sample variants (vimco and a local
pairwise estimator). An exact enumeration oracle, a minimal hand-rolled
network stack, Bernoulli VAE objectives and an experiment harness round
out the package.
"""

from .bernoulli import (
    AntitheticPair,
    EnumerationBudgetError,
    conditional_score_expectation,
    enumerate_exact_gradient,
    log_prob,
    sample_antithetic,
    sample_bernoulli,
)
from .estimators import (
    GradientEstimate,
    InterpolationConfig,
    ObjectiveFunction,
    arm,
    disarm,
    interpolated,
    reinforce_baseline,
    reinforce_loo,
)
from .multisample import (
    MultiSampleBatch,
    disarm_multisample,
    draw_multisample_batch,
    multi_sample_bound,
    vimco,
)
from .nn import AdamState, DenseNetwork, SgdState, optimizer_step
from .rng import make_rng, split_rng
from .vae import (
    BernoulliVAE,
    HierarchicalVAE,
    elbo_step,
    elbo_value,
    hierarchical_disarm_step,
    multisample_step,
    toy_exact_gradient,
    toy_value,
)

__version__ = "0.1.0"

__all__ = [
    "AntitheticPair",
    "EnumerationBudgetError",
    "conditional_score_expectation",
    "enumerate_exact_gradient",
    "log_prob",
    "sample_antithetic",
    "sample_bernoulli",
    "GradientEstimate",
    "InterpolationConfig",
    "ObjectiveFunction",
    "arm",
    "disarm",
    "interpolated",
    "reinforce_baseline",
    "reinforce_loo",
    "MultiSampleBatch",
    "disarm_multisample",
    "draw_multisample_batch",
    "multi_sample_bound",
    "vimco",
    "AdamState",
    "DenseNetwork",
    "SgdState",
    "optimizer_step",
    "make_rng",
    "split_rng",
    "BernoulliVAE",
    "HierarchicalVAE",
    "elbo_step",
    "elbo_value",
    "hierarchical_disarm_step",
    "multisample_step",
    "toy_exact_gradient",
    "toy_value",
    "__version__",
]

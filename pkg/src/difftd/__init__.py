"""Differential temporal-difference learning for controlled SDEs."""

from .errors import ConfigError, InstabilityError, InvalidArgumentError, NumericError
from .sde_core import (ControlledSde, GaussianPolicy, LinearGaussianPolicy, LinearSde, NoiseSpec, Rollout,
                       Scaling, Transition, TransitionBatch, discounted_return, em_step, linear_quadratic,
                       ornstein_uhlenbeck, perturb_state, rollout, scalar_lqr, simulate)
from .coef_estimators import (CoefEstimate, estimate_coefficients, estimate_diffusion_sq, estimate_drift,
                              ito_cross_moment)
from .value_models import MlpValue, QuadraticValue, ValueModel, load_checkpoint, save_checkpoint
from .td_engine import (ContractionCertificate, LossTerms, Method, TdConfig, beta_dtd_loss,
                        certified_pair_sampler, contraction_factor, dtd_terms, empirical_contraction_check,
                        loss_and_grad, naive_dtd_terms, squared_loss, td_terms)
from .policy_eval import (Buffer, EvalReport, TrainConfig, actor_critic, actor_critic_step, evaluate_policy,
                          init_actor_critic)
from .oracles import LinearExactSampler, LqrSpec, QuadraticSolution, lqr_value, mc_value, optimal_gain_scan

__version__ = "0.1.0"

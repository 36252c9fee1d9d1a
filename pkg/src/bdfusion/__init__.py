"""Bayesian data fusion for unmeasured confounding in mediation-type g-formula estimands."""

from .corrections import CorrectionResult, dg_correction, ix_correction, naive_rnde
from .errors import (BDFError, BoundaryError, CellSparsityError, IdentificationError, PriorError,
                     SamplerError, SeparationError, SingularInformationError, StructuralError)
from .estimands import (EstimandResult, bdf_cf_estimate, bdf_sim_estimate, dirichlet_sample,
                        estimate_ace_tvc, estimate_cde, estimate_nde, estimate_nie, estimate_rnde,
                        estimate_rnie, estimate_total_effect, rnde_closed_form)
from .mle import MleFit, fit_external_models, fit_logistic_mle
from .model import CovariatePatternTable, Dataset, ModelSpec, ParamVector, Regime
from .posterior import (PosteriorDraws, SamplerConfig, effective_sample_size, gelman_rubin, grad_log_posterior,
                        log_marginal_likelihood, log_posterior, sample_posterior)
from .prior import GaussianPrior, build_prior
from .simulation import (DeltaFlags, GenerativeCoefficients, ScenarioConfig, StudyReport,
                         generate_dataset, run_study, true_rnde)

__version__ = "0.1.0"

"""Risk-sensitive safety filtering for stochastic systems under model uncertainty."""
from .certify import Certificate, delta_of, optimize_beta_xi, verify_prop1
from .dynamics import ModelEnsemble, NoiseSpec, SamplingConfig, SystemSpec, rollout
from .envs import make_env
from .errors import RiskFilterError
from .policy import train_nominal, train_safe
from .risk import RiskParams, risk_next_value, risk_of_samples
from .safety import SafetySpec, ThetaConstants
from .safety_filter import FilterConfig, FilteredPolicy, filter_control
from .value import Grid, ValueFunction, policy_evaluation

__version__ = "0.1.0"

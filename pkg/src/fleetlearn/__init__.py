"""Scalable online post-training at desk scale: simulated robot fleet,
streaming episode store and bus, centralized learner, HG-DAgger and RECAP."""

from .config import RunConfig, load_config, parse_config
from .envsim import DomainParam, sample_domain
from .estimators import BCPolicy, LinearValue
from .policy import PolicyParams

__all__ = ["BCPolicy", "DomainParam", "LinearValue", "PolicyParams", "RunConfig",
           "load_config", "parse_config", "sample_domain"]
__version__ = "0.1.0"

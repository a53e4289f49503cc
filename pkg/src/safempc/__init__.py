"""Safe MPC imitation toolkit: DDP-based expert, Bayesian dropout policy,
and uncertainty-gated switching with a CEM-learned threshold."""

__version__ = "0.1.0"

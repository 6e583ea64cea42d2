"""Traffic-signal control with adaptive-pressure DQN and a Bayesian critique/tune stage."""

__version__ = "0.1.0"

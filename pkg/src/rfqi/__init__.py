"""Reward-relevance-filtered linear offline RL: thresholded LASSO, reward-filtered FQI/FQE, a block-structured linear-MDP simulator and a replication harness."""

__version__ = "0.1.0"

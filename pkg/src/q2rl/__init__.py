"""Q-estimation and Q-gating from behavior cloning for online RL."""

"""Meta-reinforcement learning with a learned explorer, a latent-graph task encoder
and alternating variational-EM training."""

__version__ = "0.1.0"

"""ssmrl: model-based RL on a resettable state-space world model.

The package trains a latent world model whose sequence backbone is a
diagonal state-space layer evaluated with an associative parallel scan
(reset-aware, so episode boundaries zero the recurrent state exactly), plus
a sequential GRU baseline for timing comparison, an imagination-trained
actor-critic, and a toy gate-racing environment.
"""

from . import autodiff, dists, nn, ssm

__all__ = ["autodiff", "nn", "dists", "ssm"]
__version__ = "0.1.0"

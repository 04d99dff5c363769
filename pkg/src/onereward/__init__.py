"""Desk-scale multi-task reward feedback for masked signal editing.

Modules: ``numcore`` (parameters, MLP, Adam, EMA, RNG), ``tasks`` (signals,
masks, oracle judges), ``flowgen`` (rectified-flow generator), ``prefdata``
(preference pairs), ``rewardmodel`` (query-conditioned pairwise judge),
``rlhf`` (reward-feedback fine-tuning), ``config``/``pipeline``/``cli``.
"""

__version__ = "0.1.0"

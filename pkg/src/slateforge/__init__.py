"""slateforge: Evaluator-Generator framework for whole-slate recommendation.

A numpy library implementing sequence evaluators that predict per-position
and total list utility, decoding generators (supervised and Q-learning) that
search for high-utility lists, and a seeded user-behavior simulator that
provides ground truth for end-to-end validation.
"""

from . import autodiff, data, simulator

__version__ = "0.1.0"

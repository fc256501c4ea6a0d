"""Desk-scale lifelong generative learning laboratory.

Subpackages: ``nn`` (autodiff substrate), ``vae`` (models and bounds),
``replay`` (generative-replay training), ``graph`` (dynamic expansion
graph), ``bounds`` (forgetting diagnostics), ``data`` (task streams),
``checkpoint`` (binary containers), ``cli`` (run orchestration).
"""

__version__ = "0.1.0"

"""Memorization capacity of one-layer attention-only transformers.

Modules: ``numkernel`` (linear algebra and fits), ``model`` (forward pass),
``task`` (distributions and metrics), ``bounds`` (encoder lower bounds and
capacity formulas), ``construct`` (exact memorizers), ``trainlab``
(training and sweeps) and ``cli``.
"""
__version__ = "0.1.0"

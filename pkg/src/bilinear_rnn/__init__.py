"""Bilinear recurrent networks for state tracking.

A self-contained numerical library and CLI: a hierarchy of linear
recurrent models with input-dependent (bilinear) state transitions, exact
analytic constructions for automaton simulation / modular addition /
frozen-network parity, manual backpropagation-through-time training, and
an experiment harness for length-generalization studies.
"""

__version__ = "0.1.0"

"""Benchmark suite for policy search in a partner-choice game.

The package compares gradient policy search (a PPO-style learner) with
direct policy search (CMA-ES) on an investment game where the payoff
arrives as a single rare event per episode, and measures how each degrades
as that event is made rarer.
"""

__version__ = "0.1.0"

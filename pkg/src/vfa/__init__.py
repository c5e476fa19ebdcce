"""Video fluency assessment: windowed video transformer with temporally
permuted attention, stutter synthesis, ranking losses and evaluation tools."""

__version__ = "0.1.0"

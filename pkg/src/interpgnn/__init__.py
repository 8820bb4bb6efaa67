"""Graph neural network surrogates for mesh-based unsteady flows with an
interpretable Top-K sub-sampling module."""

__version__ = "0.1.0"

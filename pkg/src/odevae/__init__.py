"""ODE-constrained variational autoencoder for longitudinal data with two
observation time points per individual."""

__version__ = "0.1.0"

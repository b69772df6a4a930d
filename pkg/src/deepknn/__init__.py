"""Feature-space clean-label poisoning attacks and the Deep k-NN defense."""

__version__ = "0.1.0"

"""Spin-phonon relaxation and decoherence of paramagnetic defects."""
__version__ = "0.1.0"

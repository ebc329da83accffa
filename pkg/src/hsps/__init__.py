"""Prediction, simulation, counting and inference of second-order coherence
for cw down-conversion heralded single-photon sources."""
__version__ = "0.1.0"

"""Digital-human asset tooling: detail transfer, skeleton calibration, color
correction, gesture composition and speech-driven face coefficients."""

__version__ = "0.1.0"

"""Sub-Nyquist ultrasound beamforming: Fourier-domain DAS and COBA, sparse recovery and learned ISTA."""

__version__ = "0.1.0"

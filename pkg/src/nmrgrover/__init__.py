"""Simulator and pulse-program compiler for a three-spin NMR Grover search.

The package is organised in layers: ``qcore`` (density-matrix algebra),
``spinsys`` (spin Hamiltonian, pulses, error channels), ``pulsecomp``
(gate-to-pulse compiler and rewrite engine), ``stateprep`` (effective
pure states by temporal averaging), ``grover`` (algorithm instances and
iteration sweeps) and ``analysis`` (tomography, spectra, fits, error
metrics).  A FastAPI service (``nmrgrover.service``) wraps the package;
the CLI (``nmrgrover.cli``) is a thin client of that service layer.
"""

__version__ = "0.1.0"

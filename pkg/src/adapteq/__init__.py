"""Adaptive split-step nonlinear equalizer for dual-polarization optical links.

Modules
-------
numerics   fixed-point formats and quantization
channel    multi-span Jones-vector channel emulator
equalizer  Kerr / MIMO-FIR split-step forward path
backprop   hand-derived gradients and SGD
trainer    online pilot-based training and SNR metrics
harness    experiment runner behind the ``adapteq`` command
"""

__version__ = "0.1.0"

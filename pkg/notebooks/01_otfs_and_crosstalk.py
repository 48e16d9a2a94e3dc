"""
OTFS frames and delay-Doppler crosstalk
=======================================

A small walk through the transforms and the crosstalk matrix that the
detector correlates against. Run with ``python3 notebooks/01_otfs_and_crosstalk.py``.
"""
import numpy as np

from otfsradar.otfs import OtfsConfig, PulseShape, generate_symbols, isfft, psi_exact, sfft

# an 8 x 8 frame, 15 kHz spacing
cfg = OtfsConfig(8, 8, 15e3)
rng = np.random.default_rng(0)
x = generate_symbols(cfg, 1, 1.0, rng, blocks=1)[0].reshape(cfg.N, cfg.M)

# ISFFT then SFFT gives the symbols back
X = isfft(x, cfg)
print("round trip error:", np.max(np.abs(sfft(X, cfg) - x)))

# with no delay or Doppler the crosstalk is the identity
pulse = PulseShape("rectangular", cfg.T)
P0 = psi_exact(cfg, pulse, 0.0, 0.0)
print("||Psi(0,0) - I||_max:", np.max(np.abs(P0 - np.eye(cfg.size))))

# an on-grid shift moves the energy to one off-diagonal
P = psi_exact(cfg, pulse, 2 * cfg.doppler_step, 3 * cfg.delay_step)
mag = np.abs(P) ** 2
print("energy on the strongest entry per column:", np.mean(mag.max(axis=0) / mag.sum(axis=0)))

# off-grid, it leaks into neighbouring bins
P = psi_exact(cfg, pulse, 2.5 * cfg.doppler_step, 3.5 * cfg.delay_step)
mag = np.abs(P) ** 2
print("same, half a bin off:", np.mean(mag.max(axis=0) / mag.sum(axis=0)))

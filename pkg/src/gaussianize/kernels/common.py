"""Constants shared by both kernel backends."""

ALPHA_CUTOFF = 1.0 / 255.0
T_MIN = 1e-4
NEAR_T = 1e-4
MIN_DENOM = 1e-12
TILE = 16

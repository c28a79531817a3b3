"""Physical constants. Energies are carried in cm^-1 throughout the package."""

import math

MU_B = 0.4668645  # Bohr magneton, cm^-1 / T
K_B = 0.6950348  # Boltzmann constant, cm^-1 / K
C_LIGHT = 2.99792458e10  # speed of light, cm / s
G_E = 2.002319  # free-electron g factor
HBAR_SI = 1.054571817e-34  # J s
AMU_KG = 1.66053906660e-27  # kg

# rate[s^-1] = TWO_PI_C * rate[cm^-1]
TWO_PI_C = 2.0 * math.pi * C_LIGHT

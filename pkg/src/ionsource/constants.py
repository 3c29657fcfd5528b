"""Physical constants (CODATA 2018) in SI units."""
import math

EPS0 = 8.8541878128e-12
COULOMB_K = 1.0 / (4.0 * math.pi * EPS0)
E_CHARGE = 1.602176634e-19
AMU = 1.66053906660e-27
K_B = 1.380649e-23
H_PLANCK = 6.62607015e-34

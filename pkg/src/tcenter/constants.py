"""Physical constants and unit conventions.

Frequencies are MHz, times are microseconds, fields are tesla.
"""

from scipy import constants as _c

PLANCK_H = _c.h  # J s
BOHR_MAGNETON = _c.physical_constants["Bohr magneton"][0]  # J / T

#: mu_B / h expressed in MHz per tesla
MU_B_OVER_H_MHZ_PER_T = BOHR_MAGNETON / PLANCK_H / 1e6

G_ELECTRON = 2.005
GYRO_H_MHZ_PER_T = 42.577
GYRO_SI29_MHZ_PER_T = -8.465
SI29_ABUNDANCE = 0.0467

KHZ = 1e-3  # kHz -> MHz
MS = 1e3  # ms -> us

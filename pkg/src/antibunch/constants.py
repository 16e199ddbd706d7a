"""Physical constants and unit conversions.

Internal units are fixed: time in ps, energy in µeV, angular frequency in
rad/ps, optical power in nW.
"""

from dataclasses import dataclass
import math


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float = 658.2119569  # µeV·ps
    h: float = 4.135667696  # µeV·ns


CONSTANTS = PhysicalConstants()
HBAR = CONSTANTS.hbar

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def energy_to_angular(energy_uev):
    """µeV -> rad/ps."""
    return energy_uev / HBAR


def angular_to_energy(omega):
    """rad/ps -> µeV."""
    return omega * HBAR


def frequency_to_energy(freq_mhz):
    """Laser frequency step in MHz -> energy step in µeV (E = h·ν)."""
    return CONSTANTS.h * freq_mhz * 1e-3


def fwhm_to_sigma(fwhm):
    return fwhm / FWHM_PER_SIGMA

"""Atmospheric absorption (standard still-air model).

Classical two-relaxation formula for the attenuation coefficient in dB/m as
a function of frequency, temperature, relative humidity and ambient pressure.
Fixed default conditions: 20 degC, 50 % RH, 101.325 kPa.
"""

from __future__ import annotations

import numpy as np

from . import BAND_CENTERS_HZ, BROADBAND_BAND

T0 = 293.15       # reference temperature, K
T01 = 273.16      # triple point, K
P0 = 101.325      # reference pressure, kPa


def air_attenuation_db_per_m(
    freqs=BAND_CENTERS_HZ,
    temperature_c: float = 20.0,
    rel_humidity: float = 50.0,
    pressure_kpa: float = P0,
) -> np.ndarray:
    """Attenuation coefficient alpha in dB per meter at the given frequencies."""
    f = np.asarray(freqs, dtype=float)
    t = temperature_c + 273.15
    p_rel = pressure_kpa / P0
    t_rel = t / T0
    # Molar concentration of water vapour (percent).
    p_sat_rel = 10.0 ** (-6.8346 * (T01 / t) ** 1.261 + 4.6151)
    h = rel_humidity * p_sat_rel / p_rel
    fr_o = p_rel * (24.0 + 4.04e4 * h * (0.02 + h) / (0.391 + h))
    fr_n = p_rel * t_rel ** -0.5 * (
        9.0 + 280.0 * h * np.exp(-4.170 * (t_rel ** (-1.0 / 3.0) - 1.0))
    )
    alpha = 8.686 * f**2 * (
        1.84e-11 / p_rel * np.sqrt(t_rel)
        + t_rel**-2.5 * (
            0.01275 * np.exp(-2239.1 / t) / (fr_o + f**2 / fr_o)
            + 0.1068 * np.exp(-3352.0 / t) / (fr_n + f**2 / fr_n)
        )
    )
    return alpha


def air_band_gains(distance_m: float) -> np.ndarray:
    """Pressure-domain gain per octave band after the given path length."""
    alpha = air_attenuation_db_per_m()
    return 10.0 ** (-alpha * max(distance_m, 0.0) / 20.0)


def air_broadband_gain(distance_m: float) -> float:
    """Scalar pressure gain: the 1 kHz band value (broadband mode)."""
    return float(air_band_gains(distance_m)[BROADBAND_BAND])

"""Physical constants in the cm-based unit system used throughout."""

Q = 1.602176634e-19     # elementary charge [C]
KB = 1.380649e-23       # Boltzmann constant [J/K]
EPS0 = 8.8541878128e-14  # vacuum permittivity [F/cm]


def thermal_voltage(temperature: float) -> float:
    """kT/q in volts; the single source of truth for V_T."""
    return KB * temperature / Q

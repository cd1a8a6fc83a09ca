"""roskit: region-of-safety synthesis for wind-turbine frequency support.

Library + CLI that verifies frequency safety of a power system with
wind-turbine inertia emulation via sum-of-squares barrier certificates, and
synthesizes safe mode-switching instants for the hybrid WTG controller.
"""

__version__ = "0.1.0"

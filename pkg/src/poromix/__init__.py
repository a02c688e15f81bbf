"""Mixed finite elements for nonlinear poroelasticity in 2D.

Five-field formulation (total stress, displacement, rotation, discharge
flux, pore pressure) discretised with lowest-order PEERS elements for the
elastic part and Raviart-Thomas / piecewise constants for the Darcy part,
with stress- and pressure-dependent permeability.
"""

__version__ = "0.1.0"

"""Moser-Carleson-Chang tower profiles and critical sequences for the Trudinger-Moser functional."""

from .closed_sets import SignedClosedSet, cantor_set, finite_approximant, kappa_bound
from .logdomain import (
    LogGrid,
    SampledRadialFunction,
    dilate,
    dirichlet_energy,
    make_uniform_grid,
    orlicz_exp_l2_norm,
)
from .towers import TowerProfile, build_tower, design_level, energy_closed_form

__version__ = "0.1.0"

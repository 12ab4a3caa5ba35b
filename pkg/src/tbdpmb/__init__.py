"""Particle Poisson multi-Bernoulli filter for Swerling 1 cell-intensity frames.

Objects sharing a cell each contribute to it with a probability, so
closely spaced objects are not forced to explain the same cell.
"""
from .association import AssociationWeights, BeliefTable, BpConfig, exact_marginals, run_bp
from .gospa import GospaConfig, GospaResult, gospa
from .measurement import CellGrid, ContributionTable, Frame, NoiseModel, mean_contributions
from .prediction import BirthModel, TransitionModel, predict
from .scenario import Scenario, generate_truth, preset, render_frame, simulate
from .state import (BernoulliComponent, GroundTruthFrame, ObjectState, PMBPosterior,
                    PoissonIntensity, WeightedParticleSet, expected_cardinality, resample)
from .update import EstimateSet, FilterConfig, PMBFilter, extract_estimates, recycle

__version__ = "0.1.0"

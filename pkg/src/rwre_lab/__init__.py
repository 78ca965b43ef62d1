"""Simulation and verification lab for walks in random lattice environments.

Modules
-------
environments   environment laws on Z^d and deterministic realizations
walks          quenched/annealed walk laws and exact enumeration oracles
tilting        the drifted auxiliary walk and its change of measure
decomposition  forced-symbol product decomposition and stopping machinery
estimators     free energies, rate points, and the quenched/annealed gap
cli            command line front end (rwre-lab)
"""

from .decomposition import (BlockSample, EpsilonLaw, StoppingConfig, conditional_step,
                            conditional_step_probs, default_kbar, expected_tau,
                            make_epsilon_law, psi_factor, sample_ray_block, sample_tau,
                            sample_tau_batch, verify_psi_identity)
from .environments import (Box, Environment, IIDProductLaw, MarkovFieldLaw, centered_box,
                           constant_law, direction_index, direction_vectors, opposite,
                           sample_environment)
from .estimators import (FreeEnergyEstimate, GapReport, RatePointEstimate, bound_Ia,
                         bound_Iq, certify_gap, estimate_free_energy, exact_gap_oracle,
                         legendre_transform, rate_point)
from .numutil import BudgetError
from .tilting import (TiltParams, qwalk_step_distribution, solve_tilt,
                      tilt_invariant_residuals, verify_identity_annealed,
                      verify_identity_quenched, zero_disorder_free_energy)
from .walks import (Path, annealed_path_weight, annealed_point_probability,
                    enumerate_paths, quenched_path_weight, quenched_point_probability,
                    simulate_quenched)

__version__ = "0.1.0"

"""Superprocess simulation conditioned on extinction time.

The package builds the decomposition of a measure-valued branching process
conditioned to die at a fixed time h: a spine (the ancestral line of the
last individual alive) dressed with continuous, jump and time-zero
immigration, together with the extinction-functional solvers and the
statistical harness that certifies the construction against direct
conditioned sampling.
"""

__version__ = "0.1.0"

from .mechanism import BranchingMechanism, psi, psi_prime, grey_check
from .motion import MotionModel, sample_step, semigroup_apply
from .measures import ParticleMeasure, TrajectoryRecord
from .extinction import (
    ExtinctionProfile,
    solve_v_homogeneous,
    solve_w_homogeneous,
    solve_u_f,
    solve_vw_spatial,
    extinction_cdf,
    sample_extinction_time,
)
from .sampler import (
    ParticleControls,
    sample_csbp_exact,
    sample_superprocess,
    sample_conditioned_direct,
    conditioning_weight,
)
from .spine import SpinePath, spine_initial_measure, spine_weight, sample_spine
from .williams import (
    ImmigrationEvent,
    WilliamsSample,
    sample_continuous_immigration,
    sample_jump_immigration,
    sample_initial_immigration,
    sample_williams,
)

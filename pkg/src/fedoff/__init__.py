"""Smart device sampling with similarity-aware D2D data offloading for
federated learning, runnable end to end at desk scale."""

from .baselines import (SchemeSpec, offload_greedy, offload_random,
                        sample_heuristic, sample_random)
from .bounds import (BoundParams, compute_delta_i, compute_zeta,
                     corollary1_bound, estimate_smoothness, theorem1_bound)
from .gcn import (GcnModel, TrainingCorpus, build_corpus, build_gcn_input,
                  gcn_branch_select, gcn_forward, train_gcn)
from .harness import (ExperimentConfig, ExperimentResult,
                      aggregations_to_threshold, default_config, report,
                      run_convex_fleet, run_experiment, train_smart_sampler)
from .network import (DeviceState, NetworkState, ScenarioConfig,
                      apply_offload_step, estimate_similarity,
                      generate_scenario, load_scenario, save_scenario)
from .offload import (ObjectiveModel, OffloadPlan, OptimizedOffload,
                      check_feasible, objective, solve_horizon, solve_timestep,
                      update_gradient_estimate)
from .sampling import SamplingDecision
from .training import (SimulationTrace, aggregate, global_loss, local_step,
                       run_centralized_reference, simulate_fedl)

__version__ = "0.1.0"

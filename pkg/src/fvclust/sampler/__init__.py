from .chain import BACKENDS, BLOCKS, InitSpec, initial_state, run_chain, run_plain_gibbs, sweep
from .design import ModelData
from .stats import ClusterSufficientStats, cluster_stats, log_f_gamma, marginal_obs_precision_apply

__all__ = ["BACKENDS", "BLOCKS", "InitSpec", "initial_state", "run_chain", "run_plain_gibbs", "sweep",
           "ModelData", "ClusterSufficientStats", "cluster_stats", "log_f_gamma",
           "marginal_obs_precision_apply"]

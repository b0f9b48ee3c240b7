"""Multi-job federated learning device scheduling on a simulated device pool.

Several FL jobs share one population of heterogeneous devices. Each round a
scheduler picks the devices a job trains on, trading the round's straggler
time against how evenly the job's data is covered. The package provides the
cost model, a loss-curve surrogate for training progress, an event-driven
simulator, four baseline schedulers and two learned ones: Bayesian
optimization over plan encodings (``bods``) and a REINFORCE-trained LSTM
policy (``rlds``).
"""

from .config import ExperimentConfig, load_config, parse_config
from .core import FrequencyMatrix, JobSpec, SchedulingPlan
from .costs import CostWeights, RoundCost
from .devices import DeviceProfile
from .engine import SimulationTrace, run, total_training_time
from .experiment import compare, run_experiment, tournament

__all__ = [
    "CostWeights", "DeviceProfile", "ExperimentConfig", "FrequencyMatrix", "JobSpec", "RoundCost",
    "SchedulingPlan", "SimulationTrace", "compare", "load_config", "parse_config", "run",
    "run_experiment", "total_training_time", "tournament",
]

__version__ = "0.1.0"

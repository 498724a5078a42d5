"""Fast-path PBFT, the classical PBFT baseline, faults and metrics."""
from ..ledger import Certificate, Vote, quorum_threshold
from .faults import CRASH, EQUIVOCATE, FaultSchedule, inject_faults
from .metrics import ConsensusMetrics, RunTrace, compute_metrics, write_metrics_csv
from .protocol import (FASTPATH, PBFT, ConsensusConfig, ConsensusMsg, NodeState, Phase,
                       RoundState, StepResult, ValidatorPolicy, consensus_step, elect_leader,
                       make_nodes, on_timeout, pbft_baseline_step, propose, select_validators,
                       start_height)
from .sim import BenchConfig, ConsensusSim, RunResult, run_consensus

__all__ = [
    "CRASH", "EQUIVOCATE", "FASTPATH", "PBFT", "BenchConfig", "Certificate", "ConsensusConfig",
    "ConsensusMetrics", "ConsensusMsg", "ConsensusSim", "FaultSchedule", "NodeState", "Phase",
    "RoundState", "RunResult", "RunTrace", "StepResult", "ValidatorPolicy", "Vote",
    "compute_metrics", "consensus_step", "elect_leader", "inject_faults", "make_nodes",
    "on_timeout", "pbft_baseline_step", "propose", "quorum_threshold", "select_validators",
    "start_height", "run_consensus", "write_metrics_csv",
]

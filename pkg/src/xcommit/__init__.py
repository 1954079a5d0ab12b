"""Cross-chain commit protocols on a deterministic discrete-event simulator."""

from .config import ConfigInvalid, RunConfig
from .metrics import AuditReport, audit_acid, poisson_failure_prob, throughput
from .protocols import ProtocolKind
from .simulation import Simulation, simulate
from .trace import RunTrace, TxnMetrics
from .workload import generate_workload

__all__ = [
    "AuditReport", "ConfigInvalid", "ProtocolKind", "RunConfig", "RunTrace", "Simulation",
    "TxnMetrics", "audit_acid", "generate_workload", "poisson_failure_prob", "simulate", "throughput",
]

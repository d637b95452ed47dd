"""Function-level vulnerability propagation across package ecosystems.

The pipeline: load a snapshot (:mod:`.snapshot`), derive the project-level
graph (:mod:`.depgraph`), identify vulnerable functions from a patch
(:mod:`.patchvf`), propagate them with staged pruning (:mod:`.propagation`)
and score the spread (:mod:`.vpss`).
"""

__version__ = "0.1.0"

from .depgraph import PDepGraph, build_p_graph
from .propagation import PropagationResult, VulnSpec, load_vuln, propagate
from .snapshot import EcosystemSnapshot, PvId, load_snapshot, validate_snapshot
from .vpss import VpssParams, score_at, timeseries

__all__ = [
    "EcosystemSnapshot",
    "PDepGraph",
    "PropagationResult",
    "PvId",
    "VpssParams",
    "VulnSpec",
    "build_p_graph",
    "load_snapshot",
    "load_vuln",
    "propagate",
    "score_at",
    "timeseries",
    "validate_snapshot",
]

"""Graph condensation with spectral edge intervention, a causal invariance
objective and spectral-negative contrast."""

from .graph import Graph
from .pipeline import RunArtifacts, TgccConfig, loss_report, run_condense

__all__ = ["Graph", "RunArtifacts", "TgccConfig", "loss_report", "run_condense"]
__version__ = "0.1.0"

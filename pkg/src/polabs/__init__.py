"""Policy abstraction metrics, layer-wise policy encoders and the experiments built on them."""
from ._accel import backend
from .mdp import TabularMdp, TabularPolicy, GridKind, build_gridworld, reference_policies
from .metrics import MetricKind
from .mmd import KernelSpec, SampleSet, SampleTag, estimate_metric, mmd2_empirical

__version__ = "0.1.0"

__all__ = [
    "GridKind",
    "KernelSpec",
    "MetricKind",
    "SampleSet",
    "SampleTag",
    "TabularMdp",
    "TabularPolicy",
    "backend",
    "build_gridworld",
    "estimate_metric",
    "mmd2_empirical",
    "reference_policies",
]

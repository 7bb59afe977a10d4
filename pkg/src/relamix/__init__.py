"""Few-shot domain adaptation on snippet-level video features.

The package combines a relational attention aggregator with relation
dropout, statistics-based feature mixing into the target domain, and
prototype-contrastive cross-domain alignment, plus the statistical
baselines and a benchmark harness with a synthetic domain-shift generator.
"""

__version__ = "0.1.0"

from .data import (
    Domain,
    FeatureDataset,
    FewShotSplit,
    SnippetSequence,
    sample_few_shot_split,
    window_snippets,
)
from .relations import RelationPlan, build_plan, enumerate_scales, sample_relation_tuples
from .synthetic import DomainShiftSpec, generate_pair

__all__ = [
    "Domain",
    "DomainShiftSpec",
    "FeatureDataset",
    "FewShotSplit",
    "RelationPlan",
    "SnippetSequence",
    "__version__",
    "build_plan",
    "enumerate_scales",
    "generate_pair",
    "sample_few_shot_split",
    "sample_relation_tuples",
    "window_snippets",
]

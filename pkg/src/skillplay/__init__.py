"""Self-play curriculum engine with diversity-aware rewards.

Scores generated questions with uncertainty, within-batch, and
history-aware diversity rewards; maintains a persistent skill-embedding
memory across iterations; samples experience replay for solver training
sets; and computes diversity diagnostics, all against pluggable model
backends so the full loop runs deterministically at desk scale.
"""

from .core import (
    AnswerGroupSet,
    Config,
    ConfigError,
    Embedding,
    Question,
    QuestionSource,
    RewardBreakdown,
    SimilarityMode,
    normalize_answer,
    validate_config,
)
from .memory import (
    MemoryBank,
    MemoryRecord,
    load_bank,
    map_penalty,
    max_similarity,
    mean_similarity,
    sample_replay,
    save_bank,
    update_bank,
)
from .repetition import ClusterAssignment, bleu_distance, cluster, pairwise_similarity, repetition_penalty
from .reward import (
    SolverRollout,
    consistency_score,
    extract_answer,
    group_answers,
    is_valid,
    pseudo_label,
    solver_reward,
    uncertainty_reward,
)
from .skills import Provenance, SkillPipeline, SkillResult

__version__ = "0.1.0"

__all__ = [
    "AnswerGroupSet",
    "ClusterAssignment",
    "Config",
    "ConfigError",
    "Embedding",
    "MemoryBank",
    "MemoryRecord",
    "Provenance",
    "Question",
    "QuestionSource",
    "RewardBreakdown",
    "SimilarityMode",
    "SkillPipeline",
    "SkillResult",
    "SolverRollout",
    "bleu_distance",
    "cluster",
    "consistency_score",
    "extract_answer",
    "group_answers",
    "is_valid",
    "load_bank",
    "map_penalty",
    "max_similarity",
    "mean_similarity",
    "normalize_answer",
    "pairwise_similarity",
    "pseudo_label",
    "repetition_penalty",
    "sample_replay",
    "save_bank",
    "solver_reward",
    "uncertainty_reward",
    "update_bank",
    "validate_config",
    "__version__",
]

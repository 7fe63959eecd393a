"""Debiased passage reranking for RAG via scored permutation interventions.

Score several orderings of the retrieved passages through a generator
backend, fit a constrained least-squares model that separates each
passage's utility from the generator's position bias, and rerank by the
debiased utilities.
"""

from .backend import (
    Backend,
    BackendError,
    BackendOptions,
    CachingBackend,
    RemoteBackend,
    ScoreBatchError,
    ScoreCache,
    ScoredPermutation,
    SimOracleConfig,
    SimulatedBackend,
    TokenDistribution,
    perm_distance,
)
from .baselines import (
    PointwiseScore,
    ScoreMethod,
    bayes_saliency,
    bayes_saliency_listwise,
    lingua_score,
    qg_score,
    rank_by_pointwise,
)
from .core import (
    Passage,
    Permutation,
    Query,
    Ranking,
    RetrievalList,
    apply_permutation,
    stable_seed,
    validate_retrieval_list,
)
from .distill import DistillRecord, build_distill_dataset, kl_distill_loss, softmax
from .ingest import DatasetRecord, load_dataset, synth_corpus
from .metrics import (
    BiasReport,
    EvalReport,
    bias_report,
    exact_match,
    kendall_tau,
    mrr,
    normalize_answer,
    rouge_l,
)
from .permute import (
    DesignStrategy,
    PermutationDesign,
    coverage_matrix,
    cyclic_design,
    pruned_cyclic_design,
    random_design,
    variable_pruned_design,
)
from .pipeline import (
    DesignKind,
    RerankStrategy,
    pid_rerank,
    pid_rerank_with_model,
    reverse_ranking,
    self_consistency,
)
from .solver import (
    BiasProfile,
    DisentangledModel,
    SolverConfig,
    UtilityVector,
    brute_force_fit,
    fit,
    predict,
    project_simplex,
)

__version__ = "0.1.0"

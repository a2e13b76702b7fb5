"""Supervised rationale verification and feedback for relation extraction.

The pipeline in one breath: collect biased and unbiased reasoning chains from
a language model by steering its prompts, contrastively train a supervisor
that embeds rationales so the two kinds separate, then at inference verify
each generated rationale against stored anchors and, when it looks biased,
retrieve corrective demonstrations and ask the model again.
"""

from .collection import CollectionConfig, CollectionError, CollectionReport, collect
from .core import (
    DataError,
    Demonstration,
    DocumentSample,
    LabeledSample,
    LabelSet,
    MergeError,
    Prediction,
    Rationale,
    RationaleKind,
    RationaleSource,
    RationaleStore,
    RelationLabel,
    Triplet,
    load_documents,
    load_samples,
    save_documents,
    save_samples,
)
from .evalbench import (
    BenchConfig,
    ErrorMatrix,
    EvalReport,
    error_matrix,
    micro_f1,
    run_benchmark,
    sample_kshot_document,
    sample_kshot_sentence,
)
from .feedback import (
    AnchorIndex,
    Fallback,
    LoopConfig,
    NoAnchorsError,
    Verdict,
    default_fallback_label,
    predict_document,
    predict_with_feedback,
    retrieve_feedback,
    self_consistency,
    verify,
)
from .gateway import (
    BiasModel,
    CallLog,
    ConfigurationError,
    GatewayError,
    HttpBackend,
    LlmBackend,
    MockBackend,
    ParseError,
    PromptSpec,
)
from .supervisor import (
    CheckpointError,
    PairClass,
    RationalePair,
    RationaleSupervisor,
    TrainingError,
    build_pairs,
    classify_pair,
    contrastive_loss,
    load_model,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorIndex",
    "BenchConfig",
    "BiasModel",
    "CallLog",
    "CheckpointError",
    "CollectionConfig",
    "CollectionError",
    "CollectionReport",
    "ConfigurationError",
    "DataError",
    "Demonstration",
    "DocumentSample",
    "ErrorMatrix",
    "EvalReport",
    "Fallback",
    "GatewayError",
    "HttpBackend",
    "LabelSet",
    "LabeledSample",
    "LlmBackend",
    "LoopConfig",
    "MergeError",
    "MockBackend",
    "NoAnchorsError",
    "PairClass",
    "ParseError",
    "Prediction",
    "PromptSpec",
    "Rationale",
    "RationaleKind",
    "RationalePair",
    "RationaleSource",
    "RationaleStore",
    "RationaleSupervisor",
    "RelationLabel",
    "Triplet",
    "TrainingError",
    "Verdict",
    "build_pairs",
    "classify_pair",
    "collect",
    "contrastive_loss",
    "default_fallback_label",
    "error_matrix",
    "load_documents",
    "load_model",
    "load_samples",
    "micro_f1",
    "predict_document",
    "predict_with_feedback",
    "retrieve_feedback",
    "run_benchmark",
    "sample_kshot_document",
    "sample_kshot_sentence",
    "save_documents",
    "save_model",
    "save_samples",
    "self_consistency",
    "verify",
    "__version__",
]

from .engine import ClassificationEngine, classify, load_synonyms
from .stages import (
    EmptyDescriptionError,
    NoCandidatesError,
    NoDecisionError,
    NoSubheadingError,
    PipelineError,
    StageError,
    stage1_extract,
    stage2_retrieve,
    stage3_l1,
    stage4_l2,
    stage5_subheading,
    stage6_score,
    verify_citations,
)
from .trace import PipelineTrace, StageRecord
from .types import (
    CandidateHeading,
    Citation,
    CitationReport,
    Confirmation,
    FinalDecision,
    L2Verdict,
    PipelineConfig,
    ProductAttributes,
    ScoredCandidate,
    SubheadingResolution,
)

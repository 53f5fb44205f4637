"""Distillation corpus curation toolkit.

Batch stages for building a distillation corpus from teacher samples:
quality gating, pass-rate compression, edit-distance diversity selection,
teacher smoke-test ranking, mixed-domain composition, and corpus
diagnostics, all over portable JSONL files with stage-lineage manifests.
"""

__version__ = "0.1.0"

from .records import (CorpusManifest, EmbeddingRecord, LogprobRecord, PassRateStats,
                      QuestionRecord, ScoreRecord, TrajectoryRecord,
                      VerificationVerdict, parse_corpus, write_corpus, write_manifest)

__all__ = [
    "CorpusManifest",
    "EmbeddingRecord",
    "LogprobRecord",
    "PassRateStats",
    "QuestionRecord",
    "ScoreRecord",
    "TrajectoryRecord",
    "VerificationVerdict",
    "parse_corpus",
    "write_corpus",
    "write_manifest",
    "__version__",
]

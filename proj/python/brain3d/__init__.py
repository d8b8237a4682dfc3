"""Volumetric brain MRI report generation: synthetic data, training, decoding, metrics and attribution."""

from ._core import (
    ConfigError,
    DomainError,
    Error,
    FormatError,
    IntegrityError,
    ProvenanceError,
    ShapeError,
    UsageError,
    bleu,
    bootstrap_ci,
    cider,
    compress_tokens,
    default_config,
    evaluate,
    evaluate_reports,
    explain,
    extract_findings,
    generate,
    generate_subject,
    infonce,
    lime_fit,
    preprocess_volume,
    read_volume,
    resample_trilinear,
    rouge_l,
    rouge_n,
    synth,
    top_p_filter,
    train,
    write_volume,
)

__all__ = [name for name in dir() if not name.startswith("_")]

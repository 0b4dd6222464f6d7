"""Curation stages and the tool services they call."""

from .pipeline import (
    AuditLog,
    BackgroundCuration,
    PipelineConfig,
    curate_backgrounds,
    curate_foregrounds,
    curate_layered,
    derive_seed,
    run_batch,
    run_pipeline,
)
from .services import ServiceBundle, ServiceError, ToolEndpoints, http_services

__all__ = [
    "AuditLog",
    "BackgroundCuration",
    "PipelineConfig",
    "ServiceBundle",
    "ServiceError",
    "ToolEndpoints",
    "curate_backgrounds",
    "curate_foregrounds",
    "curate_layered",
    "derive_seed",
    "http_services",
    "run_batch",
    "run_pipeline",
]

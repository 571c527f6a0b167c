"""Per-process resource and energy telemetry: sampling agent, durable queue, ingestion server."""

from wattline.records import (
    MetricField,
    ProcessIdentity,
    ProcessRecord,
    ResourceUsage,
    Status,
    decode_record,
    encode_record,
    project_record,
    validate_record,
)

__version__ = "0.1.0"

__all__ = [
    "MetricField",
    "ProcessIdentity",
    "ProcessRecord",
    "ResourceUsage",
    "Status",
    "decode_record",
    "encode_record",
    "project_record",
    "validate_record",
    "__version__",
]

"""Feature exporter: pretrained-model attention capture into engine manifests.

This package is the only component that touches deep-learning runtimes; the
analysis engine consumes the written files and never links against torch.
"""

from feature_exporter.export import (
    ExportError,
    ExportJob,
    export_attention_features,
    export_text_embeddings,
)

__all__ = [
    "ExportError",
    "ExportJob",
    "export_attention_features",
    "export_text_embeddings",
]

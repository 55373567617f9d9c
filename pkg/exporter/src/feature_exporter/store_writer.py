"""Writers for the engine's on-disk formats.

Duplicated here (rather than imported from the engine) so the exporter stays
a stand-alone producer of the documented schema: manifest.json plus raw
little-endian float32 blobs in row-major token order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
MERGED_HEAD = -1
DTYPE_TAG = "f32le"


@dataclass
class RecordSpec:
    name: str
    kind: str
    layer: int
    head: int
    timestep: int
    shape: tuple[int, int, int]
    file: str


@dataclass
class ManifestWriter:
    image_id: str
    model_name: str
    image_size: tuple[int, int]
    root: Path
    meta: dict = field(default_factory=dict)
    records: list[RecordSpec] = field(default_factory=list)

    def add_tensor(
        self,
        name: str,
        kind: str,
        layer: int,
        head: int,
        timestep: int,
        values: np.ndarray,
    ) -> RecordSpec:
        """Write one (h, w, d) tensor blob and register its record."""
        arr = np.ascontiguousarray(values, dtype="<f4")
        if arr.ndim != 3:
            raise ValueError(f"tensor {name!r} must be 3-D (h, w, d), got {arr.shape}")
        self.root.mkdir(parents=True, exist_ok=True)
        filename = f"{name}.f32"
        (self.root / filename).write_bytes(arr.tobytes())
        rec = RecordSpec(
            name=name,
            kind=kind,
            layer=layer,
            head=head,
            timestep=timestep,
            shape=tuple(arr.shape),
            file=filename,
        )
        self.records.append(rec)
        return rec

    def write(self) -> Path:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "image_id": self.image_id,
            "model_name": self.model_name,
            "image_size": list(self.image_size),
            "records": [
                {
                    "name": r.name,
                    "kind": r.kind,
                    "layer": r.layer,
                    "head": r.head,
                    "timestep": r.timestep,
                    "shape": list(r.shape),
                    "dtype": DTYPE_TAG,
                    "file": r.file,
                }
                for r in self.records
            ],
            "meta": self.meta,
        }
        path = self.root / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path

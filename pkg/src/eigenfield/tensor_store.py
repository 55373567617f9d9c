"""Neutral on-disk representation of features, eigenfields, and segmentations.

Formats are deliberately dumb so any language can write them:

* ``manifest.json``   -- JSON index of per-image tensor records.
* ``<name>.f32``      -- headerless raw little-endian float32 blob, row-major
                         over the (h, w) token grid, innermost dim embedding.
* ``<id>.eig.f32``    -- eigenfield values (h0*w0*C floats) + ``<id>.eig.json``.
* ``<id>.png``        -- segmentation labels (8-bit palette, or 16-bit
                         grayscale when K > 256) + ``<id>.seg.json``.

Token order within every tensor is row-major raster order over the grid; this
fixes the correspondence between graph node indices and pixels. Attention
tensors are stored without any CLS token (exporters drop it; recorded in the
manifest meta).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1

#: ``head`` value marking a record whose heads were concatenated/merged.
MERGED_HEAD = -1

KINDS = ("query", "key", "value", "final_feature", "class_embedding")

DTYPE_TAG = "f32le"
BYTES_PER_VALUE = 4

#: label value for "background" in zero-shot assignment outputs.
BACKGROUND = -1


class StoreError(ValueError):
    """Schema violation, byte-size mismatch, or corrupt artifact."""


# ---------------------------------------------------------------------------
# Records and manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorRecord:
    """One tensor in a manifest: (kind, layer, head, timestep) + grid shape."""

    name: str
    kind: str
    layer: int
    head: int  # MERGED_HEAD when heads were concatenated
    timestep: int
    shape: tuple[int, int, int]  # (h, w, d)
    file: str  # path relative to the manifest directory

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise StoreError(f"record {self.name!r}: unknown kind {self.kind!r}")
        if self.layer < 0:
            raise StoreError(f"record {self.name!r}: layer must be >= 0")
        if self.head < MERGED_HEAD:
            raise StoreError(f"record {self.name!r}: bad head index {self.head}")
        if self.timestep < 0:
            raise StoreError(f"record {self.name!r}: timestep must be >= 0")
        if len(self.shape) != 3 or any(int(s) <= 0 for s in self.shape):
            raise StoreError(
                f"record {self.name!r}: shape entries must be strictly positive, "
                f"got {self.shape}"
            )

    @property
    def n_tokens(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def nbytes(self) -> int:
        h, w, d = self.shape
        return h * w * d * BYTES_PER_VALUE


@dataclass
class Manifest:
    """Per-image index of tensor records, rooted at its own directory."""

    image_id: str
    model_name: str
    image_size: tuple[int, int]  # (H, W) pixels
    records: list[TensorRecord]
    root: Path
    schema_version: int = SCHEMA_VERSION
    meta: dict = dc_field(default_factory=dict)

    def record(self, name: str) -> TensorRecord:
        for rec in self.records:
            if rec.name == name:
                return rec
        raise KeyError(f"no record named {name!r} in manifest {self.image_id!r}")

    def validate(self) -> None:
        names = [r.name for r in self.records]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise StoreError(f"duplicate record names: {dup}")
        for rec in self.records:
            rec.validate()
        # every query needs a key twin at identical (layer, head, timestep, shape)
        keys = {
            (r.layer, r.head, r.timestep, r.shape)
            for r in self.records
            if r.kind == "key"
        }
        for rec in self.records:
            if rec.kind != "query":
                continue
            sig = (rec.layer, rec.head, rec.timestep, rec.shape)
            if sig not in keys:
                raise StoreError(
                    f"query record {rec.name!r} has no matching key record at "
                    f"(layer={rec.layer}, head={rec.head}, timestep={rec.timestep}, "
                    f"shape={rec.shape})"
                )


def load_manifest(path: str | Path) -> Manifest:
    """Parse and validate a manifest.json, checking byte sizes of all blobs."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StoreError(f"manifest {path} is not valid JSON: {exc}") from exc

    try:
        records = [
            TensorRecord(
                name=r["name"],
                kind=r["kind"],
                layer=int(r["layer"]),
                head=int(r["head"]),
                timestep=int(r["timestep"]),
                shape=tuple(int(s) for s in r["shape"]),
                file=r["file"],
            )
            for r in raw["records"]
        ]
        manifest = Manifest(
            image_id=raw["image_id"],
            model_name=raw["model_name"],
            image_size=tuple(int(s) for s in raw["image_size"]),
            records=records,
            root=path.parent,
            schema_version=int(raw.get("schema_version", SCHEMA_VERSION)),
            meta=dict(raw.get("meta", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise StoreError(f"manifest {path} violates schema: {exc}") from exc

    manifest.validate()
    for rec, raw_rec in zip(manifest.records, raw["records"]):
        dtype = raw_rec.get("dtype", DTYPE_TAG)
        if dtype != DTYPE_TAG:
            raise StoreError(f"record {rec.name!r}: unsupported dtype {dtype!r}")
        blob = manifest.root / rec.file
        if not blob.is_file():
            raise StoreError(f"record {rec.name!r}: missing tensor file {blob}")
        size = blob.stat().st_size
        if size != rec.nbytes:
            raise StoreError(
                f"record {rec.name!r}: file {blob} has {size} bytes, "
                f"shape {rec.shape} requires {rec.nbytes}"
            )
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> Path:
    """Write manifest.json (tensors must already exist under manifest.root)."""
    path = Path(path)
    doc = {
        "schema_version": manifest.schema_version,
        "image_id": manifest.image_id,
        "model_name": manifest.model_name,
        "image_size": list(manifest.image_size),
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
            for r in manifest.records
        ],
        "meta": manifest.meta,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Raw tensors
# ---------------------------------------------------------------------------


def write_tensor(path: str | Path, values: np.ndarray) -> None:
    """Write a (h, w, d) array as a raw little-endian f32 blob."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 3:
        raise StoreError(f"tensor must be 3-D (h, w, d), got shape {arr.shape}")
    Path(path).write_bytes(arr.tobytes())


def load_tensor(manifest: Manifest, name: str) -> np.ndarray:
    """Load one record as a (h, w, d) float32 array, bit-exact with the writer."""
    rec = manifest.record(name)
    blob = manifest.root / rec.file
    data = np.fromfile(blob, dtype="<f4")
    if data.size != rec.n_tokens * rec.shape[2]:
        raise StoreError(
            f"record {name!r}: blob {blob} holds {data.size} values, "
            f"expected {rec.n_tokens * rec.shape[2]}"
        )
    return data.reshape(rec.shape)


# ---------------------------------------------------------------------------
# Feature bundles (in-memory view of one manifest)
# ---------------------------------------------------------------------------


@dataclass
class FeatureBundle:
    """Per-image Q/K/V tensors indexed by (kind, layer, head, timestep)."""

    image_id: str
    manifest: Manifest
    _cache: dict = dc_field(default_factory=dict, repr=False)

    def get(self, kind: str, layer: int, head: int, timestep: int = 0) -> np.ndarray:
        key = (kind, layer, head, timestep)
        if key not in self._cache:
            for rec in self.manifest.records:
                if (rec.kind, rec.layer, rec.head, rec.timestep) == key:
                    self._cache[key] = load_tensor(self.manifest, rec.name)
                    break
            else:
                raise KeyError(f"bundle {self.image_id!r}: no tensor at {key}")
        return self._cache[key]

    def query_key_pairs(self) -> Iterator[tuple[TensorRecord, TensorRecord]]:
        """Yield (query, key) record pairs, sorted by (layer, head, timestep)."""
        by_sig = {
            (r.layer, r.head, r.timestep): r
            for r in self.manifest.records
            if r.kind == "key"
        }
        queries = sorted(
            (r for r in self.manifest.records if r.kind == "query"),
            key=lambda r: (r.layer, r.head, r.timestep),
        )
        for q in queries:
            yield q, by_sig[(q.layer, q.head, q.timestep)]

    def layers(self, kind: str = "query") -> list[int]:
        return sorted({r.layer for r in self.manifest.records if r.kind == kind})

    def heads(self, layer: int, kind: str = "query") -> list[int]:
        return sorted(
            {
                r.head
                for r in self.manifest.records
                if r.kind == kind and r.layer == layer
            }
        )

    def timesteps(self) -> list[int]:
        return sorted(
            {r.timestep for r in self.manifest.records if r.kind in ("query", "value")}
        )

    def grid_shape(self, layer: int, kind: str = "query") -> tuple[int, int]:
        for r in self.manifest.records:
            if r.kind == kind and r.layer == layer:
                return (r.shape[0], r.shape[1])
        raise KeyError(f"bundle {self.image_id!r}: no {kind!r} record at layer {layer}")


def load_bundle(path: str | Path) -> FeatureBundle:
    manifest = load_manifest(path)
    return FeatureBundle(image_id=manifest.image_id, manifest=manifest)


# ---------------------------------------------------------------------------
# Eigenfields
# ---------------------------------------------------------------------------


@dataclass
class EigenField:
    """The learnable field X: a (n_images*h0, w0, C) grid of channel values.

    For mini-batches the per-image grids are stacked along the first axis;
    ``grid_shape`` is always the per-image (h0, w0).
    """

    values: np.ndarray  # (n_images*h0, w0, C)
    grid_shape: tuple[int, int]
    n_images: int = 1
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self) -> None:
        h0, w0 = self.grid_shape
        expect = (self.n_images * h0, w0)
        if self.values.ndim != 3 or self.values.shape[:2] != expect:
            raise ValueError(
                f"field values shaped {self.values.shape}, expected "
                f"({expect[0]}, {expect[1]}, C)"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        """(n_images*h0*w0, C) row-major view of the values."""
        return self.values.reshape(-1, self.channels)

    def image(self, index: int) -> np.ndarray:
        """(h0, w0, C) values of one image in the stack."""
        h0 = self.grid_shape[0]
        return self.values[index * h0 : (index + 1) * h0]


def save_eigenfield(field: EigenField, path: str | Path) -> Path:
    """Write ``<path>.f32`` + ``<path>.json`` (path given without suffix pair).

    ``path`` may end in ``.eig``; the two files get ``.f32``/``.json`` added.
    """
    base = Path(path)
    if base.suffix == ".f32" or base.suffix == ".json":
        base = base.with_suffix("")
    arr = np.ascontiguousarray(field.values, dtype="<f4")
    base.with_suffix(base.suffix + ".f32").write_bytes(arr.tobytes())
    meta = {
        "shape": [field.grid_shape[0], field.grid_shape[1], field.channels],
        "n_images": field.n_images,
        "meta": _jsonable(field.meta),
    }
    base.with_suffix(base.suffix + ".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    return base


def load_eigenfield(path: str | Path) -> EigenField:
    base = Path(path)
    if base.suffix in (".f32", ".json"):
        base = base.with_suffix("")
    meta_path = base.with_suffix(base.suffix + ".json")
    blob_path = base.with_suffix(base.suffix + ".f32")
    if not meta_path.is_file() or not blob_path.is_file():
        raise FileNotFoundError(f"eigenfield pair not found at {base}.{{f32,json}}")
    doc = json.loads(meta_path.read_text())
    h0, w0, c = (int(v) for v in doc["shape"])
    n_images = int(doc.get("n_images", 1))
    data = np.fromfile(blob_path, dtype="<f4")
    expect = n_images * h0 * w0 * c
    if data.size != expect:
        raise StoreError(
            f"eigenfield blob {blob_path} holds {data.size} values, expected {expect}"
        )
    return EigenField(
        values=data.reshape(n_images * h0, w0, c).astype(np.float64),
        grid_shape=(h0, w0),
        n_images=n_images,
        meta=dict(doc.get("meta", {})),
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Segmentations
# ---------------------------------------------------------------------------


@dataclass
class SegmentationMap:
    """Hard label grid plus provenance of how it was produced."""

    labels: np.ndarray  # (h, w) ints in [0, K)
    K: int
    provenance: dict = dc_field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.K <= 0:
            raise ValueError(f"K must be positive, got {self.K}")
        labs = np.asarray(self.labels)
        if labs.size and (labs.min() < 0 or labs.max() >= self.K):
            raise ValueError(
                f"labels must lie in [0, {self.K}), got range "
                f"[{labs.min()}, {labs.max()}]"
            )


# Fixed palette so identical label maps produce byte-identical PNGs.
def _label_palette() -> list[int]:
    rng = np.random.default_rng(0x5EED)
    pal = rng.integers(0, 256, size=(256, 3))
    pal[0] = (0, 0, 0)
    return [int(v) for v in pal.ravel()]


def save_segmentation(seg: SegmentationMap, path: str | Path) -> Path:
    """Write labels as PNG (+ sidecar JSON); 16-bit grayscale when K > 256."""
    base = Path(path)
    if base.suffix == ".png":
        base = base.with_suffix("")
    png_path = base.with_suffix(base.suffix + ".png")
    labels = np.asarray(seg.labels)
    if seg.K > 256:
        img = Image.fromarray(labels.astype("<u2"))
    else:
        img = Image.fromarray(labels.astype(np.uint8), mode="P")
        img.putpalette(_label_palette())
    img.save(png_path, format="PNG")
    sidecar = {
        "K": seg.K,
        "shape": list(labels.shape),
        "bitdepth": 16 if seg.K > 256 else 8,
        "provenance": _jsonable(seg.provenance),
    }
    base.with_suffix(base.suffix + ".seg.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )
    return png_path


def load_segmentation(path: str | Path) -> SegmentationMap:
    base = Path(path)
    if base.suffix == ".png":
        base = base.with_suffix("")
    png_path = base.with_suffix(base.suffix + ".png")
    meta_path = base.with_suffix(base.suffix + ".seg.json")
    if not png_path.is_file():
        raise FileNotFoundError(f"segmentation PNG not found: {png_path}")
    labels = np.array(Image.open(png_path)).astype(np.int64)
    if meta_path.is_file():
        doc = json.loads(meta_path.read_text())
        k = int(doc["K"])
        prov = dict(doc.get("provenance", {}))
    else:
        k = int(labels.max()) + 1
        prov = {}
    return SegmentationMap(labels=labels, K=k, provenance=prov)


def load_label_grid(path: str | Path) -> np.ndarray:
    """Ground-truth label grid from a palette/grayscale PNG or a .seg pair."""
    p = Path(path)
    if p.suffix == ".png":
        return np.array(Image.open(p)).astype(np.int64)
    return load_segmentation(p).labels

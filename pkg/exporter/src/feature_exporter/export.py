"""Attention-feature and text-embedding export jobs.

One manifest per image. The CLS token is dropped before writing (the engine's
grids hold patch tokens only; recorded in manifest meta), token order is
row-major over the grid, and each record's embedding dimension is its
shape's d. Repeated timesteps are distinguished by a per-record noise seed
kept in manifest meta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from feature_exporter.models import ToyDiffusion, ToyTextEncoder, build_model
from feature_exporter.store_writer import MERGED_HEAD, ManifestWriter


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    model_id: str
    image_paths: list
    output_root: Path
    timesteps: list[int] = field(default_factory=lambda: [0])
    layers: list[int] | None = None  # None: all
    heads: list[int] | None = None  # None: all
    image_size: int = 32  # short side after resize (also crop size)
    seed: int = 0


def _load_image(path: Path, size: int) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    w, h = img.size
    scale = size / min(w, h)
    img = img.resize(
        (max(size, round(w * scale)), max(size, round(h * scale))), Image.BICUBIC
    )
    w, h = img.size
    left = (w - size) // 2
    top = (h - size) // 2
    img = img.crop((left, top, left + size, top + size))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1) * 2.0 - 1.0


def _capture_hooks(model):
    """Forward hooks copying each attention's Q/K/V into a shared dict."""
    captured: dict[int, tuple] = {}
    handles = []
    for idx, block in enumerate(model.blocks):

        def hook(module, args, output, idx=idx):
            if module.captured is None:
                raise RuntimeError("attention module captured nothing")
            captured[idx] = module.captured
            module.captured = None

        handles.append(block.attn.register_forward_hook(hook))
    return captured, handles


def export_attention_features(job: ExportJob) -> list[Path]:
    """Write one validated manifest per image; returns their paths."""
    try:
        model = build_model(job.model_id, seed=job.seed)
    except KeyError:
        raise ExportError(f"unsupported model id {job.model_id!r}") from None
    is_diffusion = isinstance(model, ToyDiffusion)
    if not is_diffusion and any(t != 0 for t in job.timesteps):
        raise ExportError(
            f"model {job.model_id!r} is static; timesteps must all be 0"
        )

    torch.set_num_threads(1)  # keeps reductions reproducible
    layer_filter = set(job.layers) if job.layers is not None else None
    head_filter = set(job.heads) if job.heads is not None else None

    manifest_paths = []
    for path in job.image_paths:
        path = Path(path)
        if not path.is_file():
            raise ExportError(f"image not found: {path}")
        image = _load_image(path, job.image_size)

        writer = ManifestWriter(
            image_id=path.stem,
            model_name=job.model_id,
            image_size=(job.image_size, job.image_size),
            root=Path(job.output_root) / path.stem,
            meta={
                "cls_token": "dropped",
                "token_order": "row-major",
                "noise_seeds": {},
                "layer_provenance": [
                    f"{job.model_id}.blocks[{i}].attn" for i in range(model.depth)
                ],
            },
        )

        captured, handles = _capture_hooks(model)
        try:
            repeat_counts: dict[int, int] = {}
            for timestep in job.timesteps:
                repeat = repeat_counts.get(timestep, 0)
                repeat_counts[timestep] = repeat + 1
                noise_seed = job.seed * 100003 + timestep * 101 + repeat
                captured.clear()
                if is_diffusion:
                    final, grid = model(image, timestep=timestep, noise_seed=noise_seed)
                else:
                    final, grid = model(image)
                gh, gw = grid
                suffix = f"_r{repeat}" if repeat else ""
                for layer in range(model.depth):
                    if layer_filter is not None and layer not in layer_filter:
                        continue
                    try:
                        q, k, v = captured[layer]
                    except KeyError:
                        raise ExportError(
                            f"capture hook failure at layer {layer}"
                        ) from None
                    # drop CLS (token 0); remaining tokens raster the grid
                    q, k, v = q[1:], k[1:], v[1:]
                    for head in range(model.heads):
                        if head_filter is not None and head not in head_filter:
                            continue
                        for kind, tensor in (("query", q), ("key", k), ("value", v)):
                            name = f"{kind}_l{layer}_h{head}_t{timestep}{suffix}"
                            values = (
                                tensor[:, head].reshape(gh, gw, -1).cpu().numpy()
                            )
                            writer.add_tensor(
                                name, kind, layer, head, timestep, values
                            )
                            if is_diffusion:
                                writer.meta["noise_seeds"][name] = noise_seed
                name = f"final_feature_l{model.depth - 1}_t{timestep}{suffix}"
                writer.add_tensor(
                    name,
                    "final_feature",
                    model.depth - 1,
                    MERGED_HEAD,
                    timestep,
                    final.reshape(gh, gw, -1).cpu().numpy(),
                )
                if is_diffusion:
                    writer.meta["noise_seeds"][name] = noise_seed
        finally:
            for h in handles:
                h.remove()
        manifest_paths.append(writer.write())
    return manifest_paths


def export_text_embeddings(
    class_names: list[str],
    prompt_templates: list[str],
    output_root: Path,
    seed: int = 0,
) -> Path:
    """One L x d class-embedding record: per class, the unit-normalized mean
    over template embeddings. Returns the manifest path."""
    if not class_names:
        raise ExportError("empty class list")
    if not prompt_templates:
        raise ExportError("no prompt templates")
    encoder = ToyTextEncoder(seed=seed)
    vectors = []
    for name in class_names:
        embeds = [
            encoder.encode(t.format(name) if "{}" in t else f"{t} {name}")
            for t in prompt_templates
        ]
        mean = np.mean(embeds, axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise ExportError(f"class {name!r} produced a zero embedding")
        vectors.append(mean / norm)
    matrix = np.stack(vectors)  # (L, d)

    writer = ManifestWriter(
        image_id="class_embeddings",
        model_name="toy-text",
        image_size=(1, 1),
        root=Path(output_root) / "class_embeddings",
        meta={"classes": list(class_names), "n_templates": len(prompt_templates)},
    )
    writer.add_tensor(
        "class_embedding_t0",
        "class_embedding",
        0,
        MERGED_HEAD,
        0,
        matrix.reshape(len(class_names), 1, -1),
    )
    return writer.write()

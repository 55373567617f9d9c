"""Command-line surface.

Commands: eigs-image, eigs-dataset, cluster, ncut, render, and eval
{oracle,semseg,coord,spatial,recall}. Every command resolves its full config,
writes it as a JSON sidecar next to the outputs before heavy work starts, and
emits metric reports as JSON with sorted keys so reruns are byte-identical.

Exit codes: 0 success, 1 computation failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from eigenfield import eigen_optimizer as eo
from eigenfield import evaluator, exact_spectral, graph_builder, segmenter
from eigenfield import tensor_store as ts


class InputError(Exception):
    """Bad usage or unreadable/invalid input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sidecar(out: Path, command: str, args: argparse.Namespace, skip=("config",)) -> None:
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "command") + tuple(skip)
    }
    _write_json(out.with_suffix(out.suffix + ".config.json"), {"command": command, **resolved})


def _report(args: argparse.Namespace, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if getattr(args, "out", None):
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")


def _need_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_field(path: str | Path) -> ts.EigenField:
    try:
        return ts.load_eigenfield(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc


def _find_manifests(paths: list[str]) -> list[Path]:
    found: list[Path] = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            found.extend(sorted(path.rglob("manifest.json")))
        elif path.is_file():
            found.append(path)
        else:
            raise InputError(f"manifest path not found: {path}")
    if not found:
        raise InputError("no manifests found")
    return found


# ---------------------------------------------------------------------------
# eigs-image
# ---------------------------------------------------------------------------


def cmd_eigs_image(args: argparse.Namespace) -> int:
    manifest_path = _need_file(args.manifest, "manifest")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _sidecar(out, "eigs-image", args)

    bundle = ts.load_bundle(manifest_path)
    mode = "independent_heads" if args.heads == "independent" else "concatenated"
    all_graphs = graph_builder.assemble_per_image_set(bundle, mode)
    by_t: dict[int, list] = {}
    for g in all_graphs:
        by_t.setdefault(g.tag.get("timestep", 0), []).append(g)
    timesteps = sorted(by_t)

    cfg = eo.PerImageConfig(
        channels=args.channels,
        iters=args.iters,
        lr=args.lr,
        seed=args.seed,
        buffer_size=args.buffer_size,
        new_sample_prob=args.new_sample_prob,
        accum_steps=args.accum,
    )
    if len(timesteps) == 1:
        provider = by_t[timesteps[0]]
    else:
        # diffusion-style: each draw picks one noise timestep's attention set
        def provider(rng: np.random.Generator):
            return by_t[timesteps[int(rng.integers(len(timesteps)))]]

    field = eo.optimize_per_image(provider, cfg)
    field.meta.update({"graph": "qk", "heads": args.heads, "id": bundle.image_id})
    ortho = eo.orthogonalize(field)

    ts.save_eigenfield(field, out.with_suffix(out.suffix + ".eig"))
    ts.save_eigenfield(ortho, Path(str(out) + "_ortho.eig"))
    print(
        f"optimized {bundle.image_id}: {len(all_graphs)} graphs, "
        f"final loss {field.meta['final_loss']:.6g}"
    )
    return 0


# ---------------------------------------------------------------------------
# eigs-dataset
# ---------------------------------------------------------------------------


def cmd_eigs_dataset(args: argparse.Namespace) -> int:
    manifests = _find_manifests(args.manifests)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _sidecar(out_dir / "dataset", "eigs-dataset", args)

    bundles = [ts.load_bundle(m) for m in manifests]
    cfg = eo.DatasetConfig(
        channels=args.channels,
        c_intra=args.c_intra,
        c_inter=args.c_inter,
        threshold=args.threshold,
        batch=args.batch,
        lr=args.lr,
        iters=args.iters,
        steps_per_batch=args.steps_per_batch,
        source=args.graph,
        seed=args.seed,
        layers=args.layers,
        max_resolution=(args.max_res, args.max_res),
    )
    fields = eo.optimize_dataset(bundles, cfg)
    ordered = [fields[b.image_id] for b in bundles]
    orthos = eo.orthogonalize_joint(ordered)
    for bundle, field, ortho in zip(bundles, ordered, orthos):
        field.meta["id"] = bundle.image_id
        ortho.meta["id"] = bundle.image_id
        ts.save_eigenfield(field, out_dir / f"{bundle.image_id}.eig")
        ts.save_eigenfield(ortho, out_dir / f"{bundle.image_id}_ortho.eig")
    print(f"optimized {len(bundles)} images ({args.graph} graph) -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------


def cmd_cluster(args: argparse.Namespace) -> int:
    field = _load_field(args.field)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _sidecar(out, "cluster", args)
    if "eigenvalues" not in field.meta:
        field = eo.orthogonalize(field)
    k_mode = "auto" if args.k == "auto" else int(args.k)
    seg = segmenter.segment_field(
        field, k_mode=k_mode, seed=args.seed, kmin=args.kmin, kmax=args.kmax
    )
    ts.save_segmentation(seg, out)
    print(f"K={seg.K} segmentation -> {out}.png")
    return 0


# ---------------------------------------------------------------------------
# ncut baseline
# ---------------------------------------------------------------------------


def _feature_graph(bundle: ts.FeatureBundle) -> graph_builder.AffinityGraph:
    recs = [r for r in bundle.manifest.records if r.kind == "final_feature"]
    if not recs:
        raise InputError(
            f"manifest {bundle.image_id!r} has no final_feature record"
        )
    rec = recs[-1]
    h, w, d = rec.shape
    feats = ts.load_tensor(bundle.manifest, rec.name).reshape(h * w, d)
    norms = np.linalg.norm(feats, axis=1)
    if (norms == 0).any():
        raise InputError("zero-norm feature vector; cannot build cosine graph")
    unit = feats / norms[:, None]
    A = np.clip(unit @ unit.T, 0.0, None)
    graph = graph_builder.AffinityGraph(
        matrix=A,
        grid_shapes=[(h, w)],
        image_offsets=np.array([0]),
        degrees=A.sum(axis=1),
        tag={"source": "features"},
    )
    graph.validate()
    return graph


def _attention_graph(bundle: ts.FeatureBundle) -> graph_builder.AffinityGraph:
    graphs = graph_builder.assemble_per_image_set(bundle, "independent_heads")
    last_layer = max(g.tag["layer"] for g in graphs)
    t0 = min(g.tag["timestep"] for g in graphs if g.tag["layer"] == last_layer)
    pick = [
        g
        for g in graphs
        if g.tag["layer"] == last_layer and g.tag["timestep"] == t0
    ]
    A = np.mean([g.matrix for g in pick], axis=0)
    graph = graph_builder.AffinityGraph(
        matrix=A,
        grid_shapes=pick[0].grid_shapes,
        image_offsets=np.array([0]),
        degrees=A.sum(axis=1),
        tag={"source": "attention", "layer": last_layer},
    )
    graph.validate()
    return graph


def cmd_ncut(args: argparse.Namespace) -> int:
    manifest_path = _need_file(args.manifest, "manifest")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _sidecar(out, "ncut", args)
    bundle = ts.load_bundle(manifest_path)
    graph = (
        _feature_graph(bundle) if args.source == "features" else _attention_graph(bundle)
    )
    pairs = exact_spectral.solve_ncut(graph, args.m)
    vectors = np.stack([p.vector for p in pairs], axis=1)
    h, w = graph.grid_shapes[0]
    if args.k == "auto":
        k, labels = segmenter.select_k(vectors, seed=args.seed)
    else:
        k = int(args.k)
        labels, _ = segmenter.kmeans(vectors, k, args.seed)
    seg = ts.SegmentationMap(
        labels=labels.reshape(h, w),
        K=k,
        provenance={"seed": args.seed, "k_mode": args.k, "method": "ncut", "m": args.m},
    )
    ts.save_segmentation(seg, out)
    _report(
        argparse.Namespace(out=str(out) + ".metrics.json"),
        {
            "m": args.m,
            "K": k,
            "eigenvalues": [p.value for p in pairs],
            "source": args.source,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


def cmd_render(args: argparse.Namespace) -> int:
    field = _load_field(args.field)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _sidecar(out, "render", args)
    try:
        idx = [int(v) for v in args.triplet.split(",")]
    except ValueError as exc:
        raise InputError(f"bad --triplet {args.triplet!r}: {exc}") from exc
    if len(idx) != 3:
        raise InputError("--triplet wants exactly three channel indices i,j,k")
    if max(idx) >= field.channels or min(idx) < 0:
        raise InputError(
            f"triplet {idx} out of range for {field.channels} channels"
        )
    h, w = field.values.shape[:2]
    rgb = np.zeros((h, w, 3))
    for slot, c in enumerate(idx):
        chan = field.values[:, :, c]
        lo, hi = float(chan.min()), float(chan.max())
        rgb[:, :, slot] = 0.5 if hi == lo else (chan - lo) / (hi - lo)
    img = Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB")
    img.save(out if out.suffix == ".png" else out.with_suffix(out.suffix + ".png"))
    print(f"rendered channels {idx} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval subcommands
# ---------------------------------------------------------------------------


def _load_labels(path: str | Path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".png":
        _need_file(p, "label grid")
        return ts.load_label_grid(p)
    try:
        return ts.load_segmentation(p).labels
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc


def cmd_eval_oracle(args: argparse.Namespace) -> int:
    pred = _load_labels(args.pred)
    gt = _load_labels(args.gt)
    miou = evaluator.oracle_decode_miou(pred, gt, ignore=args.ignore)
    _report(args, {"metric": "oracle_miou", "miou": miou})
    return 0


def cmd_eval_semseg(args: argparse.Namespace) -> int:
    pred = _load_labels(args.pred)
    gt = _load_labels(args.gt)
    miou = evaluator.matched_miou(pred, gt, mode=args.match, ignore=args.ignore)
    _report(args, {"metric": "semseg_miou", "match": args.match, "miou": miou})
    return 0


def cmd_eval_coord(args: argparse.Namespace) -> int:
    field = _load_field(args.field)
    h0, w0 = field.values.shape[:2]
    feats = field.values.reshape(h0, w0, field.channels)
    mse = evaluator.coord_regression(feats, grid=args.grid, split_seed=args.split_seed)
    _report(args, {"metric": "coord_mse", "grid": args.grid, "mse": mse})
    return 0


def cmd_eval_spatial(args: argparse.Namespace) -> int:
    gt = _load_labels(args.gt)
    smap = evaluator.gen_spatial_labels(
        gt, min_px=args.min_px, center_band=args.band, ignore=args.ignore
    )
    payload: dict = {
        "metric": "spatial_semseg",
        "min_px": args.min_px,
        "center_band": args.band,
        "labeled_px": int((smap.labels != evaluator.IGNORE).sum()),
        "ignored_px": int((smap.labels == evaluator.IGNORE).sum()),
        "spatial_classes": sorted(
            int(v) for v in np.unique(smap.labels) if v != evaluator.IGNORE
        ),
    }
    if args.pred:
        pred = _load_labels(args.pred)
        payload["match"] = args.match
        payload["miou"] = evaluator.matched_miou(
            pred, smap.labels, mode=args.match, ignore=evaluator.IGNORE
        )
    if args.out_labels:
        keep = smap.labels != evaluator.IGNORE
        encoded = np.where(keep, smap.labels, 2 * smap.n_classes)
        seg = ts.SegmentationMap(
            labels=encoded,
            K=2 * smap.n_classes + 1,
            provenance={"ignore_label": 2 * smap.n_classes},
        )
        ts.save_segmentation(seg, Path(args.out_labels))
    _report(args, payload)
    return 0


def _load_masks(spec: str) -> list[np.ndarray]:
    path = Path(spec)
    files = sorted(path.glob("*.png")) if path.is_dir() else [path]
    if not files or not all(f.is_file() for f in files):
        raise InputError(f"no mask PNGs at {spec}")
    return [np.array(Image.open(f)) > 0 for f in files]


def cmd_eval_recall(args: argparse.Namespace) -> int:
    proposals = _load_masks(args.proposals)
    gts = _load_masks(args.gt_instances)
    recall = evaluator.proposal_recall(proposals, gts, iou_thr=args.iou)
    _report(
        args,
        {
            "metric": "proposal_recall",
            "iou_thr": args.iou,
            "n_proposals": len(proposals),
            "n_gt": len(gts),
            "recall": recall,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eigenfield",
        description="Spectral clustering over sets of attention affinity graphs",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eigs-image", help="optimize one image's eigenfield")
    p.add_argument("--manifest", required=True)
    p.add_argument("--channels", type=int, default=10)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--heads", choices=("independent", "concat"), default="independent")
    p.add_argument("--buffer-size", type=int, default=5)
    p.add_argument("--new-sample-prob", type=float, default=0.25)
    p.add_argument("--accum", type=int, default=None,
                   help="gradient accumulation (default: 20 for multi-timestep manifests, else 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file of flag defaults")
    p.set_defaults(func=cmd_eigs_image)

    p = sub.add_parser("eigs-dataset", help="optimize per-image fields over a dataset")
    p.add_argument("--manifests", nargs="+", required=True)
    p.add_argument("--graph", choices=("qk", "vv"), default="vv")
    p.add_argument("--channels", type=int, default=50)
    p.add_argument("--batch", type=int, default=160)
    p.add_argument("--c-intra", type=int, default=10)
    p.add_argument("--c-inter", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--iters", type=int, default=2100)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--steps-per-batch", type=int, default=1)
    p.add_argument("--max-res", type=int, default=32)
    p.add_argument("--layers", type=int, nargs="*", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eigs_dataset)

    p = sub.add_parser("cluster", help="K-Means decode of an eigenfield")
    p.add_argument("--field", required=True)
    p.add_argument("--k", default="auto")
    p.add_argument("--kmin", type=int, default=2)
    p.add_argument("--kmax", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("ncut", help="exact normalized-cut baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--m", type=int, default=15)
    p.add_argument("--source", choices=("features", "attention"), default="features")
    p.add_argument("--k", default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ncut)

    p = sub.add_parser("render", help="render three channels as RGB")
    p.add_argument("--field", required=True)
    p.add_argument("--triplet", default="0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_render)

    ev = sub.add_parser("eval", help="metric reports")
    evsub = ev.add_subparsers(dest="eval_command", required=True)

    p = evsub.add_parser("oracle", help="oracle-decoded mIoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ignore", type=int, default=255)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval_oracle)

    p = evsub.add_parser("semseg", help="matched mIoU (greedy or Hungarian)")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--match", choices=("greedy", "hungarian"), default="greedy")
    p.add_argument("--ignore", type=int, default=255)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval_semseg)

    p = evsub.add_parser("coord", help="coordinate-regression MSE")
    p.add_argument("--field", required=True)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval_coord)

    p = evsub.add_parser("spatial", help="left/right spatial label protocol")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", default=None)
    p.add_argument("--match", choices=("greedy", "hungarian"), default="greedy")
    p.add_argument("--min-px", type=int, default=50)
    p.add_argument("--band", type=float, default=0.2)
    p.add_argument("--ignore", type=int, default=255)
    p.add_argument("--out-labels", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval_spatial)

    p = evsub.add_parser("recall", help="instance-proposal recall")
    p.add_argument("--proposals", required=True)
    p.add_argument("--gt-instances", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval_recall)

    return parser


def _apply_config_file(args: argparse.Namespace, argv: list[str]) -> argparse.Namespace:
    """Merge a JSON config file: flags given on argv win, unknown keys reject."""
    cfg_path = getattr(args, "config", None)
    if not cfg_path:
        return args
    path = _need_file(cfg_path, "config file")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError(f"config file {path} must hold a JSON object")
    allowed = {
        k for k in vars(args) if k not in ("func", "command", "eval_command", "config")
    }
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise InputError(f"unknown config keys {unknown}; allowed: {sorted(allowed)}")
    explicit = set()
    for token in argv:
        if token.startswith("--"):
            explicit.add(token[2:].split("=", 1)[0].replace("-", "_"))
    merged = dict(vars(args))
    for key, value in cfg.items():
        if key not in explicit:
            merged[key] = value
    return argparse.Namespace(**merged)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(args, argv)
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ts.StoreError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, graph_builder.GraphError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

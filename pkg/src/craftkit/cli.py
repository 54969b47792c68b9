"""Command-line interface over the run-directory file contract.

Commands populate an output directory incrementally: ``fit`` writes crops,
activations, the bank, and coefficients; ``importance`` adds
importance.json; ``explain`` fills heatmaps/; ``fidelity`` writes curve
CSVs; ``recurse`` adds a sub-bank directory; ``sanity`` compares banks from
trained and weight-randomized models. Exit codes: 0 success, 2 usage or
argument error, 3 data error, 4 numerical failure (non-convergence still
writes the flagged artifact).
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .core import Rng
from .errors import CraftError, DataError, NumericalError
from .nmf import NmfParams, fit_nmf
from .nnls import AdmmParams
from .npyio import load_npy, save_npy
from .pipeline import (ConceptBank, CropSpec, concept_attribution_map,
                       extract_crops, fidelity_curves, load_bank,
                       recursive_decompose, save_bank, select_class_set)
from .sobol import concept_importance, tcav_importance
from .toy import (load_backbone, make_synthetic_dataset, standard_backbone,
                  two_layer_backbone)

_EXIT_OK = 0
_EXIT_USAGE = 2
_EXIT_DATA = 3
_EXIT_NUMERICAL = 4


def _resolve_threads(value):
    if value is None:
        value = os.environ.get("CRAFT_KIT_THREADS", "1")
    try:
        threads = int(value)
    except (TypeError, ValueError):
        raise ValueError(f"--threads must be an integer, got {value!r}")
    if threads < 1:
        raise ValueError("--threads must be at least 1")
    return threads


def _load_model(spec_str, seed_override=None):
    """Resolve --model: 'toy:<seed>' (single layer), 'toy2:<seed>' (two
    layer), or a directory produced by save_backbone. Returns (model,
    default dataset seed)."""
    if spec_str is None:
        return None, seed_override
    if spec_str.startswith("toy:") or spec_str.startswith("toy2:"):
        scheme, _, seed_text = spec_str.partition(":")
        try:
            seed = int(seed_text)
        except ValueError:
            raise ValueError(f"bad toy model seed in {spec_str!r}")
        model = two_layer_backbone() if scheme == "toy2" else standard_backbone()
        return model, seed if seed_override is None else seed_override
    path = Path(spec_str)
    if not path.is_dir():
        raise ValueError(f"model directory {spec_str!r} does not exist")
    return load_backbone(path), seed_override


def _dataset_for(model, args, seed):
    data = make_synthetic_dataset(model, args.n_images, noise=args.noise,
                                  seed=seed if seed is not None else 0)
    return data.images


def _input_images(args, model, seed):
    if args.images is not None:
        return load_npy(Path(args.images))
    if model is None:
        raise ValueError("either --images or a --model able to generate data is required")
    return _dataset_for(model, args, seed)


def _json_dump(payload, path):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_fit(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, seed = _load_model(args.model, args.seed)
    rank = args.rank
    if rank is None:
        raise ValueError("--rank is required for fit")
    # externally supplied activation matrices are commonly exact fixtures,
    # so they are fit much tighter than statistical image-mode banks
    tol = 2e-7 if args.activations is not None else 1e-4
    nmf_params = NmfParams(rank=rank, outer_iters=args.outer_iters,
                           objective_tol=tol, admm=AdmmParams())

    if args.activations is not None:
        activations = load_npy(Path(args.activations))
        state = fit_nmf(activations, nmf_params)
        bank = ConceptBank(W=state.W, layer_tag=args.layer or "external", r=rank,
                           fit_objective=float(state.objective_trace[-1]),
                           column_norms=state.column_norms)
        coeffs = state.U
        save_npy(activations, out / "activations.npy")
        converged = state.converged
    else:
        if model is None:
            raise ValueError("fit needs --activations or --model")
        images = _input_images(args, model, seed)
        idx = select_class_set(model.predict(images), args.target_class)
        spec = CropSpec(mode=args.crop_mode, crop_fraction=args.crop_fraction,
                        crops_per_image=args.crops_per_image,
                        resize_to=tuple(model.input_shape[:2]),
                        seed=seed if seed is not None else 0)
        crops, provenance = extract_crops(images[idx], spec)
        for row in provenance:
            row["image"] = int(idx[row["image"]])
        activations = model.features(crops, layer=args.layer)
        state = fit_nmf(activations, nmf_params)
        tag = args.layer if args.layer else "final"
        bank = ConceptBank(W=state.W, layer_tag=tag, r=rank,
                           fit_objective=float(state.objective_trace[-1]),
                           column_norms=state.column_norms)
        coeffs = state.U
        save_npy(crops, out / "crops.npy")
        _json_dump(provenance, out / "provenance.json")
        save_npy(activations, out / "activations.npy")
        converged = state.converged

    save_bank(bank, out / "bank")
    save_npy(coeffs, out / "coeffs.npy")
    if not converged:
        print("fit: not converged within the outer budget; artifacts flagged",
              file=sys.stderr)
        meta = json.loads((out / "bank" / "meta.json").read_text())
        meta["converged"] = False
        _json_dump(meta, out / "bank" / "meta.json")
        return _EXIT_NUMERICAL
    return _EXIT_OK


def cmd_importance(args):
    out = Path(args.out)
    bank = load_bank(out / "bank")
    coeffs = load_npy(out / "coeffs.npy")
    if args.n_samples < 2:
        raise ValueError("--n-samples must be at least 2")
    model, _ = _load_model(args.model, args.seed)
    if model is None:
        raise ValueError("importance needs --model for head evaluations")
    estimate = concept_importance(coeffs, bank.W, model.head, args.n_samples,
                                  mu=args.mu)

    if args.gradients is not None:
        grads = load_npy(Path(args.gradients))
    else:
        grads = model.head_gradients(n=coeffs.shape[0])
    tcav = tcav_importance(grads, bank.W)

    records = []
    for i in range(bank.r):
        records.append({
            "concept_id": i,
            "total_sobol": float(estimate.total_indices[i]),
            "tcav": float(tcav[i]),
            "n_samples": estimate.n_samples,
            "degenerate": bool(estimate.degenerate),
        })
    _json_dump(records, out / "importance.json")
    return _EXIT_OK


def _heatmap_job(image, bank, model, concept, method, seed):
    return concept_attribution_map(image, bank, model, concept,
                                   method=method, seed=seed)


def cmd_explain(args):
    out = Path(args.out)
    bank = load_bank(out / "bank")
    model, seed = _load_model(args.model, args.seed)
    if model is None:
        raise ValueError("explain needs --model")
    images = _input_images(args, model, seed)
    index = args.image_index
    if not 0 <= index < len(images):
        raise ValueError(f"--image-index {index} out of range")
    concepts = [args.concept] if args.concept is not None else list(range(bank.r))
    (out / "heatmaps").mkdir(exist_ok=True)

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        futures = [pool.submit(_heatmap_job, images[index], bank, model, c,
                               args.method, seed if seed is not None else 0)
                   for c in concepts]
        heatmaps = [f.result() for f in futures]
    for concept, hm in zip(concepts, heatmaps):
        save_npy(hm.values, out / "heatmaps" / f"{index}_{concept}.npy")
    return _EXIT_OK


def cmd_fidelity(args):
    out = Path(args.out)
    bank = load_bank(out / "bank")
    coeffs = load_npy(out / "coeffs.npy")
    model, seed = _load_model(args.model, args.seed)
    if model is None:
        raise ValueError("fidelity needs --model for head evaluations")

    if args.ranking in ("sobol", "tcav"):
        importance_path = out / "importance.json"
        if not importance_path.exists():
            raise DataError("importance.json missing; run the importance command first")
        records = json.loads(importance_path.read_text())
        key = "total_sobol" if args.ranking == "sobol" else "tcav"
        values = [rec[key] for rec in sorted(records, key=lambda r: r["concept_id"])]
        if any(v is None for v in values):
            raise DataError(f"importance.json lacks {key} scores")
        importance = np.asarray(values, dtype=np.float64)
    else:
        gen = Rng(seed if seed is not None else 0, stream=23).generator()
        importance = gen.permutation(bank.r).astype(np.float64)

    curve = fidelity_curves(coeffs, bank.W, model.head, importance,
                            direction=args.direction, mu=args.mu,
                            ranking_source=args.ranking)
    parts = ["curves"]
    if args.ranking != "sobol":
        parts.append(args.ranking)
    if args.direction != "deletion":
        parts.append(args.direction)
    lines = ["fraction,mean_output"]
    for x, y in zip(curve.xs, curve.ys):
        lines.append(f"{x:.17g},{y:.17g}")
    (out / ("_".join(parts) + ".csv")).write_text("\n".join(lines) + "\n")
    return _EXIT_OK


def cmd_recurse(args):
    out = Path(args.out)
    bank = load_bank(out / "bank")
    coeffs = load_npy(out / "coeffs.npy")
    crops = load_npy(out / "crops.npy")
    model, _ = _load_model(args.model, args.seed)
    if model is None:
        raise ValueError("recurse needs --model")
    if args.concept is None:
        raise ValueError("--concept is required for recurse")
    r_sub = args.rank_sub or 2
    sub_bank, u_sub, selected = recursive_decompose(
        bank, coeffs, args.concept, crops,
        lambda batch: model.features(batch, layer=1), r_sub,
        nmf_params=NmfParams(rank=r_sub, outer_iters=args.outer_iters,
                             objective_tol=1e-4),
        layer_tag="layer1")
    sub_dir = out / f"bank_concept{args.concept}"
    save_bank(sub_bank, sub_dir)
    save_npy(u_sub, out / f"coeffs_concept{args.concept}.npy")
    _json_dump([int(i) for i in selected], out / f"selected_concept{args.concept}.json")
    return _EXIT_OK


def _principal_angles(W1, W2):
    q1, _ = np.linalg.qr(W1)
    q2, _ = np.linalg.qr(W2)
    sigma = np.linalg.svd(q1.T @ q2, compute_uv=False)
    return np.arccos(np.clip(sigma, -1.0, 1.0))


def cmd_sanity(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, seed = _load_model(args.model, args.seed)
    if model is None:
        raise ValueError("sanity needs --model")
    seed = seed if seed is not None else 0
    images = _input_images(args, model, seed)
    rank = args.rank or 2
    nmf_params = NmfParams(rank=rank, outer_iters=args.outer_iters,
                           objective_tol=1e-4)
    spec = CropSpec(mode=args.crop_mode, crop_fraction=args.crop_fraction,
                    crops_per_image=args.crops_per_image,
                    resize_to=tuple(model.input_shape[:2]), seed=seed)

    crops, _ = extract_crops(images, spec)

    def fit_bank_for(m):
        state = fit_nmf(m.features(crops, layer=args.layer), nmf_params)
        return state.W

    trained = fit_bank_for(model)
    randomized = fit_bank_for(model.randomize_weights(seed))
    angles = _principal_angles(trained, randomized)
    _json_dump({
        "seed": seed,
        "rank": rank,
        "principal_angles_rad": [float(a) for a in angles],
        "max_angle_rad": float(angles.max()),
    }, out / "sanity.json")
    return _EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="craftkit",
        description="Concept extraction, importance, attribution, and fidelity "
                    "over a run-directory file contract.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", help="toy:<seed>, toy2:<seed>, or a model directory")
        p.add_argument("--activations", help="precomputed activations NPY (n x p)")
        p.add_argument("--images", help="image stack NPY (n, H, W, C)")
        p.add_argument("--class", dest="target_class", type=int, default=1,
                       help="model-predicted class that defines the fit set")
        p.add_argument("--rank", type=int, help="number of concepts")
        p.add_argument("--n-samples", type=int, default=1024,
                       help="pick-freeze block size for importance")
        p.add_argument("--seed", type=int, help="seed for data generation and masks")
        p.add_argument("--crop-fraction", type=float, default=0.5)
        p.add_argument("--crops-per-image", type=int, default=8)
        p.add_argument("--crop-mode", choices=("grid", "random"), default="grid")
        p.add_argument("--mu", type=float, default=0.0,
                       help="baseline value for concept removal")
        p.add_argument("--ranking", choices=("sobol", "tcav", "random"),
                       default="sobol")
        p.add_argument("--method", choices=("gradient", "smoothgrad", "occlusion"),
                       default="gradient")
        p.add_argument("--threads", default=None,
                       help="worker cap (default: CRAFT_KIT_THREADS or 1)")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--n-images", type=int, default=200,
                       help="synthetic dataset size when generating data")
        p.add_argument("--noise", type=float, default=0.02,
                       help="synthetic dataset noise amplitude")
        p.add_argument("--layer", help="feature layer tag (default: final)")
        p.add_argument("--concept", type=int, help="concept index")
        p.add_argument("--rank-sub", type=int, help="sub-bank rank for recurse")
        p.add_argument("--image-index", type=int, default=0)
        p.add_argument("--direction", choices=("deletion", "insertion"),
                       default="deletion")
        p.add_argument("--gradients", help="head-gradient NPY (n x p) for TCAV")
        p.add_argument("--outer-iters", type=int, default=200)

    commands = [
        ("fit", cmd_fit, "fit a concept bank on class crops or a matrix"),
        ("importance", cmd_importance, "score concepts with total Sobol' indices"),
        ("explain", cmd_explain, "write concept attribution heatmaps"),
        ("fidelity", cmd_fidelity, "deletion/insertion curve for a ranking"),
        ("recurse", cmd_recurse, "refine one concept at an earlier layer"),
        ("sanity", cmd_sanity, "compare banks from trained vs randomized weights"),
    ]
    for name, fn, about in commands:
        p = sub.add_parser(name, help=about, description=about)
        common(p)
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.threads = _resolve_threads(args.threads)
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return _EXIT_NUMERICAL
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _EXIT_DATA
    except CraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

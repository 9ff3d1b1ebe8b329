"""Command-line pipeline: build prototype banks, score query manifests,
evaluate AUROC, generate synthetic datasets, and benchmark.

Exit codes: 0 success, 2 usage error, 3 data error.  Data errors print one
machine-parseable JSON line on stderr: {"error": <class>, "detail": <message>}.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .coreset import CoresetConfig, select_coreset
from .errors import FastrefError, InvalidInputError, UndefinedMetricError
from .eval import LabeledScores, auroc, bench_refine
from .ot import SinkhornConfig
from .refine import (
    BankGram,
    RefineConfig,
    default_lambda,
    refine_and_score,
    ttt_refine,
)
from .scoring import (
    DEFAULT_SIGMA,
    ScoreMap,
    combine_zero_shot,
    gaussian_smooth,
    image_score,
    score_map,
    upsample_bilinear,
)
from .tensor_io import (
    COSINE,
    EUCLIDEAN,
    FeatureMap,
    FlatFeatures,
    ManifestEntry,
    flatten_map,
    read_manifest,
    read_tensor,
    write_manifest,
    write_tensor,
)

BASELINES = ("none", "lstsq", "ttt")


def _epsilon_arg(value: str):
    if value == "auto":
        return None
    try:
        eps = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--epsilon wants a float or 'auto', got {value!r}")
    if eps <= 0:
        raise argparse.ArgumentTypeError("--epsilon must be positive")
    return eps


def _add_refine_flags(sp: argparse.ArgumentParser, baseline_default: str) -> None:
    sp.add_argument("--metric", choices=(EUCLIDEAN, COSINE), default=EUCLIDEAN)
    sp.add_argument("--lambda", dest="lam", type=float, default=None,
                    help="balance coefficient (default 0.3 euclidean / 0.1 cosine)")
    sp.add_argument("--outer-iters", type=int, default=2)
    sp.add_argument("--sinkhorn-iters", type=int, default=10)
    sp.add_argument("--epsilon", type=_epsilon_arg, default=None,
                    help="entropic regularization, a float or 'auto' (default auto)")
    sp.add_argument("--ridge", type=float, default=1e-6)
    sp.add_argument("--sigma", type=float, default=DEFAULT_SIGMA,
                    help="Gaussian smoothing sigma for output maps; 0 disables")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--baseline", choices=BASELINES, default=baseline_default)
    sp.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastref",
        description="Prototype refinement pipeline for few-shot anomaly detection "
                    "on pre-extracted feature tensors.",
    )
    parser.add_argument("--version", action="version", version=f"fastref {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("build-prototypes",
                        help="subsample support tensors into a prototype bank")
    sp.add_argument("manifest", help="JSON-lines manifest of support tensors")
    sp.add_argument("--out", required=True, help="output bank FTZ path")
    sp.add_argument("--metric", choices=(EUCLIDEAN, COSINE), default=EUCLIDEAN)
    sp.add_argument("--ratio", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--start-rule", choices=("seeded_random", "index_zero"),
                    default="seeded_random")

    sp = sub.add_parser("score", help="refine per query and write score maps + scores.json")
    sp.add_argument("bank", help="prototype bank FTZ")
    sp.add_argument("manifest", help="JSON-lines manifest of query tensors")
    sp.add_argument("--out", required=True, help="output directory")
    _add_refine_flags(sp, baseline_default="none")

    sp = sub.add_parser("baseline",
                        help="like score, but defaults to a baseline refiner")
    sp.add_argument("bank")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    _add_refine_flags(sp, baseline_default="lstsq")

    sp = sub.add_parser("eval", help="image/pixel AUROC from scores.json + manifest")
    sp.add_argument("scores", help="scores.json produced by the score command")
    sp.add_argument("manifest", help="the manifest the scores were computed from")
    sp.add_argument("--out", default=None, help="report JSON path (default stdout)")

    sp = sub.add_parser("synth", help="emit a synthetic planted-outlier dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--support", type=int, default=1, help="number of support images")
    sp.add_argument("--num-normal", type=int, default=8)
    sp.add_argument("--num-anomalous", type=int, default=8)
    sp.add_argument("--grid", type=int, nargs=2, default=(8, 8), metavar=("H", "W"))
    sp.add_argument("--channels", type=int, default=16)
    sp.add_argument("--outliers", type=int, default=4,
                    help="planted patches per anomalous image")
    sp.add_argument("--shift", type=float, default=6.0)
    sp.add_argument("--upscale", type=int, default=1,
                    help="image_hw = grid * upscale")

    sp = sub.add_parser("bench", help="wall-time benchmark of refine+score")
    sp.add_argument("--m", type=int, default=1024)
    sp.add_argument("--n", type=int, default=102)
    sp.add_argument("--c", type=int, default=640)
    sp.add_argument("--outer-iters", type=int, default=2)
    sp.add_argument("--sinkhorn-iters", type=int, default=10)
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", default=None, help="report JSON path (default stdout)")
    return parser


def _load_flat(path: Path) -> tuple[FlatFeatures, tuple[int, int]]:
    tensor = read_tensor(path)
    if isinstance(tensor, FeatureMap):
        return flatten_map(tensor), (tensor.height, tensor.width)
    return tensor, (1, tensor.rows)


def _resolve_paths(manifest_path: str, entries: list[ManifestEntry]):
    base = Path(manifest_path).parent
    for entry in entries:
        tensor = Path(entry.tensor)
        mask = Path(entry.mask) if entry.mask else None
        yield entry, (tensor if tensor.is_absolute() else base / tensor), (
            mask if mask is None or mask.is_absolute() else base / mask
        )


def cmd_build_prototypes(args) -> int:
    entries = read_manifest(args.manifest)
    if not entries:
        raise InvalidInputError(f"{args.manifest}: empty manifest")
    blocks = []
    for _, tensor_path, _ in _resolve_paths(args.manifest, entries):
        flat, _ = _load_flat(tensor_path)
        blocks.append(flat.data)
    channels = {b.shape[1] for b in blocks}
    if len(channels) != 1:
        raise InvalidInputError(f"support tensors disagree on channels: {sorted(channels)}")
    stacked = np.concatenate(blocks, axis=0)
    config = CoresetConfig(ratio=args.ratio, seed=args.seed, start_rule=args.start_rule)
    bank, _ = select_coreset(stacked, config, metric_mode=args.metric)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(bank.data, out)
    print(json.dumps({
        "bank": str(out),
        "count": bank.count,
        "channels": bank.channels,
        "metric": args.metric,
        "source_rows": int(stacked.shape[0]),
    }, sort_keys=True))
    return 0


def _score_one(flat, grid, bank_f32, gram, config, args):
    if args.baseline == "ttt":
        query = flat.data.astype(np.float64)
        bank = bank_f32.astype(np.float64)
        if config.metric_mode == COSINE:
            query = query / np.linalg.norm(query, axis=1, keepdims=True)
            bank = bank / np.linalg.norm(bank, axis=1, keepdims=True)
        refined, _ = ttt_refine(query, bank, lam=config.lam, ridge=config.ridge)
        smap = score_map(query, refined, config.metric_mode, grid)
        return smap, image_score(smap)
    if args.baseline == "lstsq":
        config = RefineConfig(
            lam=0.0, outer_iters=1, sinkhorn=config.sinkhorn,
            ridge=config.ridge, metric_mode=config.metric_mode,
        )
    scored = refine_and_score(flat.data, bank_f32, config, grid=grid, gram=gram)
    return ScoreMap.from_array(scored.patch_scores), scored.image_score


def cmd_score(args) -> int:
    entries = read_manifest(args.manifest)
    if not entries:
        raise InvalidInputError(f"{args.manifest}: empty manifest")
    bank_tensor = read_tensor(args.bank)
    if not isinstance(bank_tensor, FlatFeatures):
        raise InvalidInputError(f"{args.bank}: prototype bank must be a rank-2 tensor")
    bank_f32 = bank_tensor.data
    lam = args.lam if args.lam is not None else default_lambda(args.metric)
    config = RefineConfig(
        lam=lam,
        outer_iters=args.outer_iters,
        sinkhorn=SinkhornConfig(epsilon=args.epsilon, max_inner_iters=args.sinkhorn_iters),
        ridge=args.ridge,
        metric_mode=args.metric,
    )
    bank64 = bank_f32.astype(np.float64)
    if args.metric == COSINE:
        norms = np.linalg.norm(bank64, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise InvalidInputError("cosine mode cannot normalize a zero bank row")
        bank64 = bank64 / norms
    gram = BankGram(bank64, args.ridge)

    out_dir = Path(args.out)
    maps_dir = out_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)

    resolved = list(_resolve_paths(args.manifest, entries))

    def work(item):
        idx, (entry, tensor_path, _) = item
        flat, grid = _load_flat(tensor_path)
        if flat.channels != bank_f32.shape[1]:
            raise InvalidInputError(
                f"{tensor_path}: channels {flat.channels} != bank channels {bank_f32.shape[1]}"
            )
        smap, max_patch = _score_one(flat, grid, bank_f32, gram, config, args)
        score = max_patch
        if entry.s0 is not None and args.metric == COSINE:
            score = combine_zero_shot(entry.s0, smap)
        target = tuple(entry.image_hw)
        out_map = smap
        if target[0] >= smap.height and target[1] >= smap.width and target != (0, 0):
            out_map = upsample_bilinear(smap, target)
        if args.sigma > 0.0:
            out_map = gaussian_smooth(out_map, args.sigma)
        map_name = f"{idx:05d}_{Path(entry.tensor).stem}.score.ftz"
        write_tensor(out_map.data.astype(np.float32), maps_dir / map_name)
        record = {
            "tensor": entry.tensor,
            "label": entry.label,
            "mask": entry.mask,
            "map": f"maps/{map_name}",
            "score": score,
            "max_patch_score": max_patch,
        }
        if entry.s0 is not None:
            record["s0"] = entry.s0
        return idx, record

    items = list(enumerate(resolved))
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(item) for item in items]
    results.sort(key=lambda pair: pair[0])

    payload = {
        "config": {
            "bank": args.bank,
            "metric": args.metric,
            "lambda": lam,
            "outer_iters": args.outer_iters,
            "sinkhorn_iters": args.sinkhorn_iters,
            "epsilon": args.epsilon if args.epsilon is not None else "auto",
            "ridge": args.ridge,
            "sigma": args.sigma,
            "seed": args.seed,
            "baseline": args.baseline,
            "threads": args.threads,
        },
        "images": [rec for _, rec in results],
    }
    (out_dir / "scores.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(json.dumps({"scores": str(out_dir / "scores.json"), "images": len(results)},
                     sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    payload = json.loads(Path(args.scores).read_text())
    entries = {e.tensor: e for e in read_manifest(args.manifest)}
    scores_dir = Path(args.scores).parent
    manifest_dir = Path(args.manifest).parent

    image_scores, image_labels = [], []
    pixel_scores, pixel_labels = [], []
    errors = []
    for rec in payload.get("images", []):
        tensor = rec["tensor"]
        entry = entries.get(tensor)
        if entry is None:
            raise InvalidInputError(f"{tensor}: image in scores.json missing from manifest")
        image_scores.append(float(rec["score"]))
        image_labels.append(entry.label)
        map_path = scores_dir / rec["map"]
        smap = read_tensor(map_path)
        if not isinstance(smap, FlatFeatures):
            raise InvalidInputError(f"{map_path}: score map must be a rank-2 tensor")
        if entry.mask is not None:
            mask_path = Path(entry.mask)
            mask_path = mask_path if mask_path.is_absolute() else manifest_dir / mask_path
            mask = read_tensor(mask_path)
            if not isinstance(mask, FlatFeatures):
                raise InvalidInputError(f"{mask_path}: mask must be a rank-2 tensor")
            if mask.data.shape != smap.data.shape:
                raise InvalidInputError(
                    f"{mask_path}: mask shape {mask.data.shape} != map shape {smap.data.shape}"
                )
            labels = (mask.data > 0.5).astype(np.int64).ravel()
        else:
            labels = np.zeros(smap.data.size, dtype=np.int64)
        pixel_scores.append(smap.data.ravel())
        pixel_labels.append(labels)

    report: dict = {
        "num_images": len(image_scores),
        "image_auroc": None,
        "pixel_auroc": None,
        "num_pixels": int(sum(p.size for p in pixel_scores)),
    }
    try:
        report["image_auroc"] = auroc(LabeledScores(np.array(image_scores), np.array(image_labels)))
    except (UndefinedMetricError, InvalidInputError) as exc:
        errors.append(f"image_auroc: {exc}")
    try:
        report["pixel_auroc"] = auroc(
            LabeledScores(np.concatenate(pixel_scores), np.concatenate(pixel_labels))
        )
    except (UndefinedMetricError, InvalidInputError) as exc:
        errors.append(f"pixel_auroc: {exc}")
    if errors:
        report["errors"] = errors
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if errors:
        raise UndefinedMetricError("; ".join(errors))
    return 0


def cmd_synth(args) -> int:
    h, w = args.grid
    c = args.channels
    if min(h, w, c, args.upscale) <= 0:
        raise InvalidInputError("grid, channels and upscale must be positive")
    m = h * w
    if args.outliers >= m:
        raise InvalidInputError("outliers per image must be < grid cells")
    if args.support < 1:
        raise InvalidInputError("need at least one support image")
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    (out / "support").mkdir(parents=True, exist_ok=True)
    (out / "query").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    image_hw = (h * args.upscale, w * args.upscale)

    support_entries = []
    for i in range(args.support):
        data = rng.standard_normal((h, w, c)).astype(np.float32)
        rel = f"support/s{i:04d}.ftz"
        write_tensor(data, out / rel)
        support_entries.append(ManifestEntry(rel, 0, None, image_hw))
    write_manifest(support_entries, out / "support.jsonl")

    query_entries = []
    for i in range(args.num_normal + args.num_anomalous):
        anomalous = i >= args.num_normal
        data = rng.standard_normal((m, c))
        mask_rel = None
        if anomalous and args.outliers > 0:
            cells = rng.choice(m, size=args.outliers, replace=False)
            data[cells, 0] += args.shift
            mask = np.zeros((h, w), dtype=np.float32)
            mask[np.unravel_index(cells, (h, w))] = 1.0
            mask = np.kron(mask, np.ones((args.upscale, args.upscale), dtype=np.float32))
            mask_rel = f"masks/q{i:04d}_mask.ftz"
            write_tensor(mask, out / mask_rel)
        rel = f"query/q{i:04d}.ftz"
        write_tensor(data.reshape(h, w, c).astype(np.float32), out / rel)
        query_entries.append(ManifestEntry(rel, int(anomalous), mask_rel, image_hw))
    write_manifest(query_entries, out / "query.jsonl")
    print(json.dumps({
        "out": str(out),
        "support": args.support,
        "normal": args.num_normal,
        "anomalous": args.num_anomalous,
        "grid": [h, w],
        "channels": c,
    }, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    report = bench_refine(
        m=args.m, n=args.n, c=args.c,
        outer_iters=args.outer_iters,
        inner_iters=args.sinkhorn_iters,
        repeats=args.repeats,
        seed=args.seed,
        threads=args.threads,
    )
    text = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


_COMMANDS = {
    "build-prototypes": cmd_build_prototypes,
    "score": cmd_score,
    "baseline": cmd_score,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FastrefError, FileNotFoundError, OSError, json.JSONDecodeError) as exc:
        line = json.dumps({"error": type(exc).__name__, "detail": str(exc)})
        print(line, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: corpus generation, two-stage training, grounding and
retrieval evaluation, ad-hoc queries, and explanation scoring.

Every command writes a run directory: manifest.json (command echo, seeds,
input/output hashes, duration), config.json, and outputs/ with the artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .corpus import (CorpusFormatError, Finding, corpus_meta, default_layout,
                     DEFAULT_DISEASES, finding_description, gen_corpus, load_corpus,
                     load_corpus_meta, region_query_tokens, save_corpus, split_corpus)
from .explain import (BackendError, ExplainError, RemoteBackend, evaluate_explainability,
                      stub_for_meta)
from .grounding import GroundingError, evaluate_grounding, save_heatmap, similarity_map
from .losses import LossConfig
from .mining import MiningError
from .model import (CheckpointError, VisionLanguageModel, build_model,
                    load_checkpoint, save_checkpoint)
from .retrieval import (IndexFormatError, build_index, evaluate_cross_modal,
                        evaluate_lcmmr, query as index_query)
from .trainer import TrainConfig, TrainingError, train_stage1, train_stage2

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_FORMAT = 4
EXIT_BACKEND = 5


class CliError(RuntimeError):
    exit_code = EXIT_ERROR


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing input file: {p}")
    return p


class RunDir:
    """Run-directory bookkeeping: config echo, hashed inputs/outputs, manifest."""

    def __init__(self, out: str, command: str, args: argparse.Namespace):
        self.root = Path(out)
        self.outputs = self.root / "outputs"
        self.outputs.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.args = args
        self.inputs: dict[str, str] = {}
        self.started = time.monotonic()
        config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        _write_json(self.root / "config.json", config)

    def note_input(self, path: Path) -> Path:
        self.inputs[str(path)] = _sha256(path)
        return path

    def finish(self) -> None:
        outputs = {str(p.relative_to(self.root)): _sha256(p)
                   for p in sorted(self.outputs.rglob("*")) if p.is_file()}
        manifest = {
            "command": self.command,
            "argv": sys.argv[1:],
            "config": {k: v for k, v in sorted(vars(self.args).items()) if k != "func"},
            "inputs": self.inputs,
            "outputs": outputs,
            "duration_seconds": round(time.monotonic() - self.started, 3),
        }
        _write_json(self.root / "manifest.json", manifest)


def _load_model(run: RunDir, path: str) -> VisionLanguageModel:
    return load_checkpoint(run.note_input(_require(path)))


def _load_split(run: RunDir, path: str):
    p = run.note_input(_require(path))
    return load_corpus(p), load_corpus_meta(p)


def cmd_gen(args) -> int:
    run = RunDir(args.out, "gen", args)
    layout = default_layout(args.image_size)
    diseases = tuple(args.diseases.split(","))
    meta = corpus_meta(layout, diseases)
    total = args.n_train + args.n_test
    samples = gen_corpus(layout, diseases, total, args.normal_fraction, args.seed)
    train, test = split_corpus(samples, args.n_train / total, args.split_seed)
    save_corpus(train, run.outputs / "train.jsonl", meta)
    save_corpus(test, run.outputs / "test.jsonl", meta)
    _write_json(run.outputs / "gen_summary.json", {
        "n_train": len(train), "n_test": len(test),
        "n_normal": sum(1 for s in samples if s.findings[0].is_normal),
        "diseases": list(diseases), "regions": list(layout.names),
    })
    run.finish()
    print(f"wrote {len(train)} train / {len(test)} test samples under {run.outputs}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunDir(args.out, "train", args)
    samples, meta = _load_split(run, args.corpus)
    loss = LossConfig(tau_g=args.tau_g, tau_l=args.tau_l, beta=args.beta,
                      margin=args.margin)
    kwargs = dict(stage=args.stage, epochs=args.epochs, batch_size=args.batch_size,
                  seed=args.seed, flip_augment=args.flip_augment,
                  hard_region_negatives=args.hard_region_negatives, loss=loss)
    if args.lr is not None:
        kwargs.update(lr_attention=args.lr, lr_encoders=args.lr)
    config = (TrainConfig.paper(**kwargs) if args.preset == "paper"
              else TrainConfig(**kwargs))
    if args.init_checkpoint:
        model = _load_model(run, args.init_checkpoint)
    else:
        model = build_model(meta, seed=args.seed)
    if args.stage == 1:
        model, report = train_stage1(config, samples, model, meta.vocab)
    else:
        model, report = train_stage2(config, samples, model, meta.vocab)
    ckpt = run.outputs / "checkpoint.pt"
    save_checkpoint(model, ckpt)
    report.write_log(run.outputs / "train_log.jsonl")
    _write_json(run.outputs / "train_report.json", {
        "stage": report.stage, "seed": report.seed, "epochs": report.epochs,
        "steps_per_epoch": report.steps_per_epoch,
        "first_loss": report.curves[0]["loss"], "final_loss": report.final_loss(),
    })
    run.finish()
    print(f"stage {args.stage} done: loss {report.curves[0]['loss']:.4f} -> "
          f"{report.final_loss():.4f}; checkpoint at {ckpt}")
    return EXIT_OK


def cmd_eval_grounding(args) -> int:
    run = RunDir(args.out, "eval-grounding", args)
    samples, meta = _load_split(run, args.corpus)
    model = _load_model(run, args.checkpoint)
    boxed = [s for s in samples if s.boxes]
    if not boxed:
        raise GroundingError("corpus has no samples with ground-truth boxes")
    seeds = [int(s) for s in args.seeds.split(",")]
    result = evaluate_grounding(model, meta.vocab, boxed, seeds=seeds)
    _write_json(run.outputs / "grounding.json", {
        "miou": result.miou, "miou_std": result.miou_std,
        "mean_cnr": result.mean_cnr, "cnr_std": result.cnr_std,
        "baseline_miou": result.baseline_miou,
        "thresholds": list(result.thresholds), "seeds": list(result.seeds),
        "n_maps": len(result.records),
    })
    with open(run.outputs / "grounding_records.jsonl", "w", encoding="utf-8") as fh:
        for record in result.records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    for s in boxed[:args.heatmaps]:
        for i, (finding, _box) in enumerate(s.boxes):
            from .corpus import finding_phrase_tokens

            sim = similarity_map(model, s.image, finding_phrase_tokens(meta.vocab, finding),
                                 sample_id=s.id, phrase=finding_description(finding))
            save_heatmap(sim, run.outputs / f"heatmap_{s.id}_{i}.png",
                         run.outputs / f"heatmap_{s.id}_{i}.npy")
    run.finish()
    print(f"mIoU {result.miou:.4f} (baseline {result.baseline_miou:.4f}), "
          f"CNR {result.mean_cnr:.4f}")
    return EXIT_OK


def cmd_eval_retrieval(args) -> int:
    run = RunDir(args.out, "eval-retrieval", args)
    samples, meta = _load_split(run, args.corpus)
    model = _load_model(run, args.checkpoint)
    levels = ["region", "global"] if args.level == "both" else [args.level]
    payload = {}
    for level in levels:
        metrics = evaluate_lcmmr(model, meta.vocab, samples, level)
        payload[level] = metrics.to_json()
        print(f"{level}: Rank@1 {metrics.precision_at[1]:.2f}, "
              f"mAP {metrics.map:.2f} ({metrics.n_queries} queries)")
    if args.cross_modal:
        for direction in ("image2report", "report2image"):
            metrics = evaluate_cross_modal(model, samples, direction)
            payload[direction] = metrics.to_json()
            print(f"{direction}: hit-rate@5 {metrics.hitrate_at[5]:.2f}")
    _write_json(run.outputs / "retrieval.json", payload)
    run.finish()
    return EXIT_OK


def _load_query_image(run: RunDir, value: str, samples) -> np.ndarray:
    path = Path(value)
    if path.exists():
        run.note_input(path)
        if path.suffix == ".npy":
            return np.load(path).astype(np.float32)
        from PIL import Image

        return (np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0)
    by_id = {s.id: s for s in samples}
    if value in by_id:
        return by_id[value].image
    raise FileNotFoundError(f"--image '{value}' is neither a file nor a sample id")


def cmd_query(args) -> int:
    run = RunDir(args.out, "query", args)
    samples, meta = _load_split(run, args.corpus)
    model = _load_model(run, args.checkpoint)
    image = _load_query_image(run, args.image, samples)
    if args.region not in meta.layout.names:
        raise CliError(f"unknown region '{args.region}'; "
                       f"expected one of {', '.join(meta.layout.names)}")
    index = build_index(model, meta.vocab, samples, "region-query")
    condition = Finding(region=args.region, disease=args.disease) \
        if args.disease else None
    tokens = region_query_tokens(
        meta.vocab, condition if condition is not None
        else Finding(region=args.region, disease=meta.diseases[0]))
    from .mining import embed_region_query

    embedding = embed_region_query(model, image, tokens, sample_id="query",
                                   condition=condition)
    if args.k > len(index):
        print(f"warning: k={args.k} exceeds index size {len(index)}; "
              "returning the full ranking")
    gallery = index_query(index, embedding.vector, min(args.k, len(index)),
                          query_id="query", condition=condition)
    by_id = {s.id: s for s in samples}
    rows = []
    for rank, item in enumerate(gallery.items, start=1):
        rows.append({
            "rank": rank, "entry_id": item.entry.entry_id,
            "sample_id": item.entry.sample_id, "score": item.score,
            "condition": None if item.entry.condition is None
            else finding_description(item.entry.condition),
        })
        if args.thumbnails:
            from PIL import Image

            img = by_id[item.entry.sample_id].image
            Image.fromarray((img * 255).round().astype(np.uint8), mode="L").save(
                run.outputs / f"rank{rank:02d}_{item.entry.sample_id}.png")
    _write_json(run.outputs / "gallery.json",
                {"region": args.region, "disease": args.disease, "k": args.k,
                 "results": rows})
    run.finish()
    for row in rows[:10]:
        print(f"#{row['rank']:2d} {row['sample_id']} score={row['score']:.4f} "
              f"{row['condition'] or ''}")
    return EXIT_OK


def cmd_explain(args) -> int:
    run = RunDir(args.out, "explain", args)
    samples, meta = _load_split(run, args.corpus)
    model = _load_model(run, args.checkpoint)
    if args.backend == "stub":
        backend = stub_for_meta(meta, strict_wording=args.strict_wording)
    else:
        if not args.endpoint or not args.model_name:
            raise CliError("remote backend needs --endpoint and --model-name")
        backend = RemoteBackend(endpoint=args.endpoint, model=args.model_name,
                                timeout=args.timeout)
    result = evaluate_explainability(model, meta.vocab, samples, args.mode, backend,
                                     k=args.k)
    _write_json(run.outputs / "explain.json", {
        "mode": result.mode, "backend": result.rater,
        "overall_mean": result.overall_mean,
        "per_region_mean": result.per_region_mean,
        "pseudo_gt_mean": result.pseudo_gt_mean,
        "n_queries": result.n_queries,
    })
    with open(run.outputs / "explain_records.jsonl", "w", encoding="utf-8") as fh:
        for record in result.records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    run.finish()
    print(f"{result.mode}: mean {result.overall_mean:.3f} "
          f"(pseudo-GT {result.pseudo_gt_mean:.3f}) over {result.n_queries} queries")
    return EXIT_OK


def cmd_rerun(args) -> int:
    manifest_path = _require(args.manifest)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    argv = list(manifest["argv"])
    if args.out:
        try:
            pos = argv.index("--out")
            argv[pos + 1] = args.out
        except ValueError:
            argv += ["--out", args.out]
    for path, digest in manifest.get("inputs", {}).items():
        current = _sha256(_require(path))
        if current != digest:
            raise CliError(f"input {path} changed since the original run "
                           f"({digest[:12]} -> {current[:12]})")
    print(f"re-running: locret {' '.join(argv)}")
    return main(argv)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locret",
        description="Region-aligned vision-language toy pipeline: synthetic corpus, "
                    "two-stage training, grounding/retrieval evaluation, and "
                    "retrieval-grounded explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic train/test corpus")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--normal-fraction", type=float, default=0.2)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--diseases", default=",".join(DEFAULT_DISEASES),
                   help="comma-separated disease names")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", required=True, help="training corpus JSONL")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--init-checkpoint", help="checkpoint to start from "
                   "(required workflow for stage 2)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=None,
                   help="override both group learning rates")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk",
                   help="'paper' selects the published 5e-6 learning rates")
    p.add_argument("--tau-g", type=float, default=0.07)
    p.add_argument("--tau-l", type=float, default=0.07)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flip-augment", action="store_true")
    p.add_argument("--hard-region-negatives", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-grounding", help="similarity-map mIoU and CNR")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seeds", default="0", help="comma-separated evaluation seeds")
    p.add_argument("--heatmaps", type=int, default=0,
                   help="export heatmaps for the first N samples")
    p.set_defaults(func=cmd_eval_grounding)

    p = sub.add_parser("eval-retrieval", help="location-conditioned retrieval metrics")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--level", choices=("region", "global", "both"), default="both")
    p.add_argument("--cross-modal", action="store_true",
                   help="also evaluate image/report retrieval")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("query", help="rank the corpus for one image + region")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True,
                   help="path to a .npy/.png image, or a corpus sample id")
    p.add_argument("--region", required=True)
    p.add_argument("--disease", default=None,
                   help="optional disease label recorded with the query")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--thumbnails", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("explain", help="generate and score explanations")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("region-query", "global-image"),
                   default="region-query")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--backend", choices=("stub", "remote"), default="stub")
    p.add_argument("--strict-wording", action="store_true",
                   help="stub scores 4 instead of 5 when wording differs")
    p.add_argument("--endpoint", help="remote completion endpoint URL")
    p.add_argument("--model-name", help="remote model identifier")
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("rerun", help="re-execute a recorded run manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="redirect outputs to a new directory")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (CorpusFormatError, CheckpointError, IndexFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (CliError, GroundingError, MiningError, TrainingError, ExplainError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

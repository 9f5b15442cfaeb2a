"""Command-line entry point: ``vlcabs {gen,train,infer,map,segment,eval}``.

Options may also come from ``--config file.json`` (a flat object keyed by
option name); explicit flags win over the file, the file wins over defaults.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, VlcabsError
from .inference import (ANATOMY_THRESHOLD, FINDING_THRESHOLD, export_map, export_segmentation,
                        segment_maps, vl_similarity_maps)
from .metrics import SIGMOID_INTERVAL, write_report
from .store import Manifest, _atomic_write

log = logging.getLogger("vlcabs")

PROMPT_PREFIX = "There is "
METRICS = ("auc", "pointing", "dice", "pixel_auc")

# option defaults per command; None-valued argparse defaults mean "not given"
DEFAULTS = {
    "gen": {"spec": None, "out": None, "seed": None},
    "train": {"manifest": None, "out": None, "splits": None, "head": "transformer", "layers": 2,
              "hidden_dim": None, "learning_rate": 1e-4, "warmup_steps": 50, "weight_decay": 0.05,
              "clip_norm": 1.0, "total_epochs": 20, "batch_size": 32, "patience": 5, "max_steps": None,
              "seed": 0, "precision": "float32", "text_projection": True, "similarity": "cosine",
              "heads": 1, "mlp_ratio": 4, "deterministic": True, "dry_run": False},
    "infer": {"manifest": None, "checkpoint": None, "out": None, "ids": None, "split": None,
              "prompt_template": False},
    "map": {"manifest": None, "checkpoint": None, "out": None, "ids": None, "split": None,
            "prompt_template": False},
    "segment": {"manifest": None, "checkpoint": None, "out": None, "ids": None, "split": None,
                "threshold": None, "prompt_kind": "finding", "prompt_template": False},
    "eval": {"manifest": None, "checkpoint": None, "out": None, "ground_truth": None, "split": "test",
             "ids": None, "metric": None, "interval": SIGMOID_INTERVAL, "pooled_dice": False},
}


def _bool_flag(p, name, help):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_true", default=None, help=help)
    p.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_false", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="vlcabs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (falls back to $VLCABS_THREADS, then 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="JSON file of option values")
        if manifest:
            p.add_argument("--manifest", help="manifest.json or its directory")
        p.add_argument("--out", help="output path")

    g = sub.add_parser("gen", help="write a planted synthetic dataset")
    common(g, manifest=False)
    g.add_argument("--spec", help="PlantSpec JSON")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train head, text projection and temperature")
    common(t)
    t.add_argument("--splits", help="JSON with train/val id lists (default: ground_truth.json splits)")
    t.add_argument("--head", choices=("linear", "transformer"))
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--mlp-ratio", type=int)
    t.add_argument("--hidden-dim", type=int, help="defaults to the manifest embedding dim")
    t.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--warmup", "--warmup-steps", dest="warmup_steps", type=int)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--clip", "--clip-norm", dest="clip_norm", type=float)
    t.add_argument("--epochs", "--total-epochs", dest="total_epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=("float32", "float64"))
    t.add_argument("--similarity", choices=("cosine", "dot"))
    _bool_flag(t, "text-projection", "train a linear projection on sentence embeddings")
    _bool_flag(t, "deterministic", "fixed-order gradient reduction")
    t.add_argument("--dry-run", action="store_true", default=None, help="print the resolved config and exit")

    for name, help in (("infer", "similarity probabilities per prompt"),
                       ("map", "export VL similarity maps as PGM"),
                       ("segment", "threshold maps into label maps")):
        p = sub.add_parser(name, help=help)
        common(p)
        p.add_argument("--checkpoint", help="VLCK checkpoint (default: untrained identity model)")
        p.add_argument("--ids", nargs="+", help="image ids (default: --split or all)")
        p.add_argument("--split", help="split name from ground_truth.json")
        p.add_argument("--prompt-template", action="store_true", default=None,
                       help=f"prepend {PROMPT_PREFIX!r} to prompt text")
        if name == "segment":
            p.add_argument("--threshold", type=float)
            p.add_argument("--prompt-kind", choices=("finding", "anatomy"),
                           help=f"default threshold {FINDING_THRESHOLD} (finding) or {ANATOMY_THRESHOLD} (anatomy)")

    e = sub.add_parser("eval", help="AUC, pointing game, Dice and pixel AUC on a planted dataset")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--ground-truth")
    e.add_argument("--split")
    e.add_argument("--ids", nargs="+")
    e.add_argument("--metric", action="append", choices=METRICS)
    e.add_argument("--interval", type=float, help="Dice threshold step (0.01 for sigmoid maps)")
    e.add_argument("--pooled-dice", action="store_true", default=None)
    return parser


def resolve(args):
    """Merge defaults, the optional JSON config file and explicit flags."""
    defaults = DEFAULTS[args.command]
    config = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            config = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        unknown = sorted(set(config) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown {args.command} config keys: {unknown}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else config.get(key, default)
    return out


def _threads(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("VLCABS_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"VLCABS_THREADS must be an integer, got {env!r}") from None


def _need(opts, *names):
    for n in names:
        if opts.get(n) in (None, ""):
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def _write_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _ground_truth_doc(manifest, path=None):
    path = Path(path) if path else manifest.root / "ground_truth.json"
    if not path.exists():
        return None, path
    return json.loads(path.read_text(encoding="utf-8")), path


def _select_ids(manifest, opts):
    if opts.get("ids"):
        for i in opts["ids"]:
            manifest.entry(i)
        return list(opts["ids"])
    if opts.get("split"):
        doc, path = _ground_truth_doc(manifest, opts.get("ground_truth"))
        if doc is None:
            raise ConfigError(f"--split needs {path}")
        if opts["split"] not in doc["splits"]:
            raise ConfigError(f"unknown split {opts['split']!r}")
        return list(doc["splits"][opts["split"]])
    return manifest.image_ids


def _load_model(opts):
    if not opts.get("checkpoint"):
        return None
    from .train import load_checkpoint

    path = Path(opts["checkpoint"])
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)[0]


def _prompts(manifest, template):
    from .store import SentenceEmbedding

    prompts = manifest.prompt_embeddings()
    if not prompts:
        raise ConfigError("manifest has no prompt catalogue")
    if template:
        prompts = [SentenceEmbedding(p.sentence_id, apply_template(p.text), p.embedding) for p in prompts]
    return prompts


def apply_template(text):
    return text if text.startswith(PROMPT_PREFIX) else PROMPT_PREFIX + text


def cmd_gen(opts, threads):
    from .synthetic import PlantSpec, generate

    _need(opts, "spec", "out")
    path = Path(opts["spec"])
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if opts.get("seed") is not None:
        doc["seed"] = opts["seed"]
    spec = PlantSpec.from_dict(doc)
    manifest, gt = generate(spec, opts["out"])
    splits = {s: gt.split(s) for s in ("train", "val", "test")}
    _write_json(Path(opts["out"]) / "splits.json", splits)
    log.info("wrote %d images, mean %.2f sentences per image", len(manifest.entries), manifest.mean_positives())
    return {"images": len(manifest.entries), "mean_positives": manifest.mean_positives()}


def train_config_from(opts, manifest_dim, threads):
    from .train import TrainConfig

    keys = ("head", "layers", "heads", "mlp_ratio", "learning_rate", "warmup_steps", "weight_decay",
            "clip_norm", "total_epochs", "batch_size", "patience", "max_steps", "seed", "precision",
            "text_projection", "similarity", "deterministic")
    cfg = {k: opts[k] for k in keys}
    cfg["hidden_dim"] = opts["hidden_dim"] if opts["hidden_dim"] is not None else manifest_dim
    cfg["threads"] = threads
    return TrainConfig.from_dict(cfg)


def cmd_train(opts, threads):
    from .train import save_checkpoint, train, write_curve

    _need(opts, "manifest")
    manifest = Manifest.load(opts["manifest"])
    config = train_config_from(opts, manifest.embedding_dim, threads)
    if opts["dry_run"]:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return config.to_dict()
    _need(opts, "out")
    if opts.get("splits"):
        splits = json.loads(Path(opts["splits"]).read_text(encoding="utf-8"))
    else:
        doc, _ = _ground_truth_doc(manifest)
        splits = doc["splits"] if doc else {"train": manifest.image_ids, "val": []}
    manifest.validate()
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = train(manifest, config, splits["train"], splits.get("val", []))
    save_checkpoint(out / "checkpoint.vlck", result.model, config)
    write_curve(out / "loss.csv", result.curve)
    summary = {"config": config.to_dict(), "steps": result.steps, "best_epoch": result.best_epoch,
               "best_val": result.best_val, "val_losses": result.val_losses,
               "tau": result.model.temp.tau}
    _write_json(out / "train_summary.json", summary)
    return summary


def cmd_infer(opts, threads):
    from .pipeline import infer_probabilities

    _need(opts, "manifest", "out")
    manifest = Manifest.load(opts["manifest"])
    model = _load_model(opts)
    prompts = _prompts(manifest, opts["prompt_template"])
    probs = infer_probabilities(manifest, _select_ids(manifest, opts), model, prompts)
    doc = {"prompts": {p.sentence_id: p.text for p in prompts}, "probabilities": probs}
    _write_json(opts["out"], doc)
    return doc


def _maps_per_image(manifest, opts, threads):
    model = _load_model(opts)
    prompts = _prompts(manifest, opts["prompt_template"])
    for image_id in _select_ids(manifest, opts):
        yield image_id, prompts, vl_similarity_maps(manifest.image(image_id), prompts, model, threads=threads)


def cmd_map(opts, threads):
    _need(opts, "manifest", "out")
    manifest = Manifest.load(opts["manifest"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for image_id, prompts, maps in _maps_per_image(manifest, opts, threads):
        for p, m in zip(prompts, maps):
            name = f"{image_id}__{p.sentence_id}.pgm"
            export_map(out / name, m)
            index[name] = {"image_id": image_id, "prompt_id": p.sentence_id, "prompt": m.source_prompt,
                           "probability": m.probability}
    _write_json(out / "maps.json", index)
    return index


def cmd_segment(opts, threads):
    _need(opts, "manifest", "out")
    manifest = Manifest.load(opts["manifest"])
    threshold = opts["threshold"]
    if threshold is None:
        threshold = ANATOMY_THRESHOLD if opts["prompt_kind"] == "anatomy" else FINDING_THRESHOLD
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for image_id, prompts, maps in _maps_per_image(manifest, opts, threads):
        result = segment_maps(maps, threshold, [p.text for p in prompts])
        export_segmentation(out / f"{image_id}.pgm", result)
        index[image_id] = {"labels": f"{image_id}.pgm", "palette": f"{image_id}.json"}
    _write_json(out / "segments.json", {"threshold": threshold, "images": index})
    return index


def cmd_eval(opts, threads):
    from .pipeline import evaluate
    from .synthetic import load_ground_truth

    _need(opts, "manifest", "out")
    manifest = Manifest.load(opts["manifest"])
    gt_path = Path(opts["ground_truth"]) if opts["ground_truth"] else manifest.root / "ground_truth.json"
    if not gt_path.exists():
        raise ConfigError(f"ground truth not found: {gt_path}")
    gt = load_ground_truth(gt_path, manifest)
    ids = _select_ids(manifest, dict(opts, ground_truth=str(gt_path)))
    results = evaluate(manifest, gt, ids, _load_model(opts), opts["interval"], opts["metric"],
                       opts["pooled_dice"], threads)
    out = Path(opts["out"])
    write_report(out, results, out.with_suffix(".csv"))
    return {r.metric: r.value for r in results}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "map": cmd_map,
            "segment": cmd_segment, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        COMMANDS[args.command](opts, _threads(args))
    except VlcabsError as exc:
        print(f"vlcabs {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"vlcabs {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

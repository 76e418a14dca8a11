"""``openworld-det`` command line.

Subcommands::

    openworld-det shapes     --out DIR [--train N --eval N --seed S]   (toy dataset: DIR/{train,eval}/annotations.json + images/)
    openworld-det synthesize --config FILE [--limit N] [--out DIR]
    openworld-det train      --config FILE [--out DIR]
    openworld-det evaluate   --config FILE (--checkpoint PATH | --detections PATH) [--out DIR]
    openworld-det plot       --metrics FILE --out DIR

Every config-driven command accepts repeated ``--set key=value``. Output
goes only to the configured output directory (``--out`` replaces it).
Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .annotations import (CocoFormatError, MissingImageError, SegmentationError, apply_split, load_coco,
                          to_class_agnostic, write_coco)
from .config import ConfigError, ExperimentConfig, load_config
from .seeding import derive_rng

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("openworld_det")


class InputError(Exception):
    """Bad user input that is not a config-key problem (missing file and similar)."""


def _out_dir(cfg: ExperimentConfig, override: str | None) -> str:
    out = os.path.abspath(override) if override else cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _dataset(cfg: ExperimentConfig, which: str, mode: str):
    ann, img = cfg.path(f"{which}_annotations"), cfg.path(f"{which}_images")
    if ann is None or img is None:
        raise ConfigError([f"dataset.{which}_annotations", f"dataset.{which}_images"],
                          f"dataset.{which}_annotations and dataset.{which}_images are required")
    ds = load_coco(ann, img)
    if cfg.split is not None:
        ds = apply_split(ds, cfg.split, mode)
    if cfg.dataset.get("class_agnostic"):
        ds = to_class_agnostic(ds)
    return ds


def _save_png(path: str, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def _write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


# -- commands ----------------------------------------------------------------

def cmd_shapes(args) -> int:
    from .shapes import make_dataset, write_dataset

    out = os.path.abspath(args.out)
    for name, n, seed, first in (("train", args.train, args.seed, 1), ("eval", args.eval, args.seed + 1, 100001)):
        path = write_dataset(make_dataset(n, seed, first_image_id=first), os.path.join(out, name))
        print(f"{name}: {n} images, annotations {path}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .backerase import synthesize

    cfg = load_config(args.config, args.set)
    out = _out_dir(cfg, args.out)
    img_dir = os.path.join(out, "images")
    os.makedirs(img_dir, exist_ok=True)
    ds = _dataset(cfg, "train", "train_seen_only")
    bcfg = cfg.backerase
    keep, names, provenance = [], {}, []
    for i in range(len(ds)):
        if args.limit is not None and len(keep) >= args.limit:
            break
        if not ds.annotations(i) and not bcfg.allow_empty:
            continue
        s = ds[i]
        syn = synthesize(s, bcfg, derive_rng(bcfg.seed, "backerase", s.image_id))
        name = f"{s.image_id:06d}.png"
        _save_png(os.path.join(img_dir, name), syn.image)
        keep.append(i)
        names[s.image_id] = name
        x, y, w, h = syn.background_rect
        provenance.append({"image_id": s.image_id, "source_id": syn.source_id,
                           "background_rect": [int(x), int(y), int(w), int(h)]})
    write_coco(os.path.join(out, "annotations.json"), ds.subset(keep), names)
    _write_json(os.path.join(out, "provenance.json"),
                {"backerase": _config_dict(bcfg), "seed": bcfg.seed, "records": provenance})
    print(f"synthesized {len(keep)} images into {out}")
    return EXIT_OK


def _config_dict(dc) -> dict:
    from dataclasses import asdict

    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(dc).items()}


def cmd_train(args) -> int:
    from .detector import build_detector
    from .openworld_eval import evaluate
    from .trainer import train

    cfg = load_config(args.config, args.set)
    out = _out_dir(cfg, args.out)
    ds = _dataset(cfg, "train", "train_seen_only")
    eval_fn = None
    if cfg.schedule.eval_every and cfg.path("eval_annotations"):
        eval_ds = _dataset(cfg, "eval", "eval_unseen_only")

        def eval_fn(det):
            rep = evaluate(det, eval_ds, cfg.eval, cfg.inference)
            return {"ap": rep.ap, "ar": {str(k): v for k, v in rep.ar_at_k.items()}}

    det = build_detector(cfg.detector)
    res = train(det, ds, cfg.backerase, cfg.mode, cfg.schedule,
                log_path=os.path.join(out, "metrics.jsonl"),
                checkpoint_path=os.path.join(out, "checkpoint.npz"), eval_fn=eval_fn)
    last = res.metrics[-1]["total"] if res.metrics else float("nan")
    print(f"trained {len(res.metrics)} steps, final loss {last:.4f}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .detector import load_checkpoint
    from .inference import save_detections
    from .openworld_eval import evaluate

    cfg = load_config(args.config, args.set)
    src = args.checkpoint or args.detections
    if not os.path.exists(src):
        raise InputError(f"no such file: {src}")
    out = _out_dir(cfg, args.out)
    ds = _dataset(cfg, "eval", "eval_unseen_only")
    source = load_checkpoint(src) if args.checkpoint else src
    report = evaluate(source, ds, cfg.eval, cfg.inference)
    report.write(os.path.join(out, "eval_report.json"))
    if args.checkpoint and args.save_detections:
        from .inference import infer

        dets = [d for i in range(len(ds)) for d in infer(source, ds[i].image, cfg.inference, ds.image_ids[i])]
        save_detections(os.path.join(out, "detections.json"), dets)
    ar = ", ".join(f"AR@{k} {v:.4f}" for k, v in report.ar_at_k.items())
    print(f"AP {report.ap:.4f}; {ar}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not os.path.exists(args.metrics):
        raise InputError(f"no such file: {args.metrics}")
    with open(args.metrics) as f:
        records = [json.loads(line) for line in f if line.strip()]
    if not records:
        raise InputError(f"{args.metrics}: no metric records")
    out = os.path.abspath(args.out)
    os.makedirs(out, exist_ok=True)
    meta = {"Software": None}
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r["total"] for r in records], label="total", lw=1.5)
    for key in sorted(records[0]["losses"]):
        ax.plot(steps, [r["losses"].get(key, np.nan) for r in records], label=key, lw=0.8, alpha=0.7)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out, "loss_curve.png"), dpi=100, metadata=meta)
    plt.close(fig)
    written = ["loss_curve.png"]
    evals = [r for r in records if r.get("eval")]
    if evals:
        fig, ax = plt.subplots(figsize=(6, 4))
        for k in evals[0]["eval"]["ar"]:
            ax.plot([r["step"] + 1 for r in evals], [r["eval"]["ar"][k] for r in evals], marker="o", label=f"AR@{k}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("recall on unseen objects")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(os.path.join(out, "ar_curve.png"), dpi=100, metadata=meta)
        plt.close(fig)
        written.append("ar_curve.png")
    print("wrote " + ", ".join(written))
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="openworld-det", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", help="output directory (replaces output_dir)")
        return sp

    sp = sub.add_parser("shapes", help="write the toy shapes dataset as COCO JSON + PNG")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train", type=int, default=400)
    sp.add_argument("--eval", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_shapes)

    sp = with_config(sub.add_parser("synthesize", help="write background-erased copies of the training images"))
    sp.add_argument("--limit", type=int, default=None)
    sp.set_defaults(func=cmd_synthesize)

    sp = with_config(sub.add_parser("train", help="train a detector"))
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("evaluate", help="class-agnostic AP / AR@k on unseen classes"))
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--detections")
    sp.add_argument("--save-detections", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plot", help="loss and AR curves from a metrics log")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "limit", None) is not None and args.limit < 0:
        print("error: --limit must be >= 0", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (InputError, CocoFormatError, MissingImageError, SegmentationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - report, do not trace
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""``betternet`` command line: train, eval, ablate, predict, synth.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import VARIANTS, apply_variant, load_config
from .data import binarize, load_dataset, load_folder, load_image, resize_bilinear, save_gray, write_folder
from .errors import ConfigError, FormatError, NumericError
from .synth import SynthParams, synth_generate
from .train import evaluate_model, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ABLATION_COLUMNS = ("variant", "miou", "mdice", "fwb")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.output or cfg.output_dir)
    result = train(cfg, out)
    print(f"wrote checkpoints and logs to {out}")
    if result.test_report is not None:
        m = result.test_report.means
        print(f"test mdice={m['mdice']:.4f} miou={m['miou']:.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.model)
    size = model.config.input_size
    if args.data:
        pairs = load_folder(args.data, resize_to=size)
    else:
        cfg = load_config(args.config)
        if cfg.model.input_size != size:
            raise ConfigError(f"checkpoint input size {size} differs from config {cfg.model.input_size}")
        pairs = load_dataset(cfg.dataset)[args.split]
    if not pairs:
        raise ConfigError("evaluation dataset is empty")
    report = evaluate_model(model, pairs, args.threshold, args.morph)
    text = report.to_csv()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def parse_variants(raw: str) -> list[str]:
    variants = [v.strip() for v in raw.split(",") if v.strip()]
    if not variants:
        raise ConfigError("no ablation variants given")
    dupes = sorted({v for v in variants if variants.count(v) > 1})
    if dupes:
        raise ConfigError(f"duplicate ablation variants: {dupes}")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {v!r}; choose from {VARIANTS}")
    return variants


def run_ablation(cfg, variants, out_dir) -> list[dict]:
    """Train each variant on identical data and seed; score on the held-out split."""
    out_dir = Path(out_dir)
    configs = {v: apply_variant(cfg, v).validate() for v in variants}
    splits = load_dataset(cfg.dataset)
    held_out = splits["test"] or splits["val"] or splits["train"]
    rows = []
    for v in variants:
        result = train(configs[v], out_dir / v, splits)
        report = result.test_report if splits["test"] else evaluate_model(result.model, held_out, cfg.eval_threshold)
        rows.append({"variant": v, **{c: report.means[c] for c in ABLATION_COLUMNS[1:]}})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for r in rows:
        writer.writerow([r["variant"]] + [f"{r[c]:.6f}" for c in ABLATION_COLUMNS[1:]])
    (out_dir / "ablation.csv").write_text(buf.getvalue())
    return rows


def _cmd_ablate(args) -> int:
    variants = parse_variants(args.variants)
    cfg = load_config(args.config)
    out = Path(args.output or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(cfg, variants, out)
    sys.stdout.write((out / "ablation.csv").read_text())
    return EXIT_OK if rows else EXIT_CONFIG


def _cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.model)
    image = load_image(args.image)
    size = model.config.input_size
    if image.shape[1:] != (size, size):
        image = resize_bilinear(image, size, size)
    prob = predict(model, image[None])[0]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    save_gray(out / f"{stem}_prob.pgm", prob)
    save_gray(out / f"{stem}_mask.pgm", binarize(prob, args.threshold))
    print(f"wrote {out / (stem + '_prob.pgm')} and {out / (stem + '_mask.pgm')}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    params = SynthParams(size=args.size, count=args.count, seed=args.seed).validate()
    out = Path(args.output)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists and is not empty; pass --force to overwrite")
    pairs = synth_generate(params)
    write_folder(out, pairs)
    manifest = {
        "generator": "betternet.synth",
        "params": params.to_dict(),
        "files": [p.source for p in pairs],
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def read_manifest(path) -> SynthParams:
    data = json.loads(Path(path).read_text())
    return SynthParams(**data["params"])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="betternet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("-c", "--config", required=True)
    t.add_argument("-o", "--output", help="override train.output_dir")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("-m", "--model", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("-d", "--data", help="folder with images/ and masks/")
    src.add_argument("-c", "--config", help="use the dataset described by a run config")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--morph", default=None, help="open:R or close:R applied before metrics")
    e.add_argument("-o", "--output", help="write the CSV here instead of stdout")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    a.add_argument("-c", "--config", required=True)
    a.add_argument("-v", "--variants", default=",".join(VARIANTS))
    a.add_argument("-o", "--output")
    a.set_defaults(func=_cmd_ablate)

    r = sub.add_parser("predict", help="predict a mask for one image")
    r.add_argument("-m", "--model", required=True)
    r.add_argument("-i", "--image", required=True)
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--threshold", type=float, default=0.5)
    r.set_defaults(func=_cmd_predict)

    s = sub.add_parser("synth", help="write a synthetic dataset folder")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

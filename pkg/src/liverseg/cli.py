"""Command-line entry point: ``liverseg <subcommand> ...``.

Exit codes: 0 success, 1 data error (unreadable/invalid inputs), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from .config import ConfigError, load_run_config
from .deform import load_field, register, save_field
from .metrics import MetricsReport, aggregate_reports, build_report, compare_reports, format_comparison
from .model import SegmentationModel, build_model
from .phantom import generate_dataset
from .preprocess import preprocess_case
from .train import split_dataset, train_loop
from .volume_io import LabelVolume, export_slice, load, save

log = logging.getLogger("liverseg")


class DataError(Exception):
    """Raised for bad inputs; reported as a one-line diagnostic with exit code 1."""


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _write_dataset(cases, out):
    path = aug.write_dataset(cases, out)
    print(f"wrote {len(cases)} cases to {path}")


# -- subcommands ---------------------------------------------------------------

def cmd_phantom_gen(args):
    cfg = load_run_config(args.config)
    cases = generate_dataset(args.n, cfg.phantom, args.seed)
    _write_dataset(cases, args.out)


def cmd_preprocess(args):
    cfg = load_run_config(args.config)
    out = []
    for case in aug.load_dataset(_require(args.inp, "manifest")):
        img, lab = preprocess_case(case.image, case.labels, cfg.preprocess)
        out.append(aug.LabeledCase(case.id, img, lab, case.provenance))
    _write_dataset(out, args.out)


def cmd_register(args):
    cfg = load_run_config(args.config)
    fixed = load(_require(args.fixed, "fixed image"), kind="image")
    moving = load(_require(args.moving, "moving image"), kind="image")
    v = register(fixed, moving, cfg.augment)
    save_field(v, args.out_field)
    print(f"velocity max |v| = {v.max_norm():.4f} voxel; written to {args.out_field}")


def cmd_augment(args):
    cfg = load_run_config(args.config)
    exclusion = args.exclusion or cfg.exclusion
    entries = aug.read_manifest(_require(args.manifest, "manifest"))
    ids = [e["id"] for e in entries]
    templates = sorted({t for group in args.templates for t in group.split(",") if t})
    unknown = [t for t in templates if t not in ids]
    if unknown:
        raise DataError(f"templates not in manifest: {', '.join(unknown)}")
    if len(ids) < 2:
        raise DataError("augmentation needs a pool of at least 2 cases")
    print(aug.counting_report(len(templates), len(ids), exclusion))
    if args.dry_run:
        return
    pool = aug.load_dataset(args.manifest)
    synth = aug.expand_dataset(templates, pool, cfg.augment, exclusion)
    flagged = [c.id for c in synth if aug.missing_classes(c)]
    for cid in flagged:
        print(f"warning: {cid} lacks some segment classes")
    _write_dataset(pool + synth, args.out)


def cmd_train(args):
    cfg = load_run_config(args.config)
    cases = aug.load_dataset(_require(args.manifest, "manifest"))
    originals = [c for c in cases if c.provenance.kind == "original"]
    synthesized = [c for c in cases if c.provenance.kind != "original"]
    train, val, test = split_dataset(originals, cfg.train.split_ratios, cfg.train.seed)
    # synthesized cases only join training when both of their sources are training cases
    train_ids = {c.id for c in train}
    train += [c for c in synthesized
              if c.provenance.template_id in train_ids and c.provenance.partner_id in train_ids]
    run = Path(args.out_run)
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / "run_config.txt")
    (run / "split.json").write_text(json.dumps(
        {"train": [c.id for c in train], "val": [c.id for c in val], "test": [c.id for c in test]},
        indent=2) + "\n")
    model = build_model(cfg.model_kind, cfg.model, seed=cfg.train.seed)
    result = train_loop(model, train, val, cfg.train, run_dir=run)
    print(f"trained {len(result.rows)} epochs; best epoch {result.best_epoch}; log {run / 'log.csv'}")


def cmd_predict(args):
    ckpt = _require(args.checkpoint, "checkpoint")
    model = SegmentationModel.load(ckpt)
    inp = _require(args.inp, "input")
    if inp.suffix == ".json":
        cases = aug.load_dataset(inp)
        out = [aug.LabeledCase(c.id, c.image, model.predict(c.image), c.provenance) for c in cases]
        _write_dataset(out, args.out)
    else:
        save(model.predict(load(inp, kind="image")), args.out)
        print(f"wrote {args.out}")


def _label_sets(path):
    path = _require(path, "labels")
    if path.suffix == ".json":
        return {e["id"]: load(e["labels"], kind="labels") for e in aug.read_manifest(path)}
    return {path.stem: load(path, kind="labels")}


def cmd_evaluate(args):
    pred, truth = _label_sets(args.pred), _label_sets(args.truth)
    if len(pred) == 1 and len(truth) == 1:
        report = build_report(next(iter(pred.values())), next(iter(truth.values())))
    else:
        missing = sorted(set(truth) - set(pred))
        if missing:
            raise DataError(f"no prediction for cases: {', '.join(missing)}")
        ids = sorted(truth)
        report = aggregate_reports([build_report(pred[i], truth[i]) for i in ids], ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".json").write_text(report.to_json())
    out.with_suffix(".csv").write_text(report.to_csv())
    print(report.to_table())


def cmd_compare(args):
    a_path, b_path = (_require(p, "report") for p in args.reports)
    reps = []
    for p in (a_path, b_path):
        try:
            reps.append(MetricsReport.from_dict(json.loads(p.read_text())))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{p}: not a metrics report ({e})") from None
    result = compare_reports(*reps)
    text = format_comparison(result, a_path.stem, b_path.stem)
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True, default=_json_default) + "\n")
    print(text)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dict__"):
        return vars(o)
    raise TypeError(type(o).__name__)


def cmd_view(args):
    vol = load(_require(args.inp, "volume"))
    Path(args.out).write_bytes(export_slice(vol, args.axis, args.index))
    print(f"wrote {args.out}")


# -- parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="liverseg", description="Couinaud segment segmentation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def config_flag(sp):
        sp.add_argument("--config", help="run-config file of 'section.key = value' lines (defaults if omitted)")

    ph = sub.add_parser("phantom", help="synthetic phantom datasets")
    ph_sub = ph.add_subparsers(dest="phantom_command", metavar="ACTION", required=True)
    gen = ph_sub.add_parser("gen", help="generate labeled phantoms and a manifest")
    gen.add_argument("--n", type=int, required=True, help="number of phantoms")
    gen.add_argument("--seed", type=int, default=0, help="seed of the first phantom (default 0)")
    gen.add_argument("--out", required=True, help="output directory")
    config_flag(gen)
    gen.set_defaults(func=cmd_phantom_gen)

    pre = sub.add_parser("preprocess", help="resample, window and crop/pad every case of a manifest")
    pre.add_argument("--in", dest="inp", required=True, help="input manifest")
    pre.add_argument("--out", required=True, help="output directory")
    config_flag(pre)
    pre.set_defaults(func=cmd_preprocess)

    reg = sub.add_parser("register", help="demons registration of two images")
    reg.add_argument("--fixed", required=True, help="fixed image (NIfTI)")
    reg.add_argument("--moving", required=True, help="moving image (NIfTI)")
    reg.add_argument("--out-field", required=True, help="velocity field output (raw blob + .txt sidecar)")
    config_flag(reg)
    reg.set_defaults(func=cmd_register)

    ag = sub.add_parser("augment", help="template-based registration augmentation")
    ag.add_argument("--manifest", required=True, help="pool manifest")
    ag.add_argument("--templates", required=True, action="append",
                    help="template case ID(s), comma-separated; may be repeated")
    ag.add_argument("--out", required=True, help="output directory for the expanded dataset")
    ag.add_argument("--exclusion", choices=aug.EXCLUSION_RULES,
                    help="partner rule: 'self' pairs each template with every other case (default from config)")
    ag.add_argument("--dry-run", action="store_true", help="print the count only; register nothing")
    config_flag(ag)
    ag.set_defaults(func=cmd_augment)

    tr = sub.add_parser("train", help="train a segmentation model")
    tr.add_argument("--manifest", required=True, help="dataset manifest (originals plus synthesized cases)")
    tr.add_argument("--out-run", required=True, help="run directory (log.csv, best/, last/, run_config.txt)")
    config_flag(tr)
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="segment images with a checkpoint")
    pr.add_argument("--checkpoint", required=True, help="checkpoint directory (params.bin + manifest.json)")
    pr.add_argument("--in", dest="inp", required=True, help="image NIfTI or dataset manifest")
    pr.add_argument("--out", required=True, help="label NIfTI path, or output directory for a manifest")
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="per-segment Dice/MSD/HD95/VR report")
    ev.add_argument("--pred", required=True, help="predicted labels (NIfTI or manifest)")
    ev.add_argument("--truth", required=True, help="reference labels (NIfTI or manifest)")
    ev.add_argument("--out", required=True, help="report path stem; writes .json and .csv")
    ev.set_defaults(func=cmd_evaluate)

    cp = sub.add_parser("compare", help="paired t-tests between two reports")
    cp.add_argument("--reports", nargs=2, required=True, metavar=("A", "B"), help="two report JSON files")
    cp.add_argument("--out", help="optional JSON output of the test results")
    cp.set_defaults(func=cmd_compare)

    vw = sub.add_parser("view", help="export one slice as a PGM image")
    vw.add_argument("--in", dest="inp", required=True, help="volume NIfTI")
    vw.add_argument("--axis", choices=("axial", "coronal", "sagittal"), default="axial", help="slice axis")
    vw.add_argument("--index", type=int, required=True, help="slice index")
    vw.add_argument("--out", required=True, help="output .pgm path")
    vw.set_defaults(func=cmd_view)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit 2 here
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"liverseg: config error: {e}", file=sys.stderr)
        return 2
    except (DataError, ValueError, KeyError, IndexError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"liverseg: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

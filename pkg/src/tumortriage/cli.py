"""``tumortriage`` command line: one subcommand per pipeline stage.

Every command writes its outputs under ``--out-dir`` together with a
``run.json`` record (canonical argv, full config, seeds and SHA-256 of each
artifact) from which ``tumortriage replay`` re-executes the run and checks the
artifacts byte for byte.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 data invariant, 5 numeric.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import DataInvariantError, SlideIOError, TriageError, UsageError

ENV_OUT_DIR = "TRIAGE_OUT_DIR"
ENV_THREADS = "TRIAGE_THREADS"
DEFAULT_OUT_DIR = "triage_out"
RUN_RECORD = "run.json"

log = logging.getLogger("tumortriage")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _abs_path(text: str) -> str:
    return str(Path(text).expanduser().resolve())


def _count_range(text: str) -> tuple:
    """``"3"`` -> (3, 3); ``"2-4"`` -> (2, 4)."""
    lo, _, hi = text.partition("-")
    try:
        lo, hi = int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO-HI, got {text!r}") from None
    if not 0 <= lo <= hi:
        raise argparse.ArgumentTypeError(f"invalid range {text!r}")
    return lo, hi


def _format_range(value: tuple) -> str:
    return f"{value[0]}-{value[1]}"


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_artifacts(out_dir: Path, names) -> dict:
    """SHA-256 of every file under each named output (files or directories)."""
    digests = {}
    for name in names:
        p = out_dir / name
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            digests[f.relative_to(out_dir).as_posix()] = _hash_file(f)
    return dict(sorted(digests.items()))


# -- commands -----------------------------------------------------------------
# Each returns (artifact names, names whose bytes depend on wall-clock timing).

def cmd_synth(args, out: Path):
    from .slide_store import (DatasetManifest, ManifestEntry, SyntheticSlideSpec,
                              generate_synthetic_slide, synthesize_corpus, write_manifest,
                              write_mask, write_slide)

    radius = (args.radius_min, args.radius_max)
    if args.tumor or args.normal:
        if args.width != args.height:
            raise UsageError("corpus slides are square; pass equal --width and --height")
        manifest = synthesize_corpus(out, args.tumor, args.normal, args.seed,
                                     size_px=args.width, tile_size=args.tile_size,
                                     tissue_fraction=args.tissue_fraction,
                                     nodule_count=args.nodules or (2, 4),
                                     nodule_radius=radius, prefix=args.prefix)
        print(f"synthesized {len(manifest.entries)} slides")
        names = ["slides", "manifest.json"] + (["masks"] if args.tumor else [])
        return names, []
    lo, hi = args.nodules or (3, 3)
    if lo != hi:
        raise UsageError("a single slide takes one nodule count, not a range")
    spec = SyntheticSlideSpec(args.width, args.height, args.tile_size, args.tissue_fraction,
                              lo, radius, args.seed, args.slide_id)
    slide, mask = generate_synthetic_slide(spec)
    slide_dir = write_slide(slide, out / "slides" / slide.id)
    mask_path = write_mask(mask, out / "masks" / f"{slide.id}.png") if lo else None
    manifest = DatasetManifest([ManifestEntry(str(slide_dir), mask_path and str(mask_path),
                                              slide.label)], args.seed)
    write_manifest(manifest, out / "manifest.json", relative_to=out)
    print(f"synthesized {slide.label} slide {slide.id} ({slide.width_px}x{slide.height_px})")
    return ["slides", "manifest.json"] + (["masks"] if lo else []), []


def cmd_segment(args, out: Path):
    from .preprocess import compute_color_stats, tissue_mask
    from .slide_store import AnnotationMask, read_slide, write_mask

    slide = read_slide(args.slide)
    mask = tissue_mask(slide, args.se_radius)
    write_mask(AnnotationMask(slide.id, mask), out / "tissue_mask.png")
    (out / "color_stats.json").write_text(compute_color_stats(slide.to_array(), mask).to_json())
    print(f"tissue covers {mask.mean():.1%} of {slide.id}")
    return ["tissue_mask.png", "color_stats.json"], []


def _extraction_config(args):
    from .patcher import ExtractionConfig, PatchLabel

    return ExtractionConfig(args.patch_size, {PatchLabel.POSITIVE_TUMOR: args.pos,
                                              PatchLabel.NEGATIVE_TUMOR: args.neg_tumor,
                                              PatchLabel.NEGATIVE_NORMAL: args.neg_normal},
                            args.min_tissue, args.seed)


def _prepared_dataset(args):
    from .patcher import extract_from_prepared, prepare_slides
    from .preprocess import ColorTemplate
    from .slide_store import read_manifest
    from .training import PatchDataset

    manifest = read_manifest(args.manifest)
    template = ColorTemplate.load(args.template) if args.template else None
    prepared, template = prepare_slides(manifest, template)
    patches = extract_from_prepared(prepared, _extraction_config(args))
    return manifest, template, patches, PatchDataset.from_patches(patches)


def cmd_patch(args, out: Path):
    from .patcher import write_patch_set

    _, template, patches, data = _prepared_dataset(args)
    write_patch_set(patches, out / "patches")
    template.save(out / "patches" / "template.json")
    print(f"extracted {len(data)} patches: {data.label_counts()}")
    return ["patches"], []


def _sgd_config(args):
    from .nn.model import SgdConfig

    return SgdConfig(args.lr, args.momentum, args.batch_size, args.epochs, args.seed)


def _augment_config(args, force: bool = False):
    from .augment import AugmentConfig

    if not (args.augment or force):
        return None
    return AugmentConfig(args.max_rotation, args.max_zoom, not args.no_hflip,
                         not args.no_vflip, args.seed)


def _load_patch_dir(path):
    from .patcher import read_patch_set
    from .training import PatchDataset

    return PatchDataset.from_patches(read_patch_set(path))


def cmd_train(args, out: Path):
    from .nn.model import save_checkpoint
    from .training import train

    data = _load_patch_dir(args.patches)
    val = _load_patch_dir(args.val) if args.val else None
    run = train(data, args.arch, _sgd_config(args), _augment_config(args), val=val)
    meta = {"arch": args.arch}
    template = Path(args.patches) / "template.json"
    if template.is_file():
        meta["template"] = json.loads(template.read_text())
    save_checkpoint(run.model, out / "model.ptri", meta)
    run.checkpoint = "model.ptri"
    _write_json(out / "train_run.json", run.to_dict())
    last = run.epochs[-1]
    print(f"{args.arch}: train acc {last.train_acc:.3f} after {len(run.epochs)} epochs"
          + (f", val acc {last.val_acc:.3f}" if last.val_acc is not None else ""))
    return ["model.ptri", "train_run.json"], []


def cmd_cv(args, out: Path):
    from .patcher import assign_folds
    from .training import augmentation_table, cross_validate

    manifest, _, _, data = _prepared_dataset(args)
    folds = assign_folds(manifest, args.k, args.seed)
    (out / "folds.json").write_text(folds.to_json())
    sgd = _sgd_config(args)
    report = cross_validate(data, folds, args.arch, sgd, _augment_config(args))
    _write_json(out / "cv_report.json", report.to_dict())
    summary = report.summary()
    print(f"{args.k}-fold {args.arch}: train {summary['train']}, validation {summary['val']}")
    names = ["folds.json", "cv_report.json"]
    if args.augment_table:
        baseline = None if args.augment else report
        table = augmentation_table(data, folds, args.arch, sgd,
                                   _augment_config(args, force=True), baseline)
        _write_json(out / "augmentation_table.json",
                    {arm: {"train": v["train"], "val": v["val"],
                           "report": v["report"].to_dict()} for arm, v in table.items()})
        for arm, v in table.items():
            print(f"augmentation {arm}: train {v['train']:.3f}, validation {v['val']:.3f}")
        names.append("augmentation_table.json")
    return names, []


def cmd_eval(args, out: Path):
    from .metrics import plot_roc
    from .nn.model import load_checkpoint
    from .training import evaluate_holdout

    model = load_checkpoint(args.checkpoint)
    result = evaluate_holdout(model, _load_patch_dir(args.patches), args.n_boot, args.seed)
    curve = result["roc"]
    metrics = {k: result[k] for k in ("accuracy", "auc", "auc_ci", "n", "n_positive")}
    metrics["arch"] = model.meta.get("arch", model.name)
    _write_json(out / "metrics.json", metrics)
    (out / "roc.csv").write_text(curve.to_csv())
    names = ["metrics.json", "roc.csv"]
    if args.plot:
        plot_roc(curve, out / "roc.png", metrics["arch"])
        names.append("roc.png")
    lo, hi = metrics["auc_ci"]
    print(f"accuracy {metrics['accuracy']:.3f}, AUC {curve.auc:.3f} (95% CI {lo:.3f}-{hi:.3f})")
    return names, []


def cmd_infer(args, out: Path):
    from .heatmap import (HeatmapConfig, compare_to_ground_truth, render_heatmap,
                          render_overlay, score_slide)
    from .nn.model import load_checkpoint
    from .preprocess import ColorTemplate
    from .slide_store import read_mask, read_slide

    model = load_checkpoint(args.checkpoint)
    template = model.meta.get("template")
    if template is None:
        log.warning("checkpoint carries no color template; scoring raw colors")
    else:
        template = ColorTemplate.from_dict(template)
    slide = read_slide(args.slide)
    config = HeatmapConfig(model.input_shape[0], args.stride, args.threshold,
                           not args.no_skip, args.min_tissue)
    heatmap, _ = score_slide(model, slide, template, config)
    render_heatmap(heatmap, out / "heatmap.png", args.threshold)
    names = ["heatmap.png", "heatmap.json"]
    truth = None
    if args.mask:
        mask = read_mask(args.mask, slide.id)
        mask.check_against(slide)
        truth = mask.pixels
        comparison = compare_to_ground_truth(heatmap, truth, args.threshold)
        _write_json(out / "comparison.json", comparison.to_dict())
        names.append("comparison.json")
        print(f"grid Dice {comparison.dice:.3f}, IoU {comparison.iou:.3f}")
    if args.overlay:
        render_overlay(slide, heatmap, out / "overlay.png", args.threshold, truth,
                       args.downsample)
        names.append("overlay.png")
    flagged = int(((heatmap.probs >= args.threshold) & heatmap.evaluated).sum())
    print(f"{slide.id}: {flagged} of {int(heatmap.evaluated.sum())} tissue cells flagged")
    return names, []


def cmd_bench(args, out: Path):
    from .bench import compare_archs

    result = compare_archs(args.input_size, args.batch, args.warmup, args.reps,
                           args.threads, args.seed)
    (out / "bench.json").write_text(result.to_json())
    (out / "bench.txt").write_text(result.to_text())
    names = ["bench.json", "bench.txt"]
    if args.plot:
        result.plot(out / "bench.png")
        names.append("bench.png")
    print(result.to_text(), end="")
    return names, list(names)


def cmd_replay(args, out: Path):
    record_path = Path(args.run)
    try:
        record = json.loads(record_path.read_text())
    except FileNotFoundError:
        raise SlideIOError(f"missing run record {record_path}") from None
    except ValueError as exc:
        raise DataInvariantError(f"{record_path}: invalid JSON ({exc})") from None
    if out.resolve() == record_path.parent.resolve():
        raise UsageError("replay needs an --out-dir different from the recorded run")
    code = main(["--out-dir", str(out)] + record["argv"])
    if code != 0:
        raise DataInvariantError(f"replayed command exited with code {code}")
    fresh = json.loads((out / RUN_RECORD).read_text())
    skip = set(record.get("timing_dependent", []))
    differing = [name for name, digest in record["artifacts"].items()
                 if name not in skip and fresh["artifacts"].get(name) != digest]
    if differing:
        raise DataInvariantError(f"replay differs in {len(differing)} artifact(s): "
                                 + ", ".join(differing[:5]))
    checked = len(record["artifacts"]) - len(skip)
    print(f"replay ok: {checked} artifact(s) byte-identical")
    return None


# -- parser -------------------------------------------------------------------

def _add_extraction_flags(p):
    p.add_argument("manifest", type=_abs_path, help="dataset manifest JSON")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--pos", type=int, default=50, help="positive-tumor patches per tumor slide")
    p.add_argument("--neg-tumor", type=int, default=50,
                   help="negative patches per tumor slide")
    p.add_argument("--neg-normal", type=int, default=100,
                   help="negative patches per normal slide")
    p.add_argument("--min-tissue", type=float, default=0.8,
                   help="minimum tissue fraction of a patch")
    p.add_argument("--template", type=_abs_path, default=None,
                   help="color template JSON (default: pooled over the manifest)")


def _add_model_flags(p):
    from .zoo import ArchitectureId

    p.add_argument("--arch", choices=[a.value for a in ArchitectureId], default="mobile")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--augment", action="store_true", help="augment training batches")
    p.add_argument("--max-rotation", type=float, default=20.0, help="degrees")
    p.add_argument("--max-zoom", type=float, default=0.2, help="fraction")
    p.add_argument("--no-hflip", action="store_true")
    p.add_argument("--no-vflip", action="store_true")


GLOBAL_DESTS = ("seed", "threads", "out_dir", "verbose")


def _add_global_flags(parser, default=None):
    parser.add_argument("--seed", type=int, default=0 if default is None else default)
    parser.add_argument("--threads", type=int, default=default,
                        help=f"BLAS threads (env {ENV_THREADS}, default 1)")
    parser.add_argument("--out-dir", default=default,
                        help=f"output directory (env {ENV_OUT_DIR}, default {DEFAULT_OUT_DIR})")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=False if default is None else default)


COMMANDS = {
    "synth": cmd_synth, "segment": cmd_segment, "patch": cmd_patch, "train": cmd_train,
    "cv": cmd_cv, "eval": cmd_eval, "infer": cmd_infer, "bench": cmd_bench,
    "replay": cmd_replay,
}


def build_parser() -> tuple:
    """Return the top-level parser and a map of subcommand parsers."""
    from .preprocess import DEFAULT_SE_RADIUS

    parser = _Parser(prog="tumortriage", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    _add_global_flags(parser)
    # the same flags are accepted after the subcommand; SUPPRESS keeps them
    # from overwriting values given before it
    common = _Parser(add_help=False)
    _add_global_flags(common, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND",
                                parser_class=_Parser)
    subs = {}

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    p = subs["synth"] = add("synth", help="render synthetic slides and masks")
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--tissue-fraction", type=float, default=0.5)
    p.add_argument("--nodules", type=_count_range, default=None,
                   help="tumor nodules per slide: N, or LO-HI for a corpus (default 3 / 2-4)")
    p.add_argument("--radius-min", type=int, default=40)
    p.add_argument("--radius-max", type=int, default=80)
    p.add_argument("--slide-id", default="synthetic")
    p.add_argument("--tumor", type=int, default=0, help="corpus mode: tumor slides")
    p.add_argument("--normal", type=int, default=0, help="corpus mode: normal slides")
    p.add_argument("--prefix", default="slide", help="corpus slide id prefix")

    p = subs["segment"] = add("segment", help="tissue mask of one slide")
    p.add_argument("slide", type=_abs_path)
    p.add_argument("--se-radius", type=int, default=DEFAULT_SE_RADIUS)

    p = subs["patch"] = add("patch", help="extract labeled patches")
    _add_extraction_flags(p)

    p = subs["train"] = add("train", help="train one model on a patch directory")
    p.add_argument("patches", type=_abs_path)
    p.add_argument("--val", type=_abs_path, default=None, help="validation patch directory")
    _add_model_flags(p)

    p = subs["cv"] = add("cv", help="slide-level k-fold cross-validation")
    _add_extraction_flags(p)
    _add_model_flags(p)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--augment-table", action="store_true",
                   help="also run the augmentation off/on comparison")

    p = subs["eval"] = add("eval", help="accuracy and ROC on a patch directory")
    p.add_argument("checkpoint", type=_abs_path)
    p.add_argument("patches", type=_abs_path)
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--plot", action="store_true")

    p = subs["infer"] = add("infer", help="tumor heatmap of one slide")
    p.add_argument("checkpoint", type=_abs_path)
    p.add_argument("slide", type=_abs_path)
    p.add_argument("--mask", type=_abs_path, default=None, help="annotation for comparison")
    p.add_argument("--stride", type=int, default=None, help="default: patch size")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--min-tissue", type=float, default=0.5)
    p.add_argument("--no-skip", action="store_true", help="score non-tissue cells too")
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--downsample", type=int, default=1)

    p = subs["bench"] = add("bench", help="inference time per step of every arch")
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--plot", action="store_true")

    p = subs["replay"] = add("replay", help="re-run a recorded command and verify")
    p.add_argument("run", type=_abs_path, help="run.json of the original command")
    return parser, subs


def canonical_argv(args, subparser) -> list:
    """Explicit argv reproducing ``args``, every flag spelled out."""
    argv = ["--seed", str(args.seed), "--threads", str(args.threads), args.command]
    for action in subparser._actions:
        if isinstance(action, argparse._HelpAction) or action.dest in GLOBAL_DESTS:
            continue
        value = getattr(args, action.dest)
        if not action.option_strings:
            argv.append(str(value))
        elif isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(action.option_strings[-1])
        elif value is not None:
            text = _format_range(value) if isinstance(value, tuple) else str(value)
            argv += [action.option_strings[-1], text]
    return argv


def _config(args) -> dict:
    skip = {"out_dir", "verbose"}
    return {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in sorted(vars(args).items()) if k not in skip}


def _resolve_globals(args):
    if args.out_dir is None:
        args.out_dir = os.environ.get(ENV_OUT_DIR, DEFAULT_OUT_DIR)
    if args.threads is None:
        env = os.environ.get(ENV_THREADS)
        try:
            args.threads = int(env) if env else 1
        except ValueError:
            raise UsageError(f"{ENV_THREADS} must be an integer, got {env!r}") from None
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")


def _run(argv) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    _resolve_globals(args)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(args.threads):
        produced = COMMANDS[args.command](args, out)
    if produced is None:
        return 0
    names, timing = produced
    record = {
        "tool": "tumortriage",
        "version": __version__,
        "command": args.command,
        "argv": canonical_argv(args, subs[args.command]),
        "config": _config(args),
        "seeds": {"global": args.seed},
        "threads": args.threads,
        "artifacts": hash_artifacts(out, names),
        "timing_dependent": sorted(hash_artifacts(out, timing)),
    }
    _write_json(out / RUN_RECORD, record)
    return 0


def main(argv=None) -> int:
    try:
        return _run(sys.argv[1:] if argv is None else list(argv))
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else 0
    except TriageError as exc:
        _report(exc.category, exc)
        return exc.exit_code
    except OSError as exc:
        _report(SlideIOError.category, exc)
        return SlideIOError.exit_code


def _report(category: str, exc: BaseException):
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {category}: {message}", file=sys.stderr)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

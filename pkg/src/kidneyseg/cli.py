"""Command line entry point for the segmentation pipeline.

Every subcommand resolves one configuration (defaults, then an optional
``--config`` file, then ``--set key=value`` overrides), echoes it together
with its SHA-256, and then runs as a pure function of (config, inputs).
Re-running a command with the echoed config reproduces its outputs.

Exit codes: 0 success, 2 bad configuration, 3 missing input,
4 numerics failure, 1 any other pipeline error.
"""

import argparse
import os
import sys
from pathlib import Path

from .config import (
    PRESET_NAMES,
    apply_preset,
    config_hash,
    load_config,
    parse_config,
    render_config,
)
from .errors import (
    ConfigError,
    IoError,
    KidneySegError,
    MissingCase,
    NumericsError,
)

# heavier modules (numpy, scipy) are imported inside the handlers so that
# the thread cap from the config can be exported first


def _resolve_config(args):
    cfg = None
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    overrides = "\n".join(getattr(args, "set", None) or ())
    return parse_config(overrides, base=cfg)


def _echo(cfg, out_dir=None):
    text = render_config(cfg)
    if not text.endswith("\n"):
        text += "\n"
    sys.stdout.write(text)
    print(f"# sha256 {config_hash(cfg)}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.cfg").write_text(text)


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise IoError(f"{what} directory not found: {p}")
    return p


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise IoError(f"{what} not found: {p}")
    return p


def _read_pair(directory, case_id, suffix_ct, suffix_seg, optional=False):
    from .nifti import read_nifti

    ct_path = directory / f"{case_id}{suffix_ct}"
    seg_path = directory / f"{case_id}{suffix_seg}"
    if optional and not (ct_path.is_file() and seg_path.is_file()):
        return None, None
    ct = read_nifti(_require_file(ct_path, "volume"), kind="intensity")
    seg = read_nifti(_require_file(seg_path, "labels"), kind="labels")
    return ct, seg


def _load_preprocessed(data_dir):
    """Read a preprocessed cohort directory into TrainCase records."""
    from .phantom import MANIFEST_NAME, read_manifest
    from .training import TrainCase

    data = _require_dir(data_dir, "data")
    _require_file(data / MANIFEST_NAME, "manifest")
    cases = []
    for case_id, split, _ in read_manifest(data):
        ct_high, seg_high = _read_pair(data, case_id, "_ct_high.nii", "_seg_high.nii")
        ct_low, seg_low = _read_pair(data, case_id, "_ct_low.nii", "_seg_low.nii",
                                     optional=True)
        cases.append(TrainCase(case_id, ct_high, seg_high, ct_low, seg_low, split))
    if not cases:
        raise MissingCase(f"no cases listed in {data / MANIFEST_NAME}")
    return cases


def _map_case_ids(maps_dir):
    tag = "_prob_c0.nii"
    ids = sorted(p.name[: -len(tag)] for p in Path(maps_dir).glob(f"*{tag}"))
    if not ids:
        raise MissingCase(f"no probability maps in {maps_dir}")
    return ids


# ----------------------------------------------------------------- commands


def cmd_phantom(args, cfg):
    from .phantom import generate, make_cohort, write_cohort

    _echo(cfg, args.out)
    cases = make_cohort(
        cfg.phantom_count,
        cfg.seed,
        size=cfg.phantom_size,
        spacing=cfg.phantom_spacing,
        abnormal_fraction=cfg.phantom_fraction,
        test_fraction=cfg.cohort_test_fraction,
        val_fraction=cfg.cohort_val_fraction,
    )
    write_cohort(args.out, cases)
    print(f"wrote {len(cases)} phantom cases to {args.out}")
    return 0


def cmd_preprocess(args, cfg):
    import shutil

    from .nifti import write_nifti
    from .phantom import MANIFEST_NAME, read_manifest
    from .training import preprocess_case

    _echo(cfg, args.out)
    cohort = _require_dir(args.cohort, "cohort")
    manifest = _require_file(cohort / MANIFEST_NAME, "manifest")
    out = Path(args.out)
    n = 0
    for case_id, split, _ in read_manifest(cohort):
        ct, seg = _read_pair(cohort, case_id, "_ct.nii", "_seg.nii")
        case = preprocess_case(case_id, ct, seg, cfg, split=split)
        write_nifti(case.ct_high, out / f"{case_id}_ct_high.nii")
        write_nifti(case.labels_high, out / f"{case_id}_seg_high.nii")
        write_nifti(case.ct_low, out / f"{case_id}_ct_low.nii")
        write_nifti(case.labels_low, out / f"{case_id}_seg_low.nii")
        n += 1
    shutil.copyfile(manifest, out / MANIFEST_NAME)
    print(f"preprocessed {n} cases into {out}")
    return 0


def cmd_pretrain_lowres(args, cfg):
    from .training import pretrain_lowres

    _echo(cfg, args.out)
    cases = _load_preprocessed(args.data)
    result = pretrain_lowres(cases, cfg, out_dir=args.out, log=print)
    print(f"best epoch {result.best_epoch}  score {result.best_score:.4f}")
    return 0


def cmd_train(args, cfg):
    import numpy as np

    from .training import build_model, load_lowres_into, train

    _echo(cfg, args.out)
    cases = _load_preprocessed(args.data)
    model = build_model(cfg, np.random.default_rng(cfg.seed))
    if args.lowres:
        load_lowres_into(model, _require_file(args.lowres, "low-res checkpoint"))
        print(f"loaded frozen low-res net from {args.lowres}")
    result = train(cases, model, cfg, out_dir=args.out, log=print)
    print(f"best epoch {result.best_epoch}  score {result.best_score:.4f}")
    return 0


def cmd_infer(args, cfg):
    from .checkpoint import build_from_checkpoint
    from .inference import predict_volume, save_probability_maps
    from .unet import CascadeModel

    _echo(cfg, args.out)
    model, _ = build_from_checkpoint(_require_file(args.model, "checkpoint"))
    cases = _load_preprocessed(args.data)
    if args.split != "all":
        cases = [c for c in cases if c.split == args.split]
        if not cases:
            raise MissingCase(f"no cases tagged {args.split!r} in {args.data}")
    for case in cases:
        if isinstance(model, CascadeModel) and case.ct_low is None:
            raise IoError(f"case {case.case_id} lacks the coarse-grid volume")
        maps = predict_volume(model, case.ct_high, case.ct_low,
                              input_scale=cfg.input_scale)
        save_probability_maps(maps, args.out, case.case_id)
        print(f"inferred {case.case_id}")
    return 0


def cmd_ensemble(args, cfg):
    from .inference import ensemble, load_probability_maps, save_probability_maps

    _echo(cfg, args.out)
    dir_a = _require_dir(args.a, "first maps")
    dir_b = _require_dir(args.b, "second maps")
    for case_id in _map_case_ids(dir_a):
        maps_a = load_probability_maps(dir_a, case_id)
        try:
            maps_b = load_probability_maps(dir_b, case_id)
        except KidneySegError:
            raise MissingCase(f"case {case_id} missing from {dir_b}") from None
        save_probability_maps(ensemble(maps_a, maps_b), args.out, case_id)
        print(f"ensembled {case_id}")
    return 0


def cmd_postprocess(args, cfg):
    from .inference import load_probability_maps, postprocess
    from .nifti import write_nifti

    _echo(cfg, args.out)
    maps_dir = _require_dir(args.maps, "maps")
    out = Path(args.out)
    for case_id in _map_case_ids(maps_dir):
        maps = load_probability_maps(maps_dir, case_id)
        result = postprocess(maps, ratio=cfg.ratio, threshold=cfg.post_threshold,
                             iterations=cfg.post_iterations)
        write_nifti(result.labels, out / f"{case_id}_seg.nii")
        print(f"postprocessed {case_id}")
    return 0


def cmd_eval(args, cfg):
    from .metrics import (
        compare_systems,
        evaluate_cohort,
        format_summary,
        write_case_csv,
    )

    _echo(cfg, args.out)
    pred = _require_dir(args.pred, "prediction")
    ref = _require_dir(args.ref, "reference")
    reports, summary = evaluate_cohort(pred, ref,
                                       empty_abnormality=cfg.empty_abnormality,
                                       resamples=cfg.bootstrap_resamples,
                                       seed=cfg.seed)
    p_values = None
    if args.baseline:
        base_reports, _ = evaluate_cohort(_require_dir(args.baseline, "baseline"),
                                          ref,
                                          empty_abnormality=cfg.empty_abnormality,
                                          resamples=cfg.bootstrap_resamples,
                                          seed=cfg.seed)
        p_values = compare_systems(reports, base_reports)
    table = format_summary(summary, p_values)
    print(table)
    if args.out:
        out = Path(args.out)
        write_case_csv(out / "cases.csv", reports)
        (out / "summary.txt").write_text(table + "\n")
    return 0


def cmd_ablate(args, cfg):
    if args.all:
        if not args.out:
            raise ConfigError("--all requires --out DIR")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name in PRESET_NAMES:
            preset = apply_preset(cfg, name)
            (out / f"{name}.cfg").write_text(render_config(preset) + "\n")
            print(f"{name}  sha256 {config_hash(preset)}")
        return 0
    preset = apply_preset(cfg, args.preset)
    _echo(preset)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(render_config(preset) + "\n")
    return 0


# ------------------------------------------------------------------- parser


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    p = argparse.ArgumentParser(prog="kidneyseg",
                                description="multi-resolution CT segmentation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", parents=[common],
                        help="generate a synthetic cohort")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("preprocess", parents=[common],
                        help="clip and resample a cohort to both grids")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("pretrain-lowres", parents=[common],
                        help="train the coarse-grid network alone")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", parents=[common],
                        help="train the segmentation model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lowres", help="frozen low-res checkpoint for the cascade")

    sp = sub.add_parser("infer", parents=[common],
                        help="write per-class probability maps")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="test",
                    choices=("train", "val", "test", "all"))

    sp = sub.add_parser("ensemble", parents=[common],
                        help="average two probability map directories")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("postprocess", parents=[common],
                        help="turn probability maps into label volumes")
    sp.add_argument("--maps", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", parents=[common],
                        help="score predictions against references")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out")
    sp.add_argument("--baseline", help="second prediction dir for p-values")

    sp = sub.add_parser("ablate", parents=[common],
                        help="materialize experiment preset configs")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", choices=PRESET_NAMES)
    group.add_argument("--all", action="store_true")
    sp.add_argument("--out")

    return p


_DISPATCH = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "pretrain-lowres": cmd_pretrain_lowres,
    "train": cmd_train,
    "infer": cmd_infer,
    "ensemble": cmd_ensemble,
    "postprocess": cmd_postprocess,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(cfg.workers)
        return _DISPATCH[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (IoError, MissingCase, FileNotFoundError) as exc:
        print(f"error: missing-input: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"error: numerics: {exc}", file=sys.stderr)
        return 4
    except KidneySegError as exc:
        print(f"error: pipeline: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

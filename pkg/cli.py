from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from config import APP_NAME, VERSION, PipelineConfig, default_config
from core import export, pipeline, selftest, synthetic
from core.checkpoint import load_checkpoint
from core.encoding import EncodingSpec
from core.errors import ConfigError, DataError
from core.fields import ExprField
from core.logger import get_logger, setup_logging
from core.metrics import evaluate
from core.rigid import CoordinateScaler
from core.slices import Slice, load_coords, load_slice, save_slice
from core.utils import staged_dir, write_csv, write_json

log = get_logger(__name__)

THREADS_ENV = "INSTALIGN_THREADS"


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        limit = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return threadpool_limits(limits=max(1, limit))


def _pair_arg(value: str) -> Tuple[Path, Optional[Path]]:
    parts = [p for p in value.split(",") if p]
    if not 1 <= len(parts) <= 2:
        raise argparse.ArgumentTypeError(f"expected COORDS[,EXPR], got {value!r}")
    return Path(parts[0]), (Path(parts[1]) if len(parts) == 2 else None)


def _load(pair: Tuple[Path, Optional[Path]], what: str) -> Slice:
    coords, expr = pair
    if expr is None:
        raise DataError(f"{what}: expected COORDS,EXPR")
    return load_slice(coords, expr)


def load_cfg(args) -> PipelineConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "config", None):
        return PipelineConfig.load(args.config, **overrides)
    cfg = default_config()
    return replace(cfg, **overrides).validate() if overrides else cfg


def _start(args) -> PipelineConfig:
    cfg = load_cfg(args)
    cfg.paths.ensure()
    setup_logging(cfg.paths.log_dir, cfg.log_level)
    return cfg


def cmd_align(args) -> int:
    cfg = _start(args)
    src, ref = _load(args.src, "--src"), _load(args.ref, "--ref")
    truth = _read_truth(args.truth, src.ids) if args.truth else None
    with staged_dir(args.out) as stage:
        run_cfg = replace(cfg, paths=replace(cfg.paths, checkpoint_dir=stage / "checkpoints"))
        result = pipeline.align_pair(run_cfg, src, ref, truth=truth)
        export.write_result(result, stage, cfg, ref.coords)
    log.info("Alignment written to %s (%.1f s)", args.out, result.runtime_s)
    return 0


def _read_truth(path: Path, src_ids: Sequence[str]) -> np.ndarray:
    frame = pd.read_csv(path, dtype={"src_id": str})
    missing = [c for c in ("src_id", "ref_x", "ref_y") if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    frame = frame.set_index("src_id")
    absent = [i for i in src_ids if i not in frame.index]
    if absent:
        raise DataError(f"{path}: no ground truth for {len(absent)} source ids", absent)
    return frame.loc[list(src_ids), ["ref_x", "ref_y"]].to_numpy(dtype=np.float64)


def cmd_eval(args) -> int:
    cfg = _start(args)
    ref_ids, ref_xy, ref_labels = load_coords(args.ref[0])
    src_ids, src_xy, src_labels = load_coords(args.aligned)
    if args.labels:
        lab_ids, _, labels = load_coords(args.labels)
        if labels is None:
            raise DataError(f"{args.labels}: no label column")
        lookup = dict(zip(lab_ids, labels))
        absent = [i for i in src_ids if i not in lookup]
        if absent:
            raise DataError(f"{args.labels}: no label for {len(absent)} aligned ids", absent)
        src_labels = np.array([lookup[i] for i in src_ids])
    if (src_labels is None) != (ref_labels is None):
        log.warning("Labels present on only one side; label metrics skipped")
        src_labels = ref_labels = None
    truth = _read_truth(args.truth, src_ids) if args.truth else None
    report = evaluate(
        src_xy, ref_xy, src_labels, ref_labels, truth=truth,
        ot_reg_scale=cfg.ot_reg_scale, ot_max_iter=cfg.ot_max_iter, ot_tol=cfg.ot_tol, seed=cfg.seed,
    )
    payload = report.to_dict()
    out = Path(args.out) if args.out else Path(args.aligned).with_name("eval_report.json")
    write_json(out, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_embed(args) -> int:
    cfg = _start(args)
    ids, coords, _ = load_coords(args.slice[0])
    networks, meta = load_checkpoint(args.checkpoint)
    if "field_ref" not in networks or "ref_scaler" not in meta:
        raise DataError(f"{args.checkpoint}: not an alignment checkpoint")
    params, spec = networks["field_ref"]
    fld = ExprField(params, spec, EncodingSpec.from_dict(meta["encoding"]))
    scaler = CoordinateScaler.from_dict(meta["ref_scaler"])
    emb, _ = fld.forward(scaler.normalize(coords), float(meta["alpha"]))
    write_csv(Path(args.out), export.embeddings_frame(ids, np.atleast_2d(emb)))
    log.info("Embedded %d spots with seed-%s checkpoint", len(ids), meta.get("seed", cfg.seed))
    return 0


def cmd_synth(args) -> int:
    _start(args)
    data = {}
    if args.spec:
        try:
            data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synthetic spec {args.spec}: {exc}") from exc
    if args.seed is not None:
        data["seed"] = args.seed
    spec = synthetic.SyntheticSpec.from_dict(data)
    pair = synthetic.generate_synthetic(spec)
    with staged_dir(args.out) as stage:
        save_slice(pair.ref, stage / "ref_coords.csv", stage / "ref_expr.csv", args.format)
        save_slice(pair.src, stage / "src_coords.csv", stage / "src_expr.csv", args.format)
        write_csv(stage / "ground_truth.csv", pair.ground_truth())
        write_json(stage / "spec.json", spec.to_dict())
    log.info("Synthetic pair written to %s", args.out)
    return 0


def cmd_selftest(args) -> int:
    setup_logging(None, "INFO")
    report = selftest.run_selftest(args.seeds)
    print(json.dumps(report.to_dict(), indent=2))
    return 0 if report.passed else 1


def cmd_stack(args) -> int:
    cfg = _start(args)
    slices = [_load(p, "--slice") for p in args.slice]
    series = pipeline.align_series(cfg, slices)
    with staged_dir(args.out) as stage:
        frames = []
        for k, (sl, coords) in enumerate(zip(slices, series.coords)):
            frame = export.points_frame(sl.ids, coords, sl.labels)
            frame.insert(0, "slice", k)
            frames.append(frame)
        write_csv(stage / "stacked_coords.csv", pd.concat(frames, ignore_index=True))
        for k, res in enumerate(series.results, start=1):
            export.write_result(res, stage / f"pair_{k:02d}", replace(cfg, seed=res.seed), series.coords[k - 1])
    log.info("Stacked %d slices into %s", len(slices), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=APP_NAME, description="Unsupervised non-rigid alignment of spatial transcriptomics slices"
    )
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_align = sub.add_parser("align", help="Align a source slice onto a reference slice")
    p_align.add_argument("--ref", type=_pair_arg, required=True, metavar="COORDS,EXPR")
    p_align.add_argument("--src", type=_pair_arg, required=True, metavar="COORDS,EXPR")
    p_align.add_argument("--seed", type=int, required=True)
    p_align.add_argument("--config", type=Path, help="key = value or JSON config file")
    p_align.add_argument("--truth", type=Path, help="ground_truth.csv for correspondence error")
    p_align.add_argument("--out", type=Path, required=True)
    p_align.set_defaults(func=cmd_align)

    p_eval = sub.add_parser("eval", help="Score aligned coordinates against a reference")
    p_eval.add_argument("--ref", type=_pair_arg, required=True, metavar="COORDS[,EXPR]")
    p_eval.add_argument("--aligned", type=Path, required=True, help="CSV with id,x,y[,label]")
    p_eval.add_argument("--labels", type=Path, help="CSV with id,label for the aligned points")
    p_eval.add_argument("--truth", type=Path)
    p_eval.add_argument("--config", type=Path)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", type=Path, help="report path (default: next to --aligned)")
    p_eval.set_defaults(func=cmd_eval)

    p_embed = sub.add_parser("embed", help="Canonical-field embeddings for reference-frame coordinates")
    p_embed.add_argument("--slice", type=_pair_arg, required=True, metavar="COORDS[,EXPR]")
    p_embed.add_argument("--checkpoint", type=Path, required=True)
    p_embed.add_argument("--config", type=Path)
    p_embed.add_argument("--out", type=Path, required=True)
    p_embed.set_defaults(func=cmd_embed)

    p_synth = sub.add_parser("synth", help="Generate a synthetic slice pair with ground truth")
    p_synth.add_argument("--spec", type=Path, help="JSON SyntheticSpec (defaults if omitted)")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--format", choices=("dense", "triplet"), default="dense")
    p_synth.add_argument("--config", type=Path)
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_self = sub.add_parser("selftest", help="Gradient checks and metric oracles")
    p_self.add_argument("--seeds", type=int, default=10)
    p_self.set_defaults(func=cmd_selftest)

    p_stack = sub.add_parser("stack", help="Chain pairwise alignments of consecutive slices")
    p_stack.add_argument("--slice", type=_pair_arg, action="append", required=True, metavar="COORDS,EXPR")
    p_stack.add_argument("--seed", type=int, required=True)
    p_stack.add_argument("--config", type=Path)
    p_stack.add_argument("--out", type=Path, required=True)
    p_stack.set_defaults(func=cmd_stack)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "stack" and len(args.slice) < 2:
        parser.print_usage(sys.stderr)
        print(f"{APP_NAME} stack: at least two --slice arguments are required", file=sys.stderr)
        return 2
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        return _fail(exc, 2)
    except Exception as exc:
        log.debug("Command failed", exc_info=True)
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))

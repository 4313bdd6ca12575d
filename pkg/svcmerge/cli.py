from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import report
from .calibrate import (
    CalibrationConfig,
    CalibrationMode,
    alpha_profile,
    calibrate_store,
    is_selected,
    preference_factors,
    subspace_factors,
)
from .checkpoint import DeltaStore, TensorStore, atomic_write_all, compute_deltas, encode_checkpoint, load_checkpoint
from .config import Config, load_config
from .errors import ConfigError, InvalidAlphaError, SvcMergeError
from .linalg import frobenius, svd, unfold
from .logs import for_parameter, setup_logging
from .merging import MergedDelta, MergeMethod, MergeTag, assemble_weights, merge_store
from .spectral import Basis, cross_term_concentration, cross_terms, gap_report, response_table

logger = logging.getLogger("svcmerge.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


@dataclass
class RunConfig:
    subcommand: str
    pretrained_path: str
    model_paths: List[str]
    method: MergeMethod
    out_path: str
    calibration: Optional[CalibrationConfig] = None
    lam: float = 1.0
    report_path: Optional[str] = None
    merged_path: Optional[str] = None
    include: List[str] = field(default_factory=list)
    exclude: List[str] = field(default_factory=list)
    verbose: bool = False
    preference_sweep: bool = False
    alpha_sweep: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.model_paths)


# -------------------- argument parsing --------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error code={EXIT_USAGE} kind=UsageError parameter=- message={json.dumps(message)}\n")


def _alpha_list(text: str) -> List[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values or not all(0.0 < v <= 1.0 for v in values):
        raise argparse.ArgumentTypeError("alpha values must lie in (0, 1]")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--pretrained", required=True, help="pre-trained checkpoint")
    common.add_argument("--models", required=True, nargs="+", help="fine-tuned checkpoints, in task order")
    common.add_argument("--method", choices=[t.value for t in MergeTag], default="sum", help="base merge (default: sum)")
    common.add_argument("--ties-trim", type=float, default=0.2, help="TIES: fraction of entries kept per task")
    common.add_argument("--dare-drop", type=float, default=0.9, help="DARE: drop probability")
    common.add_argument("--dare-base", choices=["sum", "average"], default="sum", help="DARE: combination after dropping")
    common.add_argument("--seed", type=int, default=0, help="DARE seed (unsigned 64-bit)")
    common.add_argument("--alpha", type=float, default=None, help="floor on s inside gamma (default: 1/K)")
    common.add_argument("--profile", choices=["default", "tsv"], default="default",
                        help="tsv: alpha=1 (suppression-only) unless --alpha is given")
    common.add_argument("--target-task", type=int, default=None, help="preference mode: 0-based index into --models")
    common.add_argument("--row-space", action="store_true", help="measure overlap with right singular vectors")
    common.add_argument("--include", action="append", default=[], metavar="GLOB", help="only calibrate matching parameters")
    common.add_argument("--exclude", action="append", default=[], metavar="GLOB", help="never calibrate matching parameters")
    common.add_argument("--report", default=None, metavar="PATH", help="JSON report path")
    common.add_argument("--out", required=True, metavar="PATH", help="output checkpoint (analyze: CSV)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging and per-parameter summaries")

    parser = _Parser(prog="svcmerge", description="Merge fine-tuned checkpoints and calibrate singular values.")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p_merge = sub.add_parser("merge", parents=[common], help="base merge, optional SVC, write checkpoint")
    p_merge.add_argument("--svc", action="store_true", help="apply singular value calibration")
    p_merge.add_argument("--lambda", dest="lam", type=float, default=1.0, help="global scale of the merged update")

    p_analyze = sub.add_parser("analyze", parents=[common], help="emit spectral over-counting diagnostics")
    p_analyze.add_argument("--preference", action="store_true", help="also emit per-target preference factors")
    p_analyze.add_argument("--alpha-sweep", type=_alpha_list, default=None, metavar="A1,A2,...",
                           help="also emit calibration strength for these alphas")

    p_cal = sub.add_parser("calibrate", parents=[common], help="apply SVC to an existing merged checkpoint")
    p_cal.add_argument("--merged", required=True, metavar="PATH", help="merged checkpoint written with lambda=1")
    p_cal.add_argument("--lambda", dest="lam", type=float, default=1.0, help="global scale of the calibrated update")
    return parser


def build_run_config(args: argparse.Namespace) -> RunConfig:
    method = MergeMethod(
        tag=MergeTag(args.method),
        ties_trim_fraction=args.ties_trim,
        dare_drop_rate=args.dare_drop,
        dare_base=MergeTag(args.dare_base),
        seed=args.seed,
    )
    alpha = args.alpha
    if alpha is None and args.profile == "tsv":
        alpha = 1.0
    if args.target_task is not None and not 0 <= args.target_task < len(args.models):
        raise ConfigError("--target-task out of range", detail={"target": args.target_task, "tasks": len(args.models)})
    wants_svc = args.subcommand != "merge" or args.svc
    calibration = None
    if wants_svc:
        calibration = CalibrationConfig(
            alpha=alpha,
            mode=CalibrationMode.PREFERENCE if args.target_task is not None else CalibrationMode.AGGREGATE,
            target_task=args.target_task,
            basis=Basis.ROW if args.row_space else Basis.COLUMN,
        )
    elif alpha is not None and not 0.0 < alpha <= 1.0:
        raise InvalidAlphaError("alpha must be in (0, 1]", detail={"value": alpha})
    return RunConfig(
        subcommand=args.subcommand,
        pretrained_path=args.pretrained,
        model_paths=list(args.models),
        method=method,
        out_path=args.out,
        calibration=calibration,
        lam=getattr(args, "lam", 1.0),
        report_path=args.report,
        merged_path=getattr(args, "merged", None),
        include=list(args.include),
        exclude=list(args.exclude),
        verbose=args.verbose,
        preference_sweep=getattr(args, "preference", False),
        alpha_sweep=list(getattr(args, "alpha_sweep", None) or []),
    )


# -------------------- pipeline pieces --------------------

def _tune(cal: CalibrationConfig, config: Config) -> CalibrationConfig:
    return replace(cal, epsilon_resp=config.response_eps, sigma_noise_floor=config.noise_floor)


def load_inputs(cfg: RunConfig) -> Tuple[TensorStore, List[DeltaStore]]:
    pretrained = load_checkpoint(cfg.pretrained_path)
    deltas = []
    for path in cfg.model_paths:
        try:
            deltas.append(compute_deltas(pretrained, load_checkpoint(path)))
        except SvcMergeError as exc:
            exc.path = exc.path or path
            raise
    logger.info("Loaded pre-trained checkpoint (%d tensors) and %d task(s)", len(pretrained), len(deltas))
    return pretrained, deltas


def _print_summaries(pretrained: TensorStore, before: MergedDelta, after: MergedDelta) -> None:
    for name in after.names():
        result = after.calibration.get(name)
        line = f"{name} shape={list(pretrained[name].shape)}"
        if result is None:
            line += " calibrated=no"
        else:
            line += (
                f" calibrated=yes rank={result.rank} gamma_min={result.gamma.min():.6g}"
                f" gamma_max={result.gamma.max():.6g}"
            )
        line += f" norm={frobenius(before[name]):.6g}->{frobenius(after[name]):.6g}"
        print(line)


def _calibration_report(cfg: RunConfig, pretrained: TensorStore, merged: MergedDelta, command: str) -> bytes:
    doc = report.document(
        command,
        method=cfg.method.describe(),
        tasks=cfg.model_paths,
        lam=cfg.lam,
        calibration=None if cfg.calibration is None else {
            "alpha": cfg.calibration.resolve_alpha(cfg.k),
            "mode": cfg.calibration.mode.value,
            "target_task": cfg.calibration.target_task,
            "basis": cfg.calibration.basis.value,
        },
        parameters=[report.calibration_entry(n, pretrained[n].shape, merged.calibration.get(n)) for n in merged.names()],
    )
    return report.dumps(doc)


def _finish(cfg: RunConfig, config: Config, pretrained: TensorStore, deltas: List[DeltaStore], merged: MergedDelta, command: str) -> int:
    calibrated = merged
    if cfg.calibration is not None:
        calibrated = calibrate_store(
            deltas,
            merged,
            _tune(cfg.calibration, config),
            include=cfg.include,
            exclude=cfg.exclude,
            workers=config.workers,
            max_sweeps=config.svd_max_sweeps,
        )
    weights = assemble_weights(pretrained, calibrated, cfg.lam)
    # checkpoint and report land together or not at all
    outputs = [(cfg.out_path, encode_checkpoint(weights))]
    if cfg.report_path:
        outputs.append((cfg.report_path, _calibration_report(cfg, pretrained, calibrated, command)))
    atomic_write_all(outputs)
    if cfg.verbose:
        _print_summaries(pretrained, merged, calibrated)
    logger.info("Wrote %s (%d tensors, lambda=%g)", cfg.out_path, len(weights), cfg.lam)
    return EXIT_OK


# -------------------- subcommands --------------------

def run_merge(cfg: RunConfig, config: Optional[Config] = None) -> int:
    config = config or load_config()
    pretrained, deltas = load_inputs(cfg)
    merged = merge_store(deltas, cfg.method, task_ids=cfg.model_paths)
    return _finish(cfg, config, pretrained, deltas, merged, "merge")


def run_calibrate(cfg: RunConfig, config: Optional[Config] = None) -> int:
    config = config or load_config()
    pretrained, deltas = load_inputs(cfg)
    try:
        merged_delta = compute_deltas(pretrained, load_checkpoint(cfg.merged_path))
    except SvcMergeError as exc:
        exc.path = exc.path or cfg.merged_path
        raise
    merged = MergedDelta(dict(merged_delta.items()), cfg.method, len(deltas))
    return _finish(cfg, config, pretrained, deltas, merged, "calibrate")


def _analyze_parameter(name: str, deltas: List[DeltaStore], merged: np.ndarray, cfg: RunConfig, cal: CalibrationConfig, config: Config) -> Dict[str, Any]:
    log = for_parameter(logger, name)
    try:
        tasks = [unfold(d[name].reshape(1, -1) if merged.ndim == 1 else d[name]) for d in deltas]
        mat = unfold(merged.reshape(1, -1) if merged.ndim == 1 else merged)
        decomp = svd(mat, max_sweeps=config.svd_max_sweeps)
        table = response_table(decomp, tasks, basis=cal.basis, eps=cal.epsilon_resp, noise_floor=cal.sigma_noise_floor)
        overlap = gap_report(decomp, tasks, basis=cal.basis, parameter=name, table=table)
        alpha = cal.resolve_alpha(cfg.k)
        gamma = subspace_factors(table, alpha, cal)
        cross = cross_terms(decomp, tasks, cal.basis)
    except SvcMergeError as exc:
        raise exc.with_parameter(name)
    top10 = max(1, decomp.rank // 10)
    conc = cross_term_concentration(cross, [1, 5, top10])
    concentration = {"top1": conc[1], "top5": conc[5], "top10pct": conc[top10]}
    log.debug("analyzed rank=%d max_gap=%.4e", decomp.rank, float(overlap.gap.max()))
    return report.analysis_entry(
        name,
        merged.shape,
        overlap,
        gamma,
        cross,
        concentration,
        preference=preference_factors(table, alpha) if cfg.preference_sweep else None,
        alpha_sweep=alpha_profile(table, decomp.sigma, cfg.alpha_sweep, cal) if cfg.alpha_sweep else None,
    )


def run_analyze(cfg: RunConfig, config: Optional[Config] = None) -> int:
    config = config or load_config()
    _, deltas = load_inputs(cfg)
    merged = merge_store(deltas, cfg.method, task_ids=cfg.model_paths)
    cal = _tune(cfg.calibration or CalibrationConfig(), config)

    names = [n for n in merged.names() if merged[n].ndim >= 1 and merged[n].size > 0 and is_selected(n, cfg.include, cfg.exclude)]
    skipped = [n for n in merged.names() if n not in names]

    def _one(name: str) -> Dict[str, Any]:
        return _analyze_parameter(name, deltas, merged[name], cfg, cal, config)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            entries = list(executor.map(_one, names))
    else:
        entries = [_one(n) for n in names]

    doc = report.document(
        "analyze",
        method=cfg.method.describe(),
        tasks=cfg.model_paths,
        alpha=cal.resolve_alpha(cfg.k),
        basis=cal.basis.value,
        mode=cal.mode.value,
        target_task=cal.target_task,
        parameters=entries,
        skipped=skipped,
    )
    report_path = cfg.report_path or str(Path(cfg.out_path).with_suffix(".json"))
    atomic_write_all([(cfg.out_path, report.render_csv(entries)), (report_path, report.dumps(doc))])
    if cfg.verbose:
        for entry in entries:
            gaps = [row["gap"] for row in entry["subspaces"]]
            print(f"{entry['name']} rank={entry['rank']} max_gap={max(gaps):.6g} gap_r1={gaps[0]:.6g}")
    logger.info("Analyzed %d parameter(s); CSV=%s JSON=%s", len(entries), cfg.out_path, report_path)
    return EXIT_OK


COMMANDS = {"merge": run_merge, "analyze": run_analyze, "calibrate": run_calibrate}


def _error_line(code: int, kind: str, parameter: Optional[str], message: str) -> str:
    return f"error code={code} kind={kind} parameter={parameter or '-'} message={json.dumps(message, ensure_ascii=False)}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        config = load_config()
        setup_logging(args.verbose, config.log_level)
        cfg = build_run_config(args)
        return COMMANDS[cfg.subcommand](cfg, config)
    except SvcMergeError as exc:
        logger.error("%s failed: %s", args.subcommand, exc)
        print(_error_line(exc.exit_code, exc.kind, exc.parameter, str(exc)), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        # anything unforeseen still ends in one parsable line, reported as a data error
        logger.error("%s failed unexpectedly: %r", args.subcommand, exc, exc_info=args.verbose)
        print(_error_line(EXIT_DATA, type(exc).__name__, None, str(exc)), file=sys.stderr)
        return EXIT_DATA

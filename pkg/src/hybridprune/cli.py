"""Command-line pipeline: init-toy, make-calib, train, score, prune, search,
distill, eval, compare, sweep-mamba.

Exit codes: 0 success, 2 input error, 3 empty data, 4 plan mismatch,
5 divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import markov_transitions, sample_markov
from .distiller import DivergenceError, KDConfig, distill, evaluate, fkld, trace_csv, train_lm
from .formats import FormatError, load_checkpoint, read_calibration, save_checkpoint, write_calibration
from .importance import METRICS, ScoreSet, compute_scores
from .model import ModelConfig, init_model, param_count, token_cross_entropy
from .numkit import InputError, ParameterError, UsageError
from .pruner import PlanError, PrunePlan, apply_plan, build_plan
from .searcher import AXES, report_csv, run_search
from .ssm import ConfigError

EXIT_OK, EXIT_INPUT, EXIT_EMPTY, EXIT_PLAN, EXIT_DIVERGED = 0, 2, 3, 4, 5

_MODEL_INT_KEYS = ("d_e", "d_ffn", "m_h", "m_d", "g", "d_s", "n_att_heads", "vocab", "conv_k",
                   "att_head_dim", "embed_norm_dim", "mamba_norm_dim", "n_layers")
_KD_INT_KEYS = ("warmup_steps", "total_steps", "batch_size", "seq_len", "seed")
_KD_FLOAT_KEYS = ("tau", "lr_start", "lr_end", "clip_norm")


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _read_ini(path: str) -> configparser.ConfigParser:
    if not Path(path).is_file():
        raise CLIError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise CLIError(f"{path}: {exc}") from exc
    return parser


def model_config_from_ini(path: str) -> ModelConfig:
    """``[model]`` section; keys mirror ModelConfig fields."""
    parser = _read_ini(path)
    if "model" not in parser:
        raise CLIError(f"{path}: missing [model] section")
    raw = dict(parser["model"])
    values: dict = {}
    try:
        for key, text in raw.items():
            if key == "layer_pattern":
                values[key] = text.strip()
            elif key in _MODEL_INT_KEYS:
                values[key] = int(text)
            elif key == "norm_eps":
                values[key] = float(text)
            else:
                raise CLIError(f"{path}: unknown [model] key {key!r}")
        return ModelConfig(**values)
    except (ValueError, TypeError) as exc:
        raise CLIError(f"{path}: invalid model config: {exc}") from exc


def kd_config_from_ini(path: str | None, **overrides) -> KDConfig:
    values: dict = {}
    if path:
        parser = _read_ini(path)
        if "kd" in parser:
            for key, text in parser["kd"].items():
                if key in _KD_INT_KEYS:
                    values[key] = int(text)
                elif key in _KD_FLOAT_KEYS:
                    values[key] = None if text.strip().lower() == "none" else float(text)
                else:
                    raise CLIError(f"{path}: unknown [kd] key {key!r}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return KDConfig(**values)
    except (ParameterError, TypeError) as exc:
        raise CLIError(f"invalid kd config: {exc}") from exc


def grid_from_ini(path: str) -> dict[str, list[int]]:
    """``[grid]`` section, one comma-separated list per axis."""
    parser = _read_ini(path)
    if "grid" not in parser:
        raise CLIError(f"{path}: missing [grid] section")
    grid = {}
    for key, text in parser["grid"].items():
        if key not in AXES:
            raise CLIError(f"{path}: unknown grid axis {key!r}; expected {AXES}")
        grid[key] = [int(v) for v in text.replace(",", " ").split()]
    return grid


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _manifest(args, inputs: dict, outputs: dict) -> dict:
    return {
        "command": args.command,
        "config": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
    }


def _write_sidecar(path: str, manifest: dict, started: float) -> None:
    full = dict(manifest, wall_clock_s=round(time.time() - started, 3), finished_at=time.strftime("%Y-%m-%dT%H:%M:%S"))
    Path(str(path) + ".manifest.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")


def _load_model(path: str):
    if not Path(path).is_file():
        raise CLIError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)[0]
    except (FormatError, ValueError, KeyError) as exc:
        raise CLIError(f"{path}: {exc}") from exc


def _load_tokens(path: str, what: str = "calibration") -> list[np.ndarray]:
    if not Path(path).is_file():
        raise CLIError(f"{what} file not found: {path}")
    try:
        seqs = read_calibration(path)
    except FormatError as exc:
        raise CLIError(str(exc)) from exc
    seqs = [s for s in seqs if len(s) > 0]
    if not seqs:
        raise CLIError(f"{what} file {path} contains no tokens", EXIT_EMPTY)
    return seqs


def _write_text(path: str, text: str) -> None:
    Path(path).write_text(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_init_toy(args) -> int:
    cfg = model_config_from_ini(args.config)
    model = init_model(cfg, seed=args.seed)
    manifest = _manifest(args, {}, {"checkpoint": args.out})
    save_checkpoint(args.out, model, manifest)
    _write_sidecar(args.out, manifest, args._started)
    print(f"wrote {args.out}: {param_count(cfg)} parameters")
    return EXIT_OK


def cmd_make_calib(args) -> int:
    if args.vocab is None:
        if not args.config:
            raise CLIError("make-calib needs --vocab or --config")
        vocab = model_config_from_ini(args.config).vocab
    else:
        vocab = args.vocab
    P = markov_transitions(vocab, args.branching, seed=args.chain_seed)
    seqs = sample_markov(P, args.n, args.length, seed=args.seed)
    write_calibration(args.out, list(seqs))
    _write_sidecar(args.out, _manifest(args, {}, {"tokens": args.out}), args._started)
    print(f"wrote {args.out}: {args.n} sequences x {args.length} tokens")
    return EXIT_OK


def cmd_train(args) -> int:
    model = _load_model(args.model)
    data = _load_tokens(args.data, "training")
    trained, trace = train_lm(model, data, steps=args.steps, lr=args.lr, batch_size=args.batch_size,
                              seq_len=args.seq_len, seed=args.seed)
    manifest = _manifest(args, {"model": args.model, "data": args.data}, {"checkpoint": args.out})
    save_checkpoint(args.out, trained, manifest)
    _write_sidecar(args.out, manifest, args._started)
    if args.trace:
        _write_text(args.trace, trace_csv(trace))
    print(f"final train loss {trace[-1][2]:.6f}")
    return EXIT_OK


def cmd_score(args) -> int:
    model = _load_model(args.model)
    calib = _load_tokens(args.calib)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise CLIError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    try:
        scores = compute_scores(model, calib, metrics, aggregation=args.aggregation,
                                kld_samples=args.kld_samples, seed=args.seed)
    except UsageError as exc:
        raise CLIError(str(exc), EXIT_EMPTY) from exc
    report = scores.to_dict()
    report["metrics"] = metrics
    report["layer_pattern"] = "".join(model.config.layer_pattern)
    report["manifest"] = _manifest(args, {"model": args.model, "calib": args.calib}, {"report": args.out})
    _write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_sidecar(args.out, report["manifest"], args._started)
    if args.csv and scores.layer_kld is not None:
        _write_text(args.csv, scores.layer_kld_csv(model.config.layer_pattern))
    print(f"wrote {args.out}")
    return EXIT_OK


def _load_scores(path: str) -> ScoreSet:
    if not Path(path).is_file():
        raise CLIError(f"score report not found: {path}")
    return ScoreSet.from_dict(json.loads(Path(path).read_text()))


def _load_plan(path: str) -> PrunePlan:
    if not Path(path).is_file():
        raise CLIError(f"plan not found: {path}")
    try:
        return PrunePlan.from_json(Path(path).read_text())
    except (ValueError, KeyError, TypeError) as exc:
        raise CLIError(f"{path}: malformed plan: {exc}") from exc


def cmd_prune(args) -> int:
    model = _load_model(args.model)
    if args.plan:
        plan = _load_plan(args.plan)
    elif args.scores:
        targets = {k: getattr(args, k) for k in ("n_layers", "d_e", "d_ffn", "m_h", "m_d", "n_att_heads")}
        plan = build_plan(model.config, _load_scores(args.scores), metric=args.metric, **targets)
    else:
        raise CLIError("prune needs --plan or --scores")
    pruned = apply_plan(model, plan)
    manifest = _manifest(args, {"model": args.model, "plan": args.plan, "scores": args.scores}, {"checkpoint": args.out})
    save_checkpoint(args.out, pruned, manifest)
    _write_sidecar(args.out, manifest, args._started)
    if args.plan_out:
        _write_text(args.plan_out, plan.to_json() + "\n")
    print(f"wrote {args.out}: {pruned.n_params()} parameters")
    return EXIT_OK


def cmd_search(args) -> int:
    model = _load_model(args.model)
    calib = _load_tokens(args.calib)
    train = _load_tokens(args.train, "training") if args.train else calib
    val = _load_tokens(args.val, "validation") if args.val else calib
    scores = _load_scores(args.scores) if args.scores else compute_scores(
        model, calib, ("mamba", "ffn", "emb", "flap", "layer_kld"), kld_samples=args.kld_samples, seed=args.seed)
    grid = grid_from_ini(args.grid)
    budget = args.budget if args.budget is not None else param_count(model.config) // 2
    kd_cfg = kd_config_from_ini(args.config, seed=args.seed)
    result = run_search(model, scores, grid, budget, calib, train, val, tolerance=args.tolerance, top_k=args.topk,
                        kd_tokens=args.kd_tokens, kd_config=kd_cfg, metric=args.metric, jobs=args.jobs)
    _write_text(args.out, report_csv(result.report()))
    _write_sidecar(args.out, _manifest(args, {"model": args.model, "calib": args.calib}, {"report": args.out}),
                   args._started)
    for note in result.notes:
        print(note)
    if result.winner is None:
        print("no candidate inside the budget")
        return EXIT_OK
    if args.plan_out:
        _write_text(args.plan_out, result.plan.to_json() + "\n")
    w = result.winner
    print(f"winner: layers={w.n_layers} emb={w.d_e} ffn={w.d_ffn} heads={w.m_h} head_channels={w.m_d} params={w.params}")
    return EXIT_OK


def cmd_distill(args) -> int:
    student = _load_model(args.student)
    teacher = _load_model(args.teacher)
    data = _load_tokens(args.data, "training")
    cfg = kd_config_from_ini(args.config, seed=args.seed, total_steps=args.steps)
    manifest = _manifest(args, {"student": args.student, "teacher": args.teacher, "data": args.data},
                         {"checkpoint": args.out})

    def checkpoint(step, model):
        if args.checkpoint_every and step % args.checkpoint_every == 0:
            save_checkpoint(f"{args.out}.step{step}", model, dict(manifest, step=step))

    try:
        trained, trace = distill(student, teacher, data, cfg, on_step=checkpoint)
    except DivergenceError as exc:
        if args.trace:
            _write_text(args.trace, trace_csv(exc.trace))
        raise CLIError(f"divergence: {exc}", EXIT_DIVERGED) from exc
    save_checkpoint(args.out, trained, manifest)
    _write_sidecar(args.out, manifest, args._started)
    if args.trace:
        _write_text(args.trace, trace_csv(trace))
    print(f"loss {trace[0][2]:.6f} -> {trace[-1][2]:.6f} over {len(trace)} steps")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    data = _load_tokens(args.data, "evaluation")
    teacher = _load_model(args.teacher) if args.teacher else None
    result = evaluate(model, data, teacher, args.tau)
    print(f"cross_entropy {result['cross_entropy']:.6f}")
    if "fkld" in result:
        print(f"fkld {result['fkld']:.6e}")
    if args.out:
        _write_text(args.out, json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _parse_levels(text: str | None) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()] if text else []


def comparison_rows(model, calib, scores: ScoreSet, ffn_levels, head_levels, att_levels) -> list[tuple]:
    """(pruning type, configuration, L2 loss, FLAP loss) rows for the same targets."""
    base = token_cross_entropy(model, calib)
    rows = [("baseline", "no pruning", base, base)]
    axes = [("ffn", "d_ffn", v) for v in ffn_levels] + [("attention", "n_att_heads", v) for v in att_levels]
    axes += [("mamba", "m_h", v) for v in head_levels]
    for kind, key, value in axes:
        losses = []
        for metric in ("l2", "flap"):
            plan = build_plan(model.config, scores, metric=metric, **{key: value})
            losses.append(token_cross_entropy(apply_plan(model, plan), calib))
        rows.append((kind, f"{key}={value}", *losses))
    return rows


def cmd_compare(args) -> int:
    model = _load_model(args.model)
    calib = _load_tokens(args.calib)
    cfg = model.config
    scores = compute_scores(model, calib, ("mamba", "ffn", "flap", "att"))
    ffn = _parse_levels(args.ffn) or [cfg.d_ffn * 3 // 4, cfg.d_ffn // 2, cfg.d_ffn // 4]
    heads = _parse_levels(args.heads) or sorted({cfg.m_h - cfg.g, cfg.m_h // 2}, reverse=True)
    att = _parse_levels(args.att_heads) or ([cfg.n_att_heads // 2] if cfg.n_att_heads > 1 and "A" in cfg.layer_pattern else [])
    rows = comparison_rows(model, calib, scores, ffn, heads, att)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pruning_type", "configuration", "l2_loss", "flap_loss"])
    for kind, conf, l2, fl in rows:
        writer.writerow([kind, conf, repr(l2), repr(fl)])
    _write_text(args.out, buf.getvalue())
    _write_sidecar(args.out, _manifest(args, {"model": args.model, "calib": args.calib}, {"report": args.out}),
                   args._started)
    print(buf.getvalue(), end="")
    return EXIT_OK


def sweep_rows(model, calib, scores: ScoreSet, fractions: Sequence[float]) -> list[tuple]:
    """Prune Mamba heads only vs head channels only to the same kept fraction."""
    from .searcher import macs_per_token

    cfg = model.config
    base = macs_per_token(cfg)
    rows = []
    for frac in fractions:
        for axis, full, step in (("heads", cfg.m_h, cfg.g), ("head_channels", cfg.m_d, 1)):
            kept = max(step, int(full * frac) // step * step)
            plan = build_plan(cfg, scores, **{"m_h" if axis == "heads" else "m_d": kept})
            pruned = apply_plan(model, plan)
            rows.append((axis, frac, kept, pruned.n_params(), token_cross_entropy(pruned, calib),
                         base / macs_per_token(pruned.config)))
    return rows


def cmd_sweep_mamba(args) -> int:
    model = _load_model(args.model)
    calib = _load_tokens(args.calib)
    scores = compute_scores(model, calib, ("mamba",))
    fractions = [float(v) for v in args.fractions.split(",")]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["axis", "kept_fraction", "kept", "params", "zero_shot_loss", "throughput_proxy"])
    for row in sweep_rows(model, calib, scores, fractions):
        writer.writerow([row[0], row[1], row[2], row[3], repr(row[4]), repr(row[5])])
    _write_text(args.out, buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridprune", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-toy", help="write a randomly initialized model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_toy)

    p = sub.add_parser("make-calib", help="sample a synthetic Markov-chain token file")
    p.add_argument("--config")
    p.add_argument("--vocab", type=int)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--branching", type=int, default=4)
    p.add_argument("--chain-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_calib)

    p = sub.add_parser("train", help="next-token pretraining (produces teachers)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=33)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="importance scores as a JSON report")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--metrics", default="mamba,ffn,emb")
    p.add_argument("--aggregation", choices=("mean_l2", "sum"), default="mean_l2")
    p.add_argument("--kld-samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="also write per-layer KLD importance as CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("prune", help="apply a plan, or build one from scores and targets")
    p.add_argument("--model", required=True)
    p.add_argument("--plan")
    p.add_argument("--scores")
    p.add_argument("--metric", choices=("l2", "flap"), default="l2")
    for name in ("n_layers", "d_e", "d_ffn", "m_h", "m_d", "n_att_heads"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    p.add_argument("--plan-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("search", help="budgeted architecture search; writes the candidate CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--scores")
    p.add_argument("--grid", required=True)
    p.add_argument("--config", help="ini file with a [kd] section for the lightweight distillation")
    p.add_argument("--budget", type=int)
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--topk", type=int, default=4)
    p.add_argument("--kd-tokens", type=int, default=0)
    p.add_argument("--metric", choices=("l2", "flap"), default="l2")
    p.add_argument("--kld-samples", type=int, default=256)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plan-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("distill", help="recover a pruned student from its teacher")
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="ini file with a [kd] section")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--trace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="cross-entropy and teacher-student FKLD")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="L2 vs FLAP zero-shot losses for the same targets")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--ffn")
    p.add_argument("--heads")
    p.add_argument("--att-heads")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-mamba", help="Mamba heads-only vs channels-only pruning sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--fractions", default="0.75,0.5,0.25")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_mamba)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._started = time.time()
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except PlanError as exc:
        print(f"error: plan does not match model: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, InputError, FormatError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

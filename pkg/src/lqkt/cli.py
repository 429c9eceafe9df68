"""Command-line entry point.

Subcommands: gen-data, train, eval, predict, bench-attn, check-grad.
Tables go to stdout as tab-separated UTF-8; diagnostics go to stderr.
Every command prints its resolved configuration to stderr before acting,
is deterministic under a fixed --seed (single-threaded mode), and exits 0
only if it completed with all internal assertions passing.

A --config FILE of key=value lines (one per line, # comments) is accepted
by every subcommand; explicit flags override file values.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import os
import statistics
import sys
import time

import numpy as np

from . import datagen, gradcheck, model as model_mod, numcore, plots, training
from .datagen import SynthConfig
from .features import DataError, FeatureWindow, build_window
from .model import ModelConfig, ModelParams, attention_flops, score_macs
from .training import TrainConfig


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _read_config_flags(path: str) -> list[str]:
    """key=value lines -> ['--key', 'value', ...]; empty value -> bare flag."""
    flags: list[str] = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            flags.append(f"--{key.strip()}")
            if value.strip():
                flags.append(value.strip())
    return flags


def _expand_config_file(argv: list[str]) -> list[str]:
    """Splice a --config FILE's flags in *before* the explicit flags.

    argparse keeps the last occurrence, so command-line flags win. A --config
    value that is not an existing file is left in place (check-grad uses
    --config tiny as a preset name).
    """
    if not argv:
        return argv
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv) and os.path.isfile(argv[i + 1]):
            flags = _read_config_flags(argv[i + 1])
            return [argv[0]] + flags + argv[1:i] + argv[i + 2:]
        if a.startswith("--config=") and os.path.isfile(a.split("=", 1)[1]):
            flags = _read_config_flags(a.split("=", 1)[1])
            return [argv[0]] + flags + argv[1:i] + argv[i + 1:]
    return argv


def _print_resolved(cmd: str, args: argparse.Namespace) -> None:
    pairs = {k: v for k, v in sorted(vars(args).items()) if k not in ("cmd", "func")}
    rendered = " ".join(f"{k}={v}" for k, v in pairs.items())
    print(f"[{cmd}] config: {rendered}", file=sys.stderr)


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ValueError(f"{flag} expects comma-separated integers, got {text!r}")
    if not values:
        raise ValueError(f"{flag} got an empty list")
    return values


def _fig_path(report_path: str | None, fig: str | None, no_fig: bool) -> str | None:
    """Reports rendered to a file get a PNG sibling unless suppressed."""
    if no_fig:
        return None
    if fig:
        return fig
    if report_path:
        return os.path.splitext(report_path)[0] + ".png"
    return None


def _load_corpus(data_dir: str):
    interactions = os.path.join(data_dir, "interactions.csv")
    questions = os.path.join(data_dir, "questions.csv")
    rows = datagen.ingest_csv(interactions, questions)
    if not rows:
        raise DataError(f"{interactions}: no question events")
    n_questions = max(datagen.load_questions(questions)) + 1
    return rows, n_questions


def _split_windows(rows, seq_len: int, train_stride: int, eval_stride: int):
    by_user = training.group_by_user(rows)
    train_users, valid_users = training.split_users(list(by_user))
    train_w = training.windows_for_users(by_user, train_users, seq_len, train_stride)
    valid_w = training.windows_for_users(by_user, valid_users, seq_len, eval_stride)
    return train_users, valid_users, train_w, valid_w, by_user


def _emit(line: str, sink) -> None:
    print(line)
    if sink is not None:
        sink.write(line + "\n")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        n_users=args.users, n_questions=args.questions,
        min_events=args.min_events, max_events=args.max_events,
        drift_sd=args.drift, skill_sd=args.skill_sd,
        difficulty_sd=args.difficulty_sd, seed=args.seed,
    )
    corpus = datagen.generate(cfg)
    paths = datagen.write_corpus(corpus, args.out)
    n = len(corpus.interactions)
    base = sum(r.answered_correctly for r in corpus.interactions) / n
    for name, path in paths.items():
        print(f"wrote {name}: {path}", file=sys.stderr)
    print(f"events\t{n}")
    print(f"base_rate\t{base:.6f}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _member_paths(out: str, head_counts: list[int]) -> list[str]:
    base, ext = os.path.splitext(out)
    ext = ext or ".ckpt"
    paths, seen = [], {}
    for h in head_counts:
        seen[h] = seen.get(h, 0) + 1
        suffix = f".h{h}" if seen[h] == 1 else f".h{h}-{seen[h]}"
        paths.append(f"{base}{suffix}{ext}")
    return paths


def _train_one(data_dir: str, model_kwargs: dict, train_kwargs: dict,
               ckpt_path: str, log_path: str | None) -> tuple[str, float, list]:
    """Fully self-contained single-model training: ingest, train, checkpoint.

    Module-level and argument-only so --parallel can run it in a worker
    process with no shared state.
    """
    rows, n_questions = _load_corpus(data_dir)
    config = ModelConfig(n_questions=n_questions, **model_kwargs)
    cfg = TrainConfig(**train_kwargs)
    stride = cfg.train_stride or config.seq_len // 2
    _, _, train_w, valid_w, _ = _split_windows(rows, config.seq_len, stride, cfg.eval_stride)
    log_fh = open(log_path, "w") if log_path else None
    try:
        def log_fn(stats):
            line = stats.log_line()
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
            print(f"[train {os.path.basename(ckpt_path)}] {line}", file=sys.stderr)

        result = training.train(config, train_w, valid_w, cfg, log_fn=log_fn)
    finally:
        if log_fh:
            log_fh.close()
    model_mod.save_checkpoint(ckpt_path, result.params)
    final_auc = result.best_auc if result.best_epoch > 0 else float("nan")
    history = [(s.epoch, s.train_loss, s.valid_auc, s.seconds) for s in result.history]
    return ckpt_path, final_auc, history


def _derived_log_paths(log: str | None, member_paths: list[str]) -> list[str | None]:
    if log is None:
        return [None] * len(member_paths)
    if len(member_paths) == 1:
        return [log]
    base, ext = os.path.splitext(log)
    out = []
    for p in member_paths:
        stem = os.path.splitext(os.path.basename(p))[0]
        member_tag = stem.split(".")[-1]            # h2, h4, ...
        out.append(f"{base}.{member_tag}{ext or '.log'}")
    return out


def cmd_train(args: argparse.Namespace) -> int:
    head_counts = _parse_int_list(args.ensemble, "--ensemble") if args.ensemble else [args.heads]
    for h in head_counts:
        if args.d % h != 0:
            raise ValueError(f"config error: d={args.d} not divisible by heads={h}")
    ModelConfig(d=args.d, n_heads=head_counts[0], seq_len=args.len,
                n_questions=1, d_ff=args.d_ff, d_e=args.d_e)   # validate early
    ckpt_paths = _member_paths(args.out, head_counts) if args.ensemble else [args.out]
    log_paths = _derived_log_paths(args.log, ckpt_paths)
    model_kwargs = [
        dict(d=args.d, n_heads=h, seq_len=args.len, d_ff=args.d_ff, d_e=args.d_e)
        for h in head_counts
    ]
    train_kwargs = dict(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                        seed=args.seed, train_stride=args.train_stride,
                        eval_stride=args.eval_stride)
    jobs = list(zip(model_kwargs, ckpt_paths, log_paths))
    results = []
    if args.parallel and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            futures = [
                pool.submit(_train_one, args.data, mk, train_kwargs, cp, lp)
                for mk, cp, lp in jobs
            ]
            results = [f.result() for f in futures]
    else:
        for mk, cp, lp in jobs:
            results.append(_train_one(args.data, mk, train_kwargs, cp, lp))

    history_for_fig = None
    print("kind\tname\tvalid_auc")
    for (mk, _, _), (ckpt_path, final_auc, history) in zip(jobs, results):
        print(f"model\t{ckpt_path}\t{final_auc:.6f}")
        history_for_fig = history
    if len(results) > 1:
        members = [model_mod.load_checkpoint(p) for p, _, _ in results]
        rows, _ = _load_corpus(args.data)
        seq_len = members[0].config.seq_len
        stride = args.train_stride or seq_len // 2
        _, _, _, valid_w, _ = _split_windows(rows, seq_len, stride, args.eval_stride)
        if valid_w:
            probs = training.ensemble_predict(members, valid_w)
            labels = np.array([w.label for w in valid_w])
            print(f"ensemble\tmean_prob\t{training.auc(labels, probs):.6f}")

    fig = _fig_path(args.log, args.fig, args.no_fig)
    if fig and history_for_fig:
        stats = [training.EpochStats(*row) for row in history_for_fig]
        plots.training_curves(stats, fig)
        print(f"wrote figure: {fig}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# eval / predict
# ---------------------------------------------------------------------------


def _load_members(spec_text: str) -> tuple[list[ModelParams], list[str]]:
    paths = [p for p in spec_text.split(",") if p.strip()]
    if not paths:
        raise ValueError("--model got an empty list")
    return [model_mod.load_checkpoint(p.strip()) for p in paths], paths


def cmd_eval(args: argparse.Namespace) -> int:
    members, paths = _load_members(args.model)
    training.check_ensemble_compatible(members)
    rows, _ = _load_corpus(args.data)
    seq_len = members[0].config.seq_len
    _, _, _, valid_w, _ = _split_windows(rows, seq_len, seq_len // 2, args.eval_stride)
    if not valid_w:
        raise DataError("validation split produced no windows")
    labels = np.array([w.label for w in valid_w])
    per_probs = [training.predict_windows(m, valid_w) for m in members]
    ens = np.mean(per_probs, axis=0)

    out_fh = open(args.out, "w") if args.out else None
    try:
        _emit("kind\tname\tauc\tloss\tn", out_fh)
        for path, probs in zip(paths, per_probs):
            a = training.auc(labels, probs)
            loss = float(np.mean([training.bce_loss(p, y) for p, y in zip(probs, labels)]))
            _emit(f"model\t{path}\t{a:.6f}\t{loss:.6f}\t{len(valid_w)}", out_fh)
        a = training.auc(labels, ens)
        loss = float(np.mean([training.bce_loss(p, y) for p, y in zip(ens, labels)]))
        _emit(f"ensemble\tmean_prob\t{a:.6f}\t{loss:.6f}\t{len(valid_w)}", out_fh)
    finally:
        if out_fh:
            out_fh.close()

    fig = _fig_path(args.out, args.fig, args.no_fig)
    if fig:
        named = [(os.path.basename(p), pr) for p, pr in zip(paths, per_probs)]
        if len(members) > 1:
            named.append(("ensemble", ens))
        plots.roc_curves(named, labels, fig)
        print(f"wrote figure: {fig}", file=sys.stderr)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    members, _ = _load_members(args.model)
    training.check_ensemble_compatible(members)
    rows, _ = _load_corpus(args.data)
    by_user = training.group_by_user(rows)
    seq_len = members[0].config.seq_len
    windows: list[FeatureWindow] = []
    for uid in sorted(by_user):
        history = by_user[uid]
        w = build_window(history, len(history) - 1, seq_len)
        windows.append(w)
    probs = training.ensemble_predict(members, windows)
    out_fh = open(args.out, "w") if args.out else None
    try:
        _emit("user_id\tprob\tlabel", out_fh)
        for w, p in zip(windows, probs):
            _emit(f"{w.user_id}\t{p:.6f}\t{w.label}", out_fh)
    finally:
        if out_fh:
            out_fh.close()
    return 0


# ---------------------------------------------------------------------------
# bench-attn
# ---------------------------------------------------------------------------


def _time_median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(max(repeats, 5)):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times)


def cmd_bench_attn(args: argparse.Namespace) -> int:
    lens = _parse_int_list(args.lens, "--lens")
    if args.d % args.heads != 0:
        raise ValueError(f"config error: d={args.d} not divisible by heads={args.heads}")
    variants = ["last_query", "full"] if args.variant == "both" else [args.variant]
    rng = numcore.new_rng(args.seed)
    params = model_mod.AttentionParams.init(args.d, rng)
    d_k = args.d // args.heads
    fig_rows = []
    out_fh = open(args.out, "w") if args.out else None
    try:
        _emit("L\tvariant\tscore_macs\tmedian_ms", out_fh)
        for L in lens:
            x = rng.standard_normal((L, args.d))
            mask = np.zeros(L, dtype=bool)
            row: dict = {"L": L}
            for variant in variants:
                if variant == "last_query":
                    run = lambda: model_mod.last_query_attention(x, mask, params, args.heads)
                else:
                    run = lambda: model_mod.full_attention_reference(x, mask, params, args.heads)
                score_macs.reset()
                run()
                macs = score_macs.count
                expected = attention_flops(L, args.d, args.heads, variant)
                if macs != expected:
                    raise AssertionError(
                        f"{variant} L={L}: counted {macs} MACs, expected {expected}"
                    )
                if variant == "last_query" and macs != args.heads * L * d_k:
                    raise AssertionError(
                        f"last_query L={L}: {macs} != n_heads*L*d_k = {args.heads * L * d_k}"
                    )
                ms = _time_median_ms(run, args.repeats)
                _emit(f"{L}\t{variant}\t{macs}\t{ms:.3f}", out_fh)
                row[f"{variant}_macs"] = macs
                row[f"{variant}_ms"] = ms
            fig_rows.append(row)
    finally:
        if out_fh:
            out_fh.close()

    fig = _fig_path(args.out, args.fig, args.no_fig)
    if fig:
        if args.variant != "both":
            print("figure skipped: needs --variant both", file=sys.stderr)
        else:
            plots.bench_scaling(fig_rows, fig)
            print(f"wrote figure: {fig}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# check-grad
# ---------------------------------------------------------------------------


def cmd_check_grad(args: argparse.Namespace) -> int:
    if args.config != "tiny":
        raise ValueError(f"unknown check-grad config {args.config!r} (have: tiny)")
    report = gradcheck.tiny_model_check(seed=args.seed, h=args.h)
    print("tensor\tmax_rel_err\tstatus")
    for name, (max_err, n_failed) in report.per_tensor.items():
        status = "ok" if n_failed == 0 else f"FAIL({n_failed})"
        print(f"{name}\t{max_err:.3e}\t{status}")
    print(f"checked {report.n_checked} entries; worst {report.worst_error:.3e} "
          f"at {report.worst_entry}", file=sys.stderr)
    if not report.passed:
        print("gradient check FAILED for: " + ", ".join(report.failed_tensors()),
              file=sys.stderr)
        for line in report.failures:
            print("  " + line, file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqkt",
        description="Answer-correctness sequence model: data, training, "
                    "evaluation, attention benchmarks.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    dflt = SynthConfig()
    p = sub.add_parser("gen-data", help="write a synthetic interaction corpus")
    p.add_argument("--users", type=int, default=dflt.n_users)
    p.add_argument("--questions", type=int, default=dflt.n_questions)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=dflt.seed)
    p.add_argument("--min-events", type=int, default=dflt.min_events)
    p.add_argument("--max-events", type=int, default=dflt.max_events)
    p.add_argument("--drift", type=float, default=dflt.drift_sd)
    p.add_argument("--skill-sd", type=float, default=dflt.skill_sd)
    p.add_argument("--difficulty-sd", type=float, default=dflt.difficulty_sd)
    p.add_argument("--config", default=None, help="key=value file of defaults")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model or an ensemble")
    p.add_argument("--data", required=True, help="directory with interactions.csv + questions.csv")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--len", type=int, default=128)
    p.add_argument("--d-ff", type=int, default=0, help="0 = 4*d")
    p.add_argument("--d-e", type=int, default=0, help="0 = d")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--ensemble", default=None,
                   help="comma-separated head counts; one member per count")
    p.add_argument("--parallel", action="store_true",
                   help="train ensemble members in separate processes")
    p.add_argument("--train-stride", type=int, default=0, help="0 = len//2")
    p.add_argument("--eval-stride", type=int, default=4)
    p.add_argument("--log", default=None, help="epoch log file (TSV)")
    p.add_argument("--fig", default=None)
    p.add_argument("--no-fig", action="store_true")
    p.add_argument("--config", default=None, help="key=value file of defaults")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoint(s) on the validation split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--eval-stride", type=int, default=4)
    p.add_argument("--out", default=None, help="also write the report to this file")
    p.add_argument("--fig", default=None)
    p.add_argument("--no-fig", action="store_true")
    p.add_argument("--config", default=None, help="key=value file of defaults")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="probability for each user's latest interaction")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="key=value file of defaults")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench-attn", help="score-stage MACs and wall time per L")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--lens", default="256,512,1024,1728")
    p.add_argument("--variant", choices=["last_query", "full", "both"], default="both")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the table to this file")
    p.add_argument("--fig", default=None)
    p.add_argument("--no-fig", action="store_true")
    p.add_argument("--config", default=None, help="key=value file of defaults")
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("check-grad", help="finite-difference check of every parameter")
    p.add_argument("--config", default="tiny", help="preset name (tiny) or key=value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_check_grad)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _expand_config_file(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) and args.cmd != "check-grad":
        # an existing file would have been spliced out already
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    _print_resolved(args.cmd, args)
    try:
        return args.func(args)
    except (ValueError, DataError, OSError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

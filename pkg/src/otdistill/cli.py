"""Command-line orchestration of the full pipeline.

Subcommands map one-to-one onto the stages: generate a class pool, derive
window tasks, train a teacher repository, assess it against a target task,
distill from a chosen (or auto-selected) teacher, and trace solver
convergence.  Every command is deterministic under --seed; artifacts are
canonical JSON/CSV so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import assess as asm
from . import distill as dl
from . import benchmark as bench
from . import store
from . import transport as tp
from .distill import DistillConfig, InvalidConfigurationError
from .models import OptimizerConfig, build_classifier
from .seeding import derive_seed
from .tasks import TaskSpec, make_pool, overlap_ratio, sample_dataset, sliding_windows

TASKS_SCHEMA = "tasks/v1"
RUN_SCHEMA = "distill-run/v1"
OUTDIR_ENV = "OTDISTILL_OUTDIR"


def _default_out(value, name: str) -> Path:
    if value is not None:
        return Path(value)
    return Path(os.environ.get(OUTDIR_ENV, ".")) / name


def _apply_config(args: argparse.Namespace, command: str) -> None:
    """Overlay values from --config onto the parsed flags.

    The file may carry a section named after the command plus top-level
    "seed" and "output_dir"; file values take precedence over flags.
    """
    if not getattr(args, "config", None):
        return
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if "seed" in doc and hasattr(args, "seed"):
        args.seed = int(doc["seed"])
    if "output_dir" in doc and getattr(args, "out", None) is None:
        args.out = str(Path(doc["output_dir"]) / _DEFAULT_NAMES[command])
    for key, value in doc.get(command, {}).items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise InvalidConfigurationError(f"config key {key!r} is not a flag of {command}")
        setattr(args, attr, value)


_DEFAULT_NAMES = {
    "gen-pool": "pool.json",
    "gen-tasks": "tasks.json",
    "train-teachers": "repo",
    "assess": "assessment.csv",
    "distill": "distill-run",
    "trace-convergence": "trace.csv",
    "report": "report.csv",
}


def _print_table(headers: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    print(line)
    print("-" * len(line))
    for row in rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))


def _load_tasks(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != TASKS_SCHEMA:
        raise store.SchemaVersionError(f"{path}: expected schema {TASKS_SCHEMA!r}")
    return doc


def _pool_for_tasks(tasks_doc: dict, pool_flag) -> "store.ClassPool":
    pool_path = Path(pool_flag) if pool_flag else Path(tasks_doc["pool_path"])
    pool_bytes = pool_path.read_bytes()
    if store.sha256_hex(pool_bytes) != tasks_doc["pool_hash"]:
        raise store.HashMismatchError(f"{pool_path}: pool does not match the hash recorded in the tasks file")
    return store.load_pool(pool_path)


def _task_spec(tasks_doc: dict, index: int) -> TaskSpec:
    windows = tasks_doc["windows"]
    if not (0 <= index < len(windows)):
        raise InvalidConfigurationError(f"task index {index} out of range (have {len(windows)} tasks)")
    return TaskSpec(
        label_set=tuple(windows[index]),
        instances_per_class_train=int(tasks_doc["train_per_class"]),
        instances_per_class_test=int(tasks_doc["test_per_class"]),
        seed=int(tasks_doc["task_seeds"][index]),
    )


def _student_template(args, label_set, seed: int):
    arch = bench.parse_architecture(args.student_arch, args.input_dim, args.student_embed_dim)
    return build_classifier(arch, label_set, seed=seed)


def _optimizer_from(args) -> OptimizerConfig:
    return OptimizerConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
    )


def _distill_config_from(args, mode: str) -> DistillConfig:
    return DistillConfig(
        lam=args.lam,
        tau=args.tau,
        epsilon=args.epsilon,
        optimizer=_optimizer_from(args),
        teacher_center_provenance=args.provenance,
        mode=mode,
    )


# ---------------------------------------------------------------- commands


def cmd_gen_pool(args) -> int:
    pool = make_pool(
        num_classes=args.classes,
        input_dim=args.dim,
        spread=args.spread,
        covariance_scale=args.cov,
        seed=args.seed,
    )
    out = _default_out(args.out, _DEFAULT_NAMES["gen-pool"])
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = store.save_pool(pool, out)
    print(f"pool: {args.classes} classes, dim {args.dim}, spread {args.spread}, cov {args.cov}")
    print(f"wrote {out} (sha256 {digest[:12]})")
    return 0


def cmd_gen_tasks(args) -> int:
    pool_path = Path(args.pool)
    pool = store.load_pool(pool_path)
    windows = sliding_windows(pool, args.window, args.step)
    if args.max_windows is not None:
        windows = windows[: args.max_windows]
    doc = {
        "schema": TASKS_SCHEMA,
        "pool_path": str(pool_path),
        "pool_hash": store.sha256_hex(pool_path.read_bytes()),
        "window_size": args.window,
        "step": args.step,
        "mode": "double" if args.double else "single",
        "train_per_class": args.train_per_class,
        "test_per_class": args.test_per_class,
        "seed": args.seed,
        "windows": [list(w) for w in windows],
        "task_seeds": [derive_seed(args.seed, "task", i) for i in range(len(windows))],
    }
    if args.double:
        doc["pairs"] = [
            {"teacher": i, "student": j, "overlap": overlap_ratio(a, b)}
            for i, a in enumerate(windows)
            for j, b in enumerate(windows)
        ]
    out = _default_out(args.out, _DEFAULT_NAMES["gen-tasks"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(store.canonical_bytes(doc))
    print(f"{len(windows)} windows of size {args.window} (step {args.step}) over {pool.num_classes} classes")
    rows = [[str(i), " ".join(map(str, w[:6])) + (" ..." if len(w) > 6 else "")] for i, w in enumerate(windows)]
    _print_table(["window", "classes"], rows)
    print(f"wrote {out}")
    return 0


def cmd_train_teachers(args) -> int:
    pool_path = Path(args.pool)
    pool = store.load_pool(pool_path)
    windows = sliding_windows(pool, args.window, args.step)
    if args.max_windows is not None:
        windows = windows[: args.max_windows]
    arch_names = [a.strip() for a in args.architectures.split(",") if a.strip()]
    architectures = {
        name: bench.parse_architecture(name, pool.input_dim, args.embed_dim) for name in arch_names
    }
    out = _default_out(args.out, _DEFAULT_NAMES["train-teachers"])
    out.mkdir(parents=True, exist_ok=True)
    optimizer = _optimizer_from(args)

    rows = []
    for w_idx, window in enumerate(windows):
        spec = TaskSpec(window, args.train_per_class, args.test_per_class, derive_seed(args.seed, "teacher-task", w_idx))
        for name in sorted(architectures):
            teacher_id = f"w{w_idx}-{name}"
            seed = derive_seed(args.seed, "teacher", w_idx, name)
            model, summary = bench.train_teacher(pool, window, architectures[name], optimizer, spec, seed)
            store.save_model(model, out / f"{teacher_id}.json", model_id=teacher_id, training=summary)
            rows.append(
                [teacher_id, str(w_idx), name, f"{summary['train_accuracy']:.3f}", f"{summary['test_accuracy']:.3f}"]
            )
    manifest = store.build_manifest(out, pool_path=pool_path)
    store.save_manifest(manifest, out)
    _print_table(["teacher_id", "window", "arch", "train_acc", "test_acc"], rows)
    print(f"wrote {len(manifest.entries)} models + manifest to {out}")
    return 0


def _assessment_config(args) -> asm.AssessmentConfig:
    return asm.AssessmentConfig(
        regime=args.regime,
        tau=args.tau if args.tau_override else None,
        epsilon=args.epsilon,
        teacher_center_provenance=args.provenance,
        distill=_distill_config_from(args, dl.MODE_SINKHORN),
    )


def _run_assessment(args, repo, tasks_doc, task_index, seed) -> asm.AssessmentReport:
    pool = _pool_for_tasks(tasks_doc, args.pool)
    spec = _task_spec(tasks_doc, task_index)
    train, _ = sample_dataset(pool, spec)
    config = _assessment_config(args)
    template = _student_template(args, spec.label_set, derive_seed(seed, "student-template", task_index))
    plain_student = None
    if config.regime == asm.REGIME_APPROX_I:
        plain_cfg = _distill_config_from(args, dl.MODE_NONE)
        plain_student = dl.run_distillation(
            None, template, train, train, plain_cfg, seed=derive_seed(seed, "plain-student", task_index)
        ).student
    ground_truth = _read_ground_truth(args.ground_truth) if args.ground_truth else None
    return asm.assess_repository(
        repo,
        train,
        config,
        student_template=template,
        plain_student=plain_student,
        ground_truth=ground_truth,
        seed=seed,
    )


def _read_ground_truth(path) -> dict[str, float]:
    truth = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            truth[row["teacher_id"]] = float(row["accuracy"])
    return truth


def _print_report(report: asm.AssessmentReport, timings: bool) -> None:
    rows = []
    for r in sorted(report.rows, key=lambda r: (r.rank is None, r.rank if r.rank is not None else 0)):
        rows.append(
            [
                "-" if r.rank is None else str(r.rank),
                r.teacher_id,
                "failed" if r.error else f"{r.metric:.6f}",
                str(bool(r.converged)).lower(),
                f"{r.seconds:.3f}" if timings else "-",
                "-" if r.ground_truth_acc is None else f"{r.ground_truth_acc:.3f}",
            ]
        )
    _print_table(["rank", "teacher_id", "metric", "converged", "seconds", "ground_truth"], rows)
    if report.pearson is not None:
        print(f"pearson(-metric, accuracy) = {report.pearson:.4f}, spearman = {report.spearman:.4f}")
    print(f"selected teacher: {report.selected}")


def cmd_assess(args) -> int:
    repo = store.Repository(args.repo)
    tasks_doc = _load_tasks(args.tasks)
    report = _run_assessment(args, repo, tasks_doc, args.task_index, args.seed)
    out = _default_out(args.out, _DEFAULT_NAMES["assess"])
    out.parent.mkdir(parents=True, exist_ok=True)
    asm.report_to_csv(report, out, timings=args.timings)
    _print_report(report, args.timings)
    print(f"wrote {out}")
    return 0


def cmd_distill(args) -> int:
    repo = store.Repository(args.repo)
    tasks_doc = _load_tasks(args.tasks)
    pool = _pool_for_tasks(tasks_doc, args.pool)
    spec = _task_spec(tasks_doc, args.task_index)
    train, test = sample_dataset(pool, spec)

    if args.auto:
        report = _run_assessment(args, repo, tasks_doc, args.task_index, args.seed)
        teacher_id = report.selected
        print(f"auto-selected teacher: {teacher_id}")
    elif args.teacher is not None:
        teacher_id = args.teacher
    else:
        raise InvalidConfigurationError("pass --teacher <id> or --auto")

    teacher = None if args.mode == dl.MODE_NONE else repo.load(teacher_id)
    config = _distill_config_from(args, args.mode)
    template = _student_template(args, spec.label_set, derive_seed(args.seed, "student-template", args.task_index))
    run = dl.run_distillation(teacher, template, train, test, config, seed=derive_seed(args.seed, "distill", args.task_index))

    out = _default_out(args.out, _DEFAULT_NAMES["distill"])
    out.mkdir(parents=True, exist_ok=True)
    dl.export_trace_csv(run, out / "trace.csv")
    store.save_model(run.student, out / "student.json", model_id=f"student-{args.task_index}")
    run_doc = {
        "schema": RUN_SCHEMA,
        "teacher_id": teacher_id if args.mode != dl.MODE_NONE else None,
        "task_index": args.task_index,
        "mode": args.mode,
        "lam": config.lam,
        "tau": config.tau,
        "epsilon": config.epsilon,
        "epochs": config.optimizer.epochs,
        "seed": args.seed,
        "final_train_accuracy": run.trace[-1].train_accuracy if run.trace else None,
        "final_test_accuracy": run.final_test_accuracy,
        "unconverged_instances": run.unconverged_instances,
    }
    (out / "run.json").write_bytes(store.canonical_bytes(run_doc))
    print(f"mode {args.mode}, teacher {run_doc['teacher_id']}, test accuracy {run.final_test_accuracy:.4f}")
    print(f"wrote {out}/run.json, trace.csv, student.json")
    return 0


def cmd_trace_convergence(args) -> int:
    iters = args.iters
    observed = np.zeros(iters)
    bound = np.zeros(iters)
    l2 = np.zeros(iters)
    for p in range(args.problems):
        mu, nu, M = bench.make_trace_instance(args.dim, seed=derive_seed(args.seed, "trace", p))
        trace = tp.convergence_trace(mu, nu, M, args.epsilon, iters)
        observed += trace.seminorm_error
        bound += trace.bound
        l2 += trace.l2_error
    observed /= args.problems
    bound /= args.problems
    l2 /= args.problems
    out = _default_out(args.out, _DEFAULT_NAMES["trace-convergence"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "seminorm_error", "bound", "l2_error"])
        for t in range(iters):
            writer.writerow([t + 1, repr(observed[t]), repr(bound[t]), repr(l2[t])])
    dominated = bool(np.all(observed <= bound + 1e-9))
    print(f"{args.problems} problems x {iters} iterations (dim {args.dim}, epsilon {args.epsilon})")
    print(f"bound dominates observed error at every iteration: {dominated}")
    print(f"wrote {out}")
    return 0


def cmd_report(args) -> int:
    with open(args.assessment, newline="") as fh:
        reader = csv.DictReader(fh)
        fieldnames = list(reader.fieldnames or [])
        rows = list(reader)
    truth = _read_ground_truth(args.ground_truth) if args.ground_truth else {}
    external: dict[str, dict[str, float]] = {}
    if args.external:
        with open(args.external, newline="") as fh:
            for record in csv.DictReader(fh):
                for col, value in record.items():
                    if col == "teacher_id" or value in (None, ""):
                        continue
                    external.setdefault(col, {})[record["teacher_id"]] = float(value)

    for row in rows:
        if row["teacher_id"] in truth:
            row["ground_truth_acc"] = repr(truth[row["teacher_id"]])
        for col, values in external.items():
            if col not in fieldnames:
                fieldnames.append(col)
            if row["teacher_id"] in values:
                row[col] = repr(values[row["teacher_id"]])

    scored = [r for r in rows if r.get("metric") and r.get("ground_truth_acc")]
    if len(scored) >= 3:
        q = np.array([-float(r["metric"]) for r in scored])
        g = np.array([float(r["ground_truth_acc"]) for r in scored])
        if np.ptp(q) > 0 and np.ptp(g) > 0:
            from scipy import stats

            print(f"pearson(-metric, accuracy) = {stats.pearsonr(q, g).statistic:.4f}")
            print(f"spearman = {stats.spearmanr(q, g).statistic:.4f}")

    out = _default_out(args.out, _DEFAULT_NAMES["report"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    _print_table(fieldnames, [[r.get(c, "") or "-" for c in fieldnames] for r in rows])
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed; all sub-task seeds derive from it")
    p.add_argument("--config", default=None, help="JSON experiment config; file values override flags")
    p.add_argument("--out", default=None, help=f"output path (default from ${OUTDIR_ENV})")


def _add_student_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--student-arch", default="mlp16", help="student architecture (linear or mlp<width>)")
    p.add_argument("--student-embed-dim", type=int, default=8)
    p.add_argument("--input-dim", type=int, default=16, help="input dimension of the student")
    p.add_argument("--lam", type=float, default=10.0)
    p.add_argument("--tau", type=float, default=3.0)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument(
        "--provenance",
        choices=["normalized-head-weights", "empirical-mean"],
        default="normalized-head-weights",
        help="where teacher class centers come from",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-pool", help="generate a synthetic class pool")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--spread", type=float, default=5.0)
    p.add_argument("--cov", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(func=cmd_gen_pool)

    p = sub.add_parser("gen-tasks", help="derive sliding-window tasks from a pool")
    p.add_argument("--pool", required=True)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--step", type=int, default=5)
    p.add_argument("--max-windows", type=int, default=None)
    p.add_argument("--double", action="store_true", help="also emit teacher x student window pairs")
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--test-per-class", type=int, default=50)
    _add_common(p)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train-teachers", help="train one teacher per window and architecture")
    p.add_argument("--pool", required=True)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--step", type=int, default=5)
    p.add_argument("--max-windows", type=int, default=None)
    p.add_argument("--architectures", default="linear,mlp32", help="comma-separated families")
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=cmd_train_teachers)

    p = sub.add_parser("assess", help="rank every teacher in a repository for a target task")
    p.add_argument("--repo", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--task-index", type=int, default=0)
    p.add_argument("--pool", default=None, help="override the pool path recorded in the tasks file")
    p.add_argument("--regime", choices=[asm.REGIME_VANILLA, asm.REGIME_APPROX_I, asm.REGIME_APPROX_II], default=asm.REGIME_APPROX_II)
    p.add_argument("--tau-override", action="store_true", help="use --tau for the metric instead of coupling it to the distillation temperature")
    p.add_argument("--ground-truth", default=None, help="CSV teacher_id,accuracy with realized student accuracies")
    p.add_argument("--timings", action="store_true", help="write wall-clock seconds (breaks byte-identical reruns)")
    _add_student_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("distill", help="train a student from a teacher in the repository")
    p.add_argument("--repo", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--task-index", type=int, default=0)
    p.add_argument("--pool", default=None)
    p.add_argument("--teacher", default=None, help="teacher id; mutually exclusive with --auto")
    p.add_argument("--auto", action="store_true", help="assess first and distill from the rank-1 teacher")
    p.add_argument("--mode", choices=[dl.MODE_SINKHORN, dl.MODE_KL, dl.MODE_NONE], default=dl.MODE_SINKHORN)
    p.add_argument("--regime", choices=[asm.REGIME_VANILLA, asm.REGIME_APPROX_I, asm.REGIME_APPROX_II], default=asm.REGIME_APPROX_II)
    p.add_argument("--tau-override", action="store_true")
    p.add_argument("--ground-truth", default=None)
    _add_student_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("trace-convergence", help="gradient convergence curves on synthetic problems")
    p.add_argument("--problems", type=int, default=256)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=0.1)
    _add_common(p)
    p.set_defaults(func=cmd_trace_convergence)

    p = sub.add_parser("report", help="merge an assessment CSV with ground truth and external metrics")
    p.add_argument("--assessment", required=True)
    p.add_argument("--ground-truth", default=None)
    p.add_argument("--external", default=None, help="CSV teacher_id,<metric columns> from other tools")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args, args.command)
        return args.func(args)
    except InvalidConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

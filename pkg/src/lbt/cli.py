"""Operator surface: configure, run, cache, and report on the pipelines.

Runs are driven by a JSON config plus flag overrides (flags win). Every run
directory gets fixed file names (config.json, records.jsonl, exams.jsonl,
result.json, report.md) so tooling never guesses. Output writing is
deterministic: rerunning against a warm cache reproduces the directory byte
for byte and issues zero backend calls.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import code_exam, core, corpus, exemplar_opt, pref_builder
from .gateway import (
    Backend,
    CompletionCache,
    Gateway,
    GatewayError,
    HttpBackend,
    SamplingParams,
    ScriptedBackend,
)

METHODS = ("m1", "m2", "m3")

DEFAULT_N = {"m1_math": 256, "m1_code": 8, "m2": 32}


@dataclasses.dataclass
class RunConfig:
    backends: list[dict] = dataclasses.field(default_factory=list)
    method: str = "m1"
    task: dict = dataclasses.field(default_factory=dict)
    teacher: str = ""
    students: list[str] = dataclasses.field(default_factory=list)
    sampling: Optional[dict] = None
    n: Optional[int] = None
    repeats: int = 3
    k: int = 8
    candidates: int = 4
    iterations: int = 5
    threshold: float = 0.3
    max_pairs: int = 8
    seed: int = 0
    seeds: Optional[list[int]] = None
    mode: str = "both"  # max | sum | both (selection emphasis; both always computed)
    apply_sd: bool = False
    self_eval: bool = False
    max_in_flight: int = 8
    cache_dir: str = "cache"
    out_dir: str = "out"
    fixtures: Optional[str] = None
    executor_fixtures: Optional[str] = None
    runner_cmd: Optional[list[str]] = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def snapshot(self) -> dict:
        """Resolved config echoed into the run directory.

        Output and cache locations are runtime environment, not experiment
        parameters; leaving them out keeps rerun directories byte-identical.
        """
        data = dataclasses.asdict(self)
        data.pop("out_dir")
        data.pop("cache_dir")
        return data


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def resolve_sampling(cfg: RunConfig, default: SamplingParams) -> SamplingParams:
    if not cfg.sampling:
        return default
    base = {
        "temperature": default.temperature,
        "top_p": default.top_p,
        "top_k": default.top_k,
        "max_tokens": default.max_tokens,
        "seed": default.seed,
    }
    base.update(cfg.sampling)
    return SamplingParams(**base)


def build_gateway(cfg: RunConfig) -> Gateway:
    backends: dict[str, Backend] = {}
    scripted = ScriptedBackend.from_file(cfg.fixtures) if cfg.fixtures else None
    for entry in cfg.backends:
        backend_id = entry["backend_id"]
        if scripted is not None:
            backends[backend_id] = scripted
        else:
            backends[backend_id] = HttpBackend(
                base_url=entry["base_url"],
                auth_env_var=entry.get("auth_env_var"),
            )
    cache = CompletionCache(cfg.cache_dir)
    return Gateway(backends, cache, max_in_flight=cfg.max_in_flight)


def _task_field(cfg: RunConfig, key: str) -> str:
    value = cfg.task.get(key)
    if not value:
        raise ValueError(f"config task.{key} is required for method {cfg.method!r}")
    return value


def _model_for(cfg: RunConfig, backend_id: str) -> str:
    for entry in cfg.backends:
        if entry["backend_id"] == backend_id:
            return entry.get("model_name", backend_id)
    raise ValueError(f"backend {backend_id!r} not in registry")


def _students(cfg: RunConfig) -> tuple[tuple[str, str], ...]:
    ids = cfg.students or [cfg.teacher]
    return tuple((s, _model_for(cfg, s)) for s in ids)


def _write_json(path: Path, data) -> None:
    path.write_text(
        json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.snapshot())
    return out


def _accuracy(rows: list[dict], key: str) -> float:
    if not rows:
        return 0.0
    return sum(r[key]["correct"] for r in rows) / len(rows)


def cmd_m1(cfg: RunConfig, gateway: Optional[Gateway] = None) -> int:
    gateway = gateway or build_gateway(cfg)
    if cfg.task.get("type") == "code":
        return _cmd_m1_code(cfg, gateway)
    return _cmd_m1_math(cfg, gateway)


def _cmd_m1_math(cfg: RunConfig, gateway: Gateway) -> int:
    out = _prepare_out(cfg)
    math_corpus = corpus.load_math_functional(_task_field(cfg, "corpus"))
    groups = corpus.m1_groups(
        math_corpus,
        split=cfg.task.get("split", "test"),
        expected_variants=cfg.task.get("expected_variants", 3),
        tp_ids=cfg.task.get("tp_ids"),
    )
    run_cfg = core.M1Config(
        teacher_backend=cfg.teacher,
        teacher_model=_model_for(cfg, cfg.teacher),
        students=_students(cfg),
        n=cfg.n or DEFAULT_N["m1_math"],
        repeats=cfg.repeats,
        sampling=resolve_sampling(cfg, SamplingParams(temperature=0.7, top_k=20)),
        include_self_eval=cfg.self_eval,
    )
    rows: list[dict] = []
    failed: list[dict] = []
    records: list[core.TeachingRecord] = []
    exams: list[core.ExamRecord] = []
    interrupted = False
    try:
        for group in groups:
            try:
                result = core.run_m1(gateway, group, run_cfg)
            except (core.PipelineError, GatewayError) as e:
                failed.append({"tp_id": group.tp_id, "error": str(e)})
                continue
            rows.append(result.to_json())
            records.extend(result.records)
            exams.extend(result.exams)
    except KeyboardInterrupt:
        interrupted = True

    records.sort(key=lambda r: (r.tp_id, r.sample_index))
    exams.sort(key=lambda e: (e.tp_id,) + e.sort_key())
    core.write_jsonl(out / "records.jsonl", [r.to_json() for r in records])
    core.write_jsonl(out / "exams.jsonl", [e.to_json() for e in exams])
    result = {
        "method": "m1",
        "task": "math",
        "per_tp": rows,
        "failed": failed,
        "accuracy": {
            "greedy": _accuracy(rows, "greedy"),
            "sc": _accuracy(rows, "sc"),
            "m1_max": _accuracy(rows, "m1_max"),
            "m1_sum": _accuracy(rows, "m1_sum"),
        },
    }
    _write_json(out / "result.json", result)
    (out / "report.md").write_text(_render_m1_math_report(result), encoding="utf-8")
    if interrupted:
        return 130
    if failed:
        print(f"m1: {len(failed)} problem(s) failed", file=sys.stderr)
        for item in failed:
            print(f"  {item['tp_id']}: {item['error']}", file=sys.stderr)
        return 1
    return 0


def _render_m1_math_report(result: dict) -> str:
    acc = result["accuracy"]
    lines = [
        "# Answer selection results",
        "",
        f"Problems: {len(result['per_tp'])} (failed: {len(result['failed'])})",
        "",
        "| Greedy | SC | M1 (MAX) | M1 (SUM) |",
        "| --- | --- | --- | --- |",
        "| {greedy:.2f} | {sc:.2f} | {m1_max:.2f} | {m1_sum:.2f} |".format(
            greedy=100 * acc["greedy"],
            sc=100 * acc["sc"],
            m1_max=100 * acc["m1_max"],
            m1_sum=100 * acc["m1_sum"],
        ),
        "",
    ]
    return "\n".join(lines)


def _build_executor(cfg: RunConfig) -> code_exam.Executor:
    if cfg.executor_fixtures:
        return code_exam.FixtureExecutor.from_file(cfg.executor_fixtures)
    if cfg.runner_cmd:
        return code_exam.SubprocessRunnerExecutor(cfg.runner_cmd)
    raise ValueError("code task needs executor_fixtures or runner_cmd")


def _cmd_m1_code(cfg: RunConfig, gateway: Gateway) -> int:
    out = _prepare_out(cfg)
    plan = corpus.load_code_plan(
        _task_field(cfg, "plan"), allow_empty_hidden=bool(cfg.task.get("allow_empty_hidden"))
    )
    executor = _build_executor(cfg)
    student = _students(cfg)[0]
    run_cfg = code_exam.CodeM1Config(
        teacher_backend=cfg.teacher,
        teacher_model=_model_for(cfg, cfg.teacher),
        student=student,
        n=cfg.n or DEFAULT_N["m1_code"],
        sampling=resolve_sampling(cfg, SamplingParams(temperature=1.0, top_p=1.0)),
        apply_sd=cfg.apply_sd,
    )
    wanted = set(cfg.task.get("tp_ids") or [p.id for p in plan.problems])
    rows: list[dict] = []
    failed: list[dict] = []
    records: list[core.TeachingRecord] = []
    interrupted = False
    try:
        for tp in plan.problems:
            if tp.id not in wanted:
                continue
            try:
                result = code_exam.run_code_m1(gateway, tp, plan.problems, run_cfg, executor)
            except (core.PipelineError, GatewayError, code_exam.ExecutorMissError) as e:
                failed.append({"tp_id": tp.id, "error": str(e)})
                continue
            rows.append(result.to_json())
            records.extend(c.record for c in result.candidates)
    except KeyboardInterrupt:
        interrupted = True

    records.sort(key=lambda r: (r.tp_id, r.sample_index))
    core.write_jsonl(out / "records.jsonl", [r.to_json() for r in records])
    core.write_jsonl(out / "exams.jsonl", [])
    result = {"method": "m1", "task": "code", "per_tp": rows, "failed": failed}
    _write_json(out / "result.json", result)
    (out / "report.md").write_text(_render_code_report(result, plan), encoding="utf-8")
    if interrupted:
        return 130
    if failed:
        for item in failed:
            print(f"  {item['tp_id']}: {item['error']}", file=sys.stderr)
        return 1
    return 0


def _fmt_metric(value) -> str:
    if value == code_exam.NO_CANDIDATE:
        return "-"
    return f"{value:.3f}"


def _render_code_report(result: dict, plan: corpus.CodePlan) -> str:
    abbrev = {p.id: p.title_abbrev for p in plan.problems}
    columns = [row["tp_id"] for row in result["per_tp"]]
    header = "| Metric | " + " | ".join(abbrev.get(c, c) for c in columns) + " |"
    divider = "| --- |" + " --- |" * len(columns)
    metric_rows = []
    for metric, label in (
        ("avg", "Avg."),
        ("m1_max", "M1 (MAX)"),
        ("avg_v1", "Avg. (V-score=1)"),
        ("m1_max_v1", "M1 (MAX) (V-score=1)"),
    ):
        values = [_fmt_metric(row["metrics"][metric]) for row in result["per_tp"]]
        metric_rows.append(f"| {label} | " + " | ".join(values) + " |")
    return "\n".join(
        ["# Code exam results", "", header, divider, *metric_rows, ""]
    )


def cmd_m2(cfg: RunConfig, gateway: Optional[Gateway] = None) -> int:
    gateway = gateway or build_gateway(cfg)
    out = _prepare_out(cfg)
    math_corpus = corpus.load_math_functional(_task_field(cfg, "corpus"))
    groups = corpus.m1_groups(
        math_corpus,
        split=cfg.task.get("split", "train"),
        expected_variants=cfg.task.get("expected_variants"),
        tp_ids=cfg.task.get("tp_ids"),
    )
    sampling = resolve_sampling(cfg, SamplingParams(temperature=0.7, top_k=20))
    students = _students(cfg)
    n = cfg.n or DEFAULT_N["m2"]
    pairs: list[pref_builder.PreferencePair] = []
    records: list[core.TeachingRecord] = []
    exams: list[core.ExamRecord] = []
    failed: list[dict] = []
    interrupted = False
    try:
        for group in groups:
            try:
                group_records = core.sample_teaching(
                    gateway,
                    cfg.teacher,
                    _model_for(cfg, cfg.teacher),
                    group.tp_id,
                    group.statement,
                    n,
                    sampling,
                    task="math",
                    gt=group.gt,
                )
                for record in group_records:
                    if not record.valid:
                        continue
                    record_exams = core.run_exams(
                        gateway,
                        record,
                        group.statement,
                        group.eps,
                        students,
                        cfg.repeats,
                        sampling,
                    )
                    record.per_pair_lbt = core.per_pair_lbt_score(record_exams)
                    exams.extend(record_exams)
                prompt = core.build_teacher_request(
                    cfg.teacher, _model_for(cfg, cfg.teacher), group.statement, sampling, n
                ).messages[-1][1]
                pairs.extend(
                    pref_builder.build_pairs(
                        [r for r in group_records if r.valid],
                        prompt,
                        threshold=cfg.threshold,
                        max_pairs=cfg.max_pairs,
                    )
                )
                records.extend(group_records)
            except (core.PipelineError, GatewayError) as e:
                failed.append({"tp_id": group.tp_id, "error": str(e)})
    except KeyboardInterrupt:
        interrupted = True

    records.sort(key=lambda r: (r.tp_id, r.sample_index))
    exams.sort(key=lambda e: (e.tp_id,) + e.sort_key())
    core.write_jsonl(out / "records.jsonl", [r.to_json() for r in records])
    core.write_jsonl(out / "exams.jsonl", [e.to_json() for e in exams])
    manifest = pref_builder.DpoManifest()
    pref_builder.emit_dpo_dataset(
        pairs, manifest, out / "dataset.jsonl", out / "manifest.json", allow_empty=True
    )
    if not pairs:
        print("m2: no eligible preference pairs", file=sys.stderr)
    result = {
        "method": "m2",
        "n_pairs": len(pairs),
        "n_records": len(records),
        "failed": failed,
        "pairs_per_tp": _pairs_per_tp(pairs),
    }
    _write_json(out / "result.json", result)
    (out / "report.md").write_text(_render_m2_report(result), encoding="utf-8")
    if interrupted:
        return 130
    return 1 if failed else 0


def _pairs_per_tp(pairs: Sequence[pref_builder.PreferencePair]) -> dict:
    counts: dict[str, int] = {}
    for pair in pairs:
        counts[pair.tp_id] = counts.get(pair.tp_id, 0) + 1
    return dict(sorted(counts.items()))


def _render_m2_report(result: dict) -> str:
    lines = [
        "# Preference dataset",
        "",
        f"Pairs emitted: {result['n_pairs']} over {len(result['pairs_per_tp'])} problem(s)",
        "",
        "| Problem | Pairs |",
        "| --- | --- |",
    ]
    for tp_id, count in result["pairs_per_tp"].items():
        lines.append(f"| {tp_id} | {count} |")
    lines.append("")
    return "\n".join(lines)


def cmd_m3(cfg: RunConfig, gateway: Optional[Gateway] = None) -> int:
    gateway = gateway or build_gateway(cfg)
    out = _prepare_out(cfg)
    task = corpus.load_classification(
        _task_field(cfg, "corpus"), question=_task_field(cfg, "question"), name=cfg.task.get("name", "")
    )
    opt_cfg = exemplar_opt.OptConfig(
        k=cfg.k,
        n_candidates=cfg.candidates,
        iterations=cfg.iterations,
        failure_sample_size=cfg.task.get("failure_sample_size", 64),
        train_eval_size=cfg.task.get("train_eval_size"),
        sampling=resolve_sampling(cfg, SamplingParams(temperature=0.7)),
    )
    teacher = (cfg.teacher, _model_for(cfg, cfg.teacher))
    students = _students(cfg)
    seeds = cfg.seeds or [cfg.seed]
    histories: list[exemplar_opt.OptHistory] = []
    interrupted = False
    try:
        for seed in seeds:
            history = exemplar_opt.optimize(
                gateway, task.question, task.train, task.eval_items, teacher, students, opt_cfg, seed
            )
            exemplar_opt.save_history(history, out / f"history_{seed}.json")
            histories.append(history)
    except KeyboardInterrupt:
        interrupted = True

    summary = exemplar_opt.summarize_runs(histories)
    _write_summary_csv(out / "summary.csv", summary)
    result = {
        "method": "m3",
        "seeds": seeds[: len(histories)],
        "iterations": cfg.iterations,
        "summary": summary,
    }
    _write_json(out / "result.json", result)
    (out / "report.md").write_text(_render_m3_report(result), encoding="utf-8")
    return 130 if interrupted else 0


def _write_summary_csv(path: Path, rows: list[dict]) -> None:
    lines = ["iteration,train_f1_mean,train_f1_se,eval_f1_mean,eval_f1_se"]
    for row in rows:
        lines.append(
            f"{row['iteration']},{row['train_f1_mean']:.6f},{row['train_f1_se']:.6f},"
            f"{row['eval_f1_mean']:.6f},{row['eval_f1_se']:.6f}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _render_m3_report(result: dict) -> str:
    lines = [
        "# Exemplar optimization",
        "",
        f"Runs: {len(result['seeds'])} seed(s), {result['iterations']} iteration(s)",
        "",
        "| Iteration | Train F1 | Eval F1 |",
        "| --- | --- | --- |",
    ]
    for row in result["summary"]:
        lines.append(
            f"| {row['iteration']} "
            f"| {row['train_f1_mean']:.4f} ± {row['train_f1_se']:.4f} "
            f"| {row['eval_f1_mean']:.4f} ± {row['eval_f1_se']:.4f} |"
        )
    lines.append("")
    return "\n".join(lines)


def cmd_report(run_dir: str) -> int:
    path = Path(run_dir)
    result_path = path / "result.json"
    if not result_path.exists():
        print(f"no result.json in {run_dir}", file=sys.stderr)
        return 1
    report_path = path / "report.md"
    if report_path.exists():
        print(report_path.read_text(encoding="utf-8"))
        return 0
    print(json.dumps(json.loads(result_path.read_text(encoding="utf-8")), indent=2))
    return 0


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.method:
        cfg.method = args.method
    if args.backend:
        cfg.teacher = args.backend
    if args.students:
        cfg.students = [s for s in args.students.split(",") if s]
    if args.n is not None:
        cfg.n = args.n
    if args.repeats is not None:
        cfg.repeats = args.repeats
    if args.mode:
        cfg.mode = args.mode
    if args.threshold is not None:
        cfg.threshold = args.threshold
    if args.max_pairs is not None:
        cfg.max_pairs = args.max_pairs
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",") if s]
    if args.cache_dir:
        cfg.cache_dir = args.cache_dir
    if args.out:
        cfg.out_dir = args.out
    if args.fixtures:
        cfg.fixtures = args.fixtures
    if args.apply_sd:
        cfg.apply_sd = True
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lbt")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a pipeline method")
    run.add_argument("--config", help="JSON run config")
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--backend", help="teacher backend id")
    run.add_argument("--students", help="comma-separated student backend ids")
    run.add_argument("--n", type=int)
    run.add_argument("--repeats", type=int)
    run.add_argument("--mode", choices=("max", "sum", "both"))
    run.add_argument("--threshold", type=float)
    run.add_argument("--max-pairs", type=int, dest="max_pairs")
    run.add_argument("--iterations", type=int)
    run.add_argument("--seeds", help="comma-separated seeds")
    run.add_argument("--cache-dir", dest="cache_dir")
    run.add_argument("--out")
    run.add_argument("--fixtures", help="scripted backend fixture file")
    run.add_argument("--apply-sd", action="store_true", dest="apply_sd")

    report = sub.add_parser("report", help="render tables for a run directory")
    report.add_argument("run_dir")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return cmd_report(args.run_dir)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if cfg.method == "m1":
            return cmd_m1(cfg)
        if cfg.method == "m2":
            return cmd_m2(cfg)
        if cfg.method == "m3":
            return cmd_m3(cfg)
        print(f"unknown method {cfg.method!r}", file=sys.stderr)
        return 2
    except (GatewayError, corpus.IngestionError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

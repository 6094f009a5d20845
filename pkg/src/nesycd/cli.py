"""Command-line surface for the pipeline stages.

    nesycd <stage> [--config PATH] [stage flags]

Stages: gen-rationales, collect-errors, build-kb, build-datasets, infer,
eval, kb-inspect, plus mock-serve (the bundled scripted model server).
Exit codes: 0 success, 1 partial (per-item failures recorded in the run
manifest), 2 usage/config error. Commands are idempotent on identical
inputs; timestamps live only in the manifest, never in outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import datasets as ds
from . import kb as kbmod
from .client import LlmClient, build_knowledge_entries
from .core import (
    ConfigError,
    DatasetError,
    ErrorCase,
    RunConfig,
    load_dataset,
    load_run_config,
    read_jsonl,
    write_jsonl,
)
from .evaluation import EvaluationError, collect_errors, evaluate_student
from .inference import run_inference
from .mockserver import MockModelServer, Scenario
from .prompts import load_task_catalogue

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    stage: str
    config_digest: str
    inputs: dict[str, Any] = field(default_factory=dict)
    outputs: dict[str, Any] = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""
    counts: dict[str, int] = field(default_factory=dict)

    def write(self, path: Path) -> None:
        self.finished_at = _utc_now()
        path.write_text(
            json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def _manifest_path(out: Path) -> Path:
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _fail_usage(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _load_config_or_none(path: str | None) -> RunConfig | None:
    if path is None:
        return None
    return load_run_config(path)


def _require_config(path: str | None) -> RunConfig:
    if path is None:
        raise ConfigError(["--config is required for this stage"])
    return load_run_config(path)


def _generations_map(path: str) -> dict[str, str]:
    generations: dict[str, str] = {}
    for rec in read_jsonl(path):
        generations[str(rec["example_id"])] = str(rec.get("text", ""))
    return generations


def _embed_fn(client: LlmClient, cfg: RunConfig):
    if not cfg.has_role("embedder"):
        return None
    role = cfg.role("embedder")
    return lambda texts: client.embed(role, texts)


# --- stage commands ---------------------------------------------------------


def cmd_gen_rationales(args: argparse.Namespace) -> int:
    cfg = _require_config(args.config)
    client = LlmClient(cfg.pipeline)
    catalogue = load_task_catalogue(cfg.task_catalogue)
    examples = [ex for ex in load_dataset(args.dataset) if ex.split == "train"]
    manifest = RunManifest(
        stage="gen-rationales",
        config_digest=cfg.digest,
        inputs={"dataset": args.dataset},
        started_at=_utc_now(),
    )
    records, failures = client.generate_rationales(
        examples, cfg.pipeline, cfg.role("teacher_general"), catalogue, cfg.template_dir
    )
    out = Path(args.out)
    retained_out = Path(args.retained_out) if args.retained_out else out.with_suffix(
        ".retained" + out.suffix
    )
    written = write_jsonl((r.to_record() for r in records), out)
    retained = write_jsonl((r.to_record() for r in records if r.correct), retained_out)
    manifest.outputs = {"rationales": str(out), "retained": str(retained_out)}
    manifest.counts = {
        "items_in": len(examples),
        "items_out": written,
        "retained": retained,
        "failures": len(failures),
    }
    manifest.write(_manifest_path(out))
    print(
        f"gen-rationales: {len(examples)} examples -> {written} records "
        f"({retained} retained, {len(failures)} failures)"
    )
    for example_id, message in failures:
        print(f"  failed {example_id}: {message}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_collect_errors(args: argparse.Namespace) -> int:
    cfg = _load_config_or_none(args.config)
    examples = load_dataset(args.dataset)
    generations = _generations_map(args.generations)
    cases = collect_errors(examples, generations)
    out = Path(args.out)
    written = write_jsonl((c.to_record() for c in cases), out)
    manifest = RunManifest(
        stage="collect-errors",
        config_digest=cfg.digest if cfg else "",
        inputs={"dataset": args.dataset, "generations": args.generations},
        outputs={"dneg": str(out)},
        started_at=_utc_now(),
        counts={"items_in": len(examples), "items_out": written, "failures": 0},
    )
    manifest.write(_manifest_path(out))
    print(f"collect-errors: {written} error cases out of {len(examples)} examples")
    return EXIT_OK


def _load_error_cases(path: str) -> list[ErrorCase]:
    return [
        ErrorCase(
            example_id=rec["example_id"],
            question=rec["question"],
            predicted_rationale=rec["predicted_rationale"],
            predicted_answer=rec.get("predicted_answer"),
            gold_answer=rec["gold_answer"],
        )
        for rec in read_jsonl(path)
    ]


def cmd_build_kb(args: argparse.Namespace) -> int:
    cfg = _require_config(args.config)
    client = LlmClient(cfg.pipeline)
    cases = _load_error_cases(args.dneg)
    variant = args.variant.replace("-", "_")
    manifest = RunManifest(
        stage="build-kb",
        config_digest=cfg.digest,
        inputs={"dneg": args.dneg, "variant": args.variant},
        started_at=_utc_now(),
    )
    entries, failures = build_knowledge_entries(
        client, cases, variant, cfg.pipeline, cfg.role("teacher_targeted"), cfg.template_dir
    )
    embed = _embed_fn(client, cfg)
    embedder_id = cfg.role("embedder").model_name if cfg.has_role("embedder") else None
    kb = kbmod.build_kb(entries, embed=embed, embedder_id=embedder_id)
    out = Path(args.out)
    kbmod.save_kb(kb, out)
    manifest.outputs = {"kb": str(out)}
    manifest.counts = {
        "items_in": len(cases),
        "items_out": len(kb.entries),
        "unparsed": len(kb.unparsed),
        "failures": len(failures),
    }
    manifest.write(out / "run_manifest.json")
    if not kb.entries:
        print("warning: knowledge base is empty", file=sys.stderr)
    print(
        f"build-kb: {len(cases)} cases -> {len(kb.entries)} indexed entries "
        f"({len(kb.unparsed)} unparsed preserved, {len(failures)} failures)"
    )
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_build_datasets(args: argparse.Namespace) -> int:
    cfg = _require_config(args.config)
    tasks = tuple(t.strip().upper() for t in args.tasks.split(",") if t.strip())
    unknown = [t for t in tasks if t not in ("AD", "AP", "DC")]
    if unknown:
        return _fail_usage(f"--tasks: unknown selections {unknown} (choose from AD,AP,DC)")
    examples = [ex for ex in load_dataset(args.dataset) if ex.split == "train"]
    records = [r for r in ds.load_rationale_records(args.rationales) if r.correct]
    kb = None
    if args.kb:
        kb = kbmod.load_kb(args.kb)
    if "AD" in tasks and (kb is None or not kb.entries):
        return _fail_usage(
            "AD instances need a non-empty knowledge base: run `nesycd build-kb` first "
            "and pass its directory via --kb"
        )
    client = LlmClient(cfg.pipeline)
    embed = _embed_fn(client, cfg) if cfg.pipeline.retriever == "dense" else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        stage="build-datasets",
        config_digest=cfg.digest,
        inputs={"rationales": args.rationales, "dataset": args.dataset, "kb": args.kb,
                "tasks": ",".join(tasks)},
        started_at=_utc_now(),
    )
    std = ds.build_std_dataset(records, examples, cfg.template_dir)
    std_path = out / "std.jsonl"
    ds.write_training_file(std, std_path)
    multitask = ds.build_multitask_dataset(
        records, examples, kb, cfg.pipeline, tasks, embed, cfg.template_dir
    )
    multitask_path = out / "multitask.jsonl"
    ds.write_training_file(multitask, multitask_path)
    leaks = ds.find_gold_leakage(std + multitask, examples)
    for source_id, kind in leaks:
        print(f"warning: gold answer appears in {kind} input for {source_id}", file=sys.stderr)
    by_kind: dict[str, int] = {}
    for instance in std + multitask:
        by_kind[instance.task_kind] = by_kind.get(instance.task_kind, 0) + 1
    manifest.outputs = {"std": str(std_path), "multitask": str(multitask_path)}
    manifest.counts = {
        "items_in": len(records),
        "items_out": len(std) + len(multitask),
        "failures": 0,
        **{kind.lower(): n for kind, n in sorted(by_kind.items())},
    }
    manifest.write(out / "run_manifest.json")
    print(
        "build-datasets: "
        + ", ".join(f"{n} {kind}" for kind, n in sorted(by_kind.items()))
        + f" -> {std_path.parent}"
    )
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _require_config(args.config)
    pipeline = cfg.pipeline
    if args.m is not None:
        if args.m < 1:
            return _fail_usage("--m must be >= 1")
        pipeline = replace(pipeline, m=args.m)
    threshold = args.threshold if args.threshold is not None else pipeline.delta_threshold
    if not (0.0 <= threshold <= 1.0):
        return _fail_usage("--threshold must be in [0, 1]")
    examples = load_dataset(args.dataset)
    kb = kbmod.load_kb(args.kb) if args.kb else kbmod.empty_kb()
    client = LlmClient(pipeline)
    student_role = cfg.role("student")
    embed = _embed_fn(client, cfg) if pipeline.retriever == "dense" else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        stage="infer",
        config_digest=cfg.digest,
        inputs={"dataset": args.dataset, "kb": args.kb, "threshold": threshold, "m": pipeline.m},
        started_at=_utc_now(),
    )
    run = run_inference(
        examples, kb, pipeline, client.complete, student_role, embed, threshold, cfg.template_dir
    )
    reports_path = out / "reports.jsonl"
    write_jsonl((r.to_record() for r in run.reports), reports_path)
    generations_path = out / "generations.jsonl"
    write_jsonl(
        ({"example_id": r.example_id, "text": r.final_text} for r in run.reports),
        generations_path,
    )
    summary = run.summary(pipeline, threshold, {"student": student_role.model_name})
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.outputs = {
        "reports": str(reports_path),
        "generations": str(generations_path),
        "summary": str(summary_path),
    }
    manifest.counts = {
        "items_in": len(examples),
        "items_out": len(run.reports),
        "failures": len(run.failures),
    }
    manifest.write(out / "run_manifest.json")
    print(
        f"infer: {len(run.reports)}/{len(examples)} examples, accuracy "
        f"{summary['accuracy']:.3f}, retrieval rate {summary['retrieval_rate']:.3f}"
    )
    for example_id, message in run.failures:
        print(f"  failed {example_id}: {message}", file=sys.stderr)
    return EXIT_PARTIAL if run.failures else EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    examples = load_dataset(args.dataset)
    generations = _generations_map(args.generations)
    report = evaluate_student(examples, generations)
    out = Path(args.out)
    out.write_text(json.dumps(report.to_document(), indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    manifest = RunManifest(
        stage="eval",
        config_digest="",
        inputs={"dataset": args.dataset, "generations": args.generations},
        outputs={"report": str(out)},
        started_at=_utc_now(),
        counts={"items_in": report.total, "items_out": report.total, "failures": 0},
    )
    manifest.write(_manifest_path(out))
    print(
        f"eval: accuracy {report.overall_accuracy:.3f} "
        f"({report.correct}/{report.total}, {report.unanswerable} unanswerable)"
    )
    return EXIT_OK


def cmd_kb_inspect(args: argparse.Namespace) -> int:
    kb = kbmod.load_kb(args.kb)
    print(f"{len(kb.entries)} entries ({len(kb.unparsed)} unparsed preserved)")
    if kb.vectors is not None:
        print(f"dense vectors: {kb.vectors.shape[0]} x {kb.vectors.shape[1]} ({kb.embedder})")
    if not args.query:
        return EXIT_OK
    if not kb.entries:
        return EXIT_OK
    embed = None
    if args.retriever == "dense":
        cfg = _require_config(args.config)
        embed = _embed_fn(LlmClient(cfg.pipeline), cfg)
        if embed is None:
            return _fail_usage("dense inspection needs an embedder role in --config")
    results = kbmod.topk(args.query, args.m, kb, args.retriever, embed=embed)
    for result in results:
        entry = kb.entry_by_id(result.entry_id)
        print(f"#{result.rank}  score={result.score:.6f}  {result.entry_id}")
        print(f"    question: {entry.question}")
        print(f"    learning summary: {entry.learning_summary}")
        if entry.supplementary_knowledge:
            print(f"    supplementary: {entry.supplementary_knowledge}")
    return EXIT_OK


def cmd_mock_serve(args: argparse.Namespace) -> int:
    scenario = Scenario.from_file(args.scenario)
    server = MockModelServer(scenario, host=args.host, port=args.port)
    print(f"mock model server listening on {server.endpoint}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nesycd", description=__doc__)
    sub = parser.add_subparsers(dest="stage", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON config file with model roles and pipeline knobs")
        return p

    p = add("gen-rationales", cmd_gen_rationales, help="sample teacher rationales and filter them")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="all sampled records (correct flag set)")
    p.add_argument("--retained-out", help="retained-only view (default: <out>.retained.jsonl)")

    p = add("collect-errors", cmd_collect_errors, help="collect student failures into an error file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--generations", required=True, help="JSONL of {example_id, text}")
    p.add_argument("--out", required=True)

    p = add("build-kb", cmd_build_kb, help="generate specialized knowledge and index it")
    p.add_argument("--dneg", required=True, help="error cases file from collect-errors")
    p.add_argument("--out", required=True, help="knowledge base directory")
    p.add_argument("--variant", choices=["full", "summary-only"], default="full")

    p = add("build-datasets", cmd_build_datasets, help="emit STD and multitask training files")
    p.add_argument("--rationales", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--kb", help="knowledge base directory (required when AD is selected)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tasks", default="AD,AP,DC", help="comma-separated subset of AD,AP,DC")

    p = add("infer", cmd_infer, help="confidence-gated inference over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kb", help="knowledge base directory (omit for an empty KB)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, help="gate threshold override (default from config)")
    p.add_argument("--m", type=int, help="knowledge entries per query (default from config)")

    p = add("eval", cmd_eval, help="exact-match evaluation of a generations file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--generations", required=True)
    p.add_argument("--out", required=True, help="JSON report path")

    p = add("kb-inspect", cmd_kb_inspect, help="inspect a knowledge base directory")
    p.add_argument("--kb", required=True)
    p.add_argument("--query")
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--retriever", choices=["lexical", "dense"], default="lexical")

    p = add("mock-serve", cmd_mock_serve, help="run the bundled scripted mock model server")
    p.add_argument("--scenario", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8959)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        for message in exc.errors:
            print(f"config error: {message}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, EvaluationError, ds.BuilderError, kbmod.KBError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

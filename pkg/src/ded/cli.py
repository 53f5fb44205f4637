"""Command-line entry point binding all pipeline stages.

Exit codes: 0 ok, 2 config error, 3 stage failure, 4 external-client
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import diagnostics
from .clients import ClientError, MockClient, SamplingRequest
from .compress import select_hard, student_rollout
from .config import ConfigError
from .diversity import diversify_corpus
from .filtering import FilterConfig, run_quality_gate
from .mixer import compose_mix
from .pipeline import EXIT_CLIENT, EXIT_CONFIG, EXIT_OK, EXIT_STAGE, run_pipeline
from .records import (CorpusError, PassRateStats, parse_corpus, save_manifest,
                      write_corpus, write_manifest)
from .teacher import build_smoke_corpus, ingest_scores, rank_teachers


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ded",
                                     description="Distillation corpus pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a corpus file and write a raw manifest")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--kind", default="questions",
                   choices=["questions", "trajectories", "logprobs", "embeddings", "scores"])
    p.add_argument("--manifest-out")

    p = sub.add_parser("sample", help="sample teacher trajectories (mock client)")
    p.add_argument("--questions", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixtures")
    p.add_argument("--out", required=True)

    p = sub.add_parser("filter", help="run the format/length/correctness gate")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--max-token-len", type=int, default=16384)
    p.add_argument("--token-estimator", default="chars_div_4_fallback",
                   choices=["precomputed_only", "chars_div_4_fallback"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--rejects", required=True)
    p.add_argument("--needs-judge", dest="needs_judge", required=True)

    p = sub.add_parser("compress", help="student rollouts and hard-question selection")
    p.add_argument("--questions", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--runs", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixtures")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--stats", required=True)

    p = sub.add_parser("diversify", help="farthest-P selection per question")
    p.add_argument("--in", dest="path", required=True)
    p.add_argument("--p", type=int, default=4)
    p.add_argument("--unit", default="char", choices=["char", "token"])
    p.add_argument("--cap-ratio", type=float, default=0.6)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("mix", help="compose a mixed-domain corpus")
    p.add_argument("--source", action="append", required=True,
                   metavar="PATH:TAKE", help="trajectory file and question count")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("smoke", help="build one-sample-per-question teacher corpora")
    p.add_argument("--questions", required=True)
    p.add_argument("--teachers", required=True, help="comma-separated teacher ids")
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixtures")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("rank", help="rank teachers from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--weights", default="uniform",
                   help='"uniform" or a path to a JSON benchmark->weight map')

    p = sub.add_parser("stats", help="corpus diagnostics")
    stats_sub = p.add_subparsers(dest="stat", required=True)
    q = stats_sub.add_parser("entropy")
    q.add_argument("--logprobs", required=True)
    q.add_argument("--out")
    q.add_argument("--svg")
    q = stats_sub.add_parser("lengths")
    q.add_argument("--in", dest="path", required=True)
    q.add_argument("--out")
    q = stats_sub.add_parser("pca-shift")
    q.add_argument("--embeddings", required=True)
    q.add_argument("--k", type=int, default=2)
    q.add_argument("--fit-on", default="union", choices=["union", "before"])
    q.add_argument("--out")
    q = stats_sub.add_parser("pass1")
    q.add_argument("--outcomes", required=True,
                   help="JSONL with question_id, runs, successes rows")

    p = sub.add_parser("report", help="render report.md from stage manifests")
    p.add_argument("--manifest-dir", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("run", help="run the configured pipeline end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    return parser


def _emit(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _cmd_ingest(args) -> int:
    records = parse_corpus(args.path, args.kind)
    print(f"parsed {len(records)} {args.kind} records from {args.path}")
    if args.manifest_out:
        manifest = write_manifest("raw", records, config={"source": args.path})
        save_manifest(manifest, args.manifest_out)
        print(f"wrote manifest {args.manifest_out}")
    return EXIT_OK


def _cmd_sample(args) -> int:
    questions = parse_corpus(args.questions, "questions")
    client = MockClient(fixtures=args.fixtures, seed=args.seed)
    from .records import TrajectoryRecord
    trajectories = []
    for q in sorted(questions, key=lambda q: q.question_id):
        texts = client.sample_trajectories(SamplingRequest(
            prompt=q.prompt, teacher_id=args.teacher, samples=args.m,
            temperature=args.temperature, seed=args.seed))
        for i, text in enumerate(texts):
            trajectories.append(TrajectoryRecord(
                trajectory_id=f"{q.question_id}:{args.teacher}:{i:03d}",
                question_id=q.question_id, teacher_id=args.teacher,
                sample_index=i, text=text))
    write_corpus(args.out, trajectories)
    print(f"sampled {len(trajectories)} trajectories to {args.out}")
    return EXIT_OK


def _cmd_filter(args) -> int:
    trajectories = parse_corpus(args.path, "trajectories")
    questions = parse_corpus(args.questions, "questions")
    config = FilterConfig(max_token_len=args.max_token_len,
                          token_estimator=args.token_estimator)
    gate = run_quality_gate(trajectories, questions, config, workers=args.workers)
    write_corpus(args.out, gate.kept)
    write_corpus(args.rejects, gate.rejected)
    write_corpus(args.needs_judge, gate.needs_judge)
    _emit(gate.counts)
    return EXIT_OK


def _cmd_compress(args) -> int:
    questions = parse_corpus(args.questions, "questions")
    client = MockClient(fixtures=args.fixtures, seed=args.seed)
    stats = student_rollout(questions, client, runs=args.runs,
                            student_id=args.student, seed=args.seed,
                            checkpoint=args.checkpoint)
    with open(args.stats, "w", encoding="utf-8", newline="\n") as fh:
        for s in stats:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    retained, report = select_hard(questions, stats, args.tau)
    write_corpus(args.out, retained)
    _emit(report.to_dict())
    return EXIT_OK


def _cmd_diversify(args) -> int:
    trajectories = parse_corpus(args.path, "trajectories")
    selected, report = diversify_corpus(trajectories, p=args.p, unit=args.unit,
                                        cap_ratio=args.cap_ratio, workers=args.workers)
    write_corpus(args.out, selected)
    with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"selected {len(selected)} of {len(trajectories)} trajectories")
    return EXIT_OK


def _cmd_mix(args) -> int:
    sources = []
    for spec in args.source:
        path, _, take = spec.rpartition(":")
        if not path or not take.isdigit():
            raise ConfigError([f"--source must look like PATH:TAKE, got {spec!r}"])
        sources.append((parse_corpus(path, "trajectories"), int(take)))
    mixed, provenance = compose_mix(sources, seed=args.seed)
    write_corpus(args.out, mixed)
    manifest = write_manifest("mixed", mixed, config={"mix": provenance})
    save_manifest(manifest, Path(args.out).with_suffix(".manifest.json"))
    print(f"mixed {len(mixed)} trajectories over "
          f"{manifest.question_count} questions to {args.out}")
    return EXIT_OK


def _cmd_smoke(args) -> int:
    questions = parse_corpus(args.questions, "questions")
    client = MockClient(fixtures=args.fixtures, seed=args.seed)
    results = build_smoke_corpus(questions, args.teachers.split(","), client,
                                 temperature=args.temperature, seed=args.seed,
                                 out_dir=args.out_dir)
    for teacher_id, corpus in sorted(results.items()):
        print(f"{teacher_id}: kept {len(corpus.gate.kept)} of {len(questions)}; "
              f"dropped questions: {corpus.dropped_questions or 'none'}")
    return EXIT_OK


def _cmd_rank(args) -> int:
    records = ingest_scores(args.scores)
    weights = None
    if args.weights != "uniform":
        with open(args.weights, "r", encoding="utf-8") as fh:
            weights = json.load(fh)
    rankings = rank_teachers(records, weights)
    for i, r in enumerate(rankings, start=1):
        print(f"{i}. {r.teacher_id}  score={float(r.score):+.4f}  "
              f"mean_len={r.mean_response_len:.0f}")
    return EXIT_OK


def _cmd_stats(args) -> int:
    if args.stat == "entropy":
        summary = diagnostics.entropy_summary(parse_corpus(args.logprobs, "logprobs"))
        _emit(summary.to_dict())
        if args.out:
            Path(args.out).write_text(json.dumps(summary.to_dict(), indent=2,
                                                 sort_keys=True) + "\n", encoding="utf-8")
        if args.svg:
            diagnostics.entropy_histogram_svg(summary, args.svg)
    elif args.stat == "lengths":
        summary = diagnostics.length_summary(parse_corpus(args.path, "trajectories"))
        _emit(summary.to_dict())
        if args.out:
            Path(args.out).write_text(json.dumps(summary.to_dict(), indent=2,
                                                 sort_keys=True) + "\n", encoding="utf-8")
    elif args.stat == "pca-shift":
        embeddings = parse_corpus(args.embeddings, "embeddings")
        before = [e for e in embeddings if e.phase == "before"]
        after = [e for e in embeddings if e.phase == "after"]
        shift = diagnostics.pca_shift(before, after, k=args.k, fit_on=args.fit_on)
        _emit(shift.to_dict())
        if args.out:
            Path(args.out).write_text(json.dumps(shift.to_dict(), indent=2,
                                                 sort_keys=True) + "\n", encoding="utf-8")
    elif args.stat == "pass1":
        rows = []
        with open(args.outcomes, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append(PassRateStats.from_dict(json.loads(line)))
        matrix = [[i < s.successes for i in range(s.runs)] for s in rows]
        print(f"pass@1: {diagnostics.pass_at_1(matrix):.2f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .records import load_manifest
    manifest_dir = Path(args.manifest_dir)
    manifests = []
    for stage in ("raw", "right", "right_hard", "right_hard_diverse", "mixed"):
        path = manifest_dir / f"manifest_{stage}.json"
        if path.exists():
            manifests.append(load_manifest(path))
    path = diagnostics.emit_report(manifests, args.out_dir)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_run(args) -> int:
    result = run_pipeline(args.config, out_dir=args.out_dir)
    if result.exit_code != EXIT_OK:
        print(f"pipeline failed at stage {result.failed_stage}: {result.error}",
              file=sys.stderr)
    else:
        for stage, manifest in result.manifests.items():
            print(f"{stage}: questions={manifest.question_count} "
                  f"trajectories={manifest.trajectory_count}")
    return result.exit_code


_COMMANDS = {
    "ingest": _cmd_ingest,
    "sample": _cmd_sample,
    "filter": _cmd_filter,
    "compress": _cmd_compress,
    "diversify": _cmd_diversify,
    "mix": _cmd_mix,
    "smoke": _cmd_smoke,
    "rank": _cmd_rank,
    "stats": _cmd_stats,
    "report": _cmd_report,
    "run": _cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except ClientError as exc:
        print(f"client failure: {exc}", file=sys.stderr)
        return EXIT_CLIENT
    except (CorpusError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: one subcommand per pipeline or experiment stage."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import load_toml
from .curation import annotate, drop_low_quality, drop_unanswered, load_tables, near_dedup, split_dataset
from .errors import ThreadbenchError
from .evaluation import EvalRecord, gold_mock, random_mock, read_journal, report, run_eval, untagged_mock
from .grpo import CategoricalPolicy, GrpoConfig, train_grpo
from .ingest import anonymize_thread, parse_mbox, read_threads, write_threads
from .llm_bridge import QaTriple, RemoteBackend, extract_triples, generate_options, heuristic_mock, rewrite_question
from .mcq import assemble_mcq, item_from_json, read_items, write_items
from .reward import score_response
from .router import DEFAULT_FEATURE_DIM, ROUTER_CONFIG, ExpertResponses, route, route_and_report, train_router

logger = logging.getLogger("threadbench")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _require(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{flag}: no such file: {p}")
    return p


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except ValueError as exc:
                    raise ThreadbenchError(f"{path}: line {n}: invalid JSON ({exc})") from exc
    return rows


def _write_jsonl(rows, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def write_manifest(path: Path, command: str, args: argparse.Namespace, config: dict, inputs: Sequence[Path], extra=None) -> None:
    """Everything needed to rerun a stage; no wall-clock fields, so reruns match."""
    snapshot = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "tool": "threadbench",
        "version": __version__,
        "command": command,
        "seed": args.seed,
        "arguments": snapshot,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
    }
    if extra:
        manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def _load_config(args) -> dict:
    return load_toml(args.config) if args.config else {}


def _grpo_config(config: dict, default: GrpoConfig) -> GrpoConfig:
    section = config.get("grpo", {})
    try:
        merged = {**default.__dict__, **section}
        return GrpoConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ThreadbenchError(f"[grpo] config: {exc}") from exc


def _llm_backend(args, config: dict):
    section = config.get("backend", {})
    kind = args.backend or section.get("kind", "mock")
    if kind == "remote":
        base = args.api_base or section.get("api_base")
        model = args.model or section.get("model")
        if not base or not model:
            raise UsageError("--backend remote needs --api-base and --model")
        return RemoteBackend(base, model)
    return heuristic_mock(args.seed)


# -- subcommands -------------------------------------------------------------


def cmd_ingest(args) -> dict:
    data = sys.stdin.buffer.read() if args.input == "-" else _require(args.input, "--in").read_bytes()
    threads, rep = parse_mbox(data)
    if args.anonymize:
        threads = [anonymize_thread(t)[0] for t in threads]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_threads(threads, out)
    logger.info("ingest: %s", rep.as_dict())
    inputs = [] if args.input == "-" else [Path(args.input)]
    return {"out": out, "inputs": inputs, "extra": {"parse_report": rep.as_dict()}}


def cmd_extract(args) -> dict:
    src = _require(args.threads, "--threads")
    config = _load_config(args)
    backend = _llm_backend(args, config)
    stats: Counter = Counter()
    rows = []
    for thread in read_threads(src):
        rows.extend(t.to_json() for t in extract_triples(thread, backend, stats))
    out = Path(args.out)
    _write_jsonl(rows, out)
    return {"out": out, "inputs": [src], "extra": {"stats": dict(sorted(stats.items()))}}


def _item_seed(seed: int, index: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{index}".encode()).digest()[:4], "big")


def cmd_build_mcq(args) -> dict:
    src = _require(args.triples, "--triples")
    config = _load_config(args)
    backend = _llm_backend(args, config)
    triples = [QaTriple(r["question"], r["answer"], r.get("context", "")) for r in _read_jsonl(src)]
    kept, dropped = drop_unanswered(triples)
    items, failures = [], Counter()
    for i, triple in enumerate(kept):
        try:
            question = rewrite_question(triple, backend)
            opts = generate_options(question, triple.answer, backend)
        except ThreadbenchError as exc:
            failures[type(exc).__name__] += 1
            logger.warning("triple %d skipped: %s", i, exc)
            continue
        items.append(assemble_mcq(question, opts, triple.answer, _item_seed(args.seed, i)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_items(items, out)
    stats = {"triples": len(triples), "unanswered": len(dropped), "items": len(items), "failures": dict(failures)}
    return {"out": out, "inputs": [src], "extra": {"stats": stats}}


def cmd_curate(args) -> dict:
    src = _require(args.input, "--in")
    table, rules = load_tables(args.tables)
    items = read_items(src)
    items, low = drop_low_quality(items, rules)
    items, groups = near_dedup(items, args.dedup_threshold)
    items, ann = annotate(items, table)
    train, test = split_dataset(items, args.test_fraction, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_items(train + test, out)
    stats = {
        "low_quality": dict(Counter(reason for _, reason in low)),
        "duplicate_groups": groups,
        "categories": dict(sorted(ann.categories.items())),
        "difficulties": dict(sorted(ann.difficulties.items())),
        "fallback_fraction": ann.fallback_fraction,
        "train": len(train),
        "test": len(test),
    }
    inputs = [src] + ([Path(args.tables)] if args.tables else [])
    return {"out": out, "inputs": inputs, "extra": {"stats": stats}}


def _gold_table(path: Path) -> dict[str, str]:
    gold = {}
    for n, row in enumerate(_read_jsonl(path), 1):
        if "correct_label" in row:
            gold[str(row["id"])] = item_from_json(row, n).correct_label
        elif "gold" in row:
            gold[str(row.get("question_id", row.get("id")))] = str(row["gold"])
        else:
            raise ThreadbenchError(f"{path}: line {n}: no correct_label or gold field")
    return gold


def cmd_reward(args) -> dict:
    resp_path = _require(args.responses, "--responses")
    gold_path = _require(args.gold, "--gold")
    gold = _gold_table(gold_path)
    rows = []
    for n, row in enumerate(_read_jsonl(resp_path), 1):
        qid = str(row.get("question_id", row.get("id")))
        if qid not in gold:
            raise ThreadbenchError(f"{resp_path}: line {n}: unknown question id {qid!r}")
        breakdown = score_response(str(row.get("response", "")), gold[qid])
        rows.append({"question_id": qid, "run": row.get("run", 0), **breakdown.to_json()})
    out = Path(args.out)
    _write_jsonl(rows, out)
    return {"out": out, "inputs": [resp_path, gold_path]}


def _eval_backend(args, items):
    if args.backend == "remote":
        if not args.api_base or not args.model:
            raise UsageError("--backend remote needs --api-base and --model")
        return RemoteBackend(args.api_base, args.model)
    mode = args.mock_mode
    if mode == "gold":
        return gold_mock(items)
    if mode == "untagged":
        return untagged_mock()
    return random_mock(args.seed)


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError as exc:
        raise UsageError(f"--ks must be comma-separated integers, got {text!r}") from exc
    if any(k < 1 for k in ks):
        raise UsageError("--ks values must be >= 1")
    return ks


def cmd_evaluate(args) -> dict:
    src = _require(args.items, "--items")
    ks = _parse_ks(args.ks)
    if max(ks, default=1) > args.runs:
        raise UsageError(f"--ks needs at least {max(ks)} runs, --runs is {args.runs}")
    items = read_items(src)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    backend = _eval_backend(args, items)
    records = run_eval(
        items, backend, args.runs, journal=out / "records.jsonl",
        parallelism=args.parallelism, seed=args.seed, temperature=args.temperature,
    )
    rep = report(records, items, ks, seed=args.seed)
    rep.write(out)
    return {"out": out, "inputs": [src], "extra": {"accuracy": rep.accuracy}}


def cmd_report(args) -> dict:
    rec_path = _require(args.records, "--records")
    src = _require(args.items, "--items")
    records: list[EvalRecord] = read_journal(rec_path)
    items = read_items(src)
    rep = report(records, items, _parse_ks(args.ks), seed=args.seed)
    out = Path(args.out)
    rep.write(out)
    return {"out": out, "inputs": [rec_path, src]}


def _read_features(path: Path):
    dataset = []
    for n, row in enumerate(_read_jsonl(path), 1):
        if "features" not in row or "gold" not in row:
            raise ThreadbenchError(f"{path}: line {n}: need 'features' and 'gold'")
        dataset.append((np.asarray(row["features"], dtype=float), row["gold"]))
    if not dataset:
        raise ThreadbenchError(f"{path}: no training rows")
    return dataset


def cmd_train_grpo(args) -> dict:
    src = _require(args.data, "--data")
    config = _load_config(args)
    cfg = _grpo_config(config, GrpoConfig())
    dataset = _read_features(src)
    policy = CategoricalPolicy.zeros(dataset[0][0].shape[0], int(config.get("actions", 5)))
    trained, log = train_grpo(policy, dataset, cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trained.save(out / "policy.npz", seed=args.seed)
    log.to_csv(out / "training_log.csv")
    inputs = [src] + ([Path(args.config)] if args.config else [])
    return {"out": out, "inputs": inputs, "extra": {"final_accuracy": log.rows[-1].accuracy if log.rows else None}}


def _questions(path: Path) -> dict[str, str]:
    out = {}
    for n, row in enumerate(_read_jsonl(path), 1):
        qid = row.get("question_id", row.get("id"))
        text = row.get("question", row.get("text"))
        if qid is None or text is None:
            raise ThreadbenchError(f"{path}: line {n}: need an id and a question")
        out[str(qid)] = str(text)
    return out


def cmd_train_router(args) -> dict:
    resp_path = _require(args.responses, "--responses")
    q_path = _require(args.questions, "--questions")
    config = _load_config(args)
    cfg = _grpo_config(config, ROUTER_CONFIG)
    dim = int(config.get("router", {}).get("feature_dim", args.feature_dim))
    responses = ExpertResponses.read_jsonl(resp_path)
    questions = _questions(q_path)
    policy, log = train_router(responses, questions, cfg, feature_dim=dim, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy.save(out / "router.npz", experts=responses.experts, seed=args.seed)
    log.to_csv(out / "training_log.csv")
    rep = route_and_report(policy, responses, questions)
    (out / "routing_report.json").write_text(json.dumps(rep.to_json(), indent=2) + "\n", encoding="utf-8")
    inputs = [resp_path, q_path] + ([Path(args.config)] if args.config else [])
    return {"out": out, "inputs": inputs, "extra": {"accuracy": rep.accuracy}}


def cmd_route(args) -> dict:
    pol_path = _require(args.policy, "--policy")
    q_path = _require(args.questions, "--questions")
    policy, meta = CategoricalPolicy.load(pol_path)
    experts = list(meta.get("experts", [])) or [str(i) for i in range(policy.action_count)]
    questions = _questions(q_path)
    ids = list(questions)
    picks = route(policy, [questions[q] for q in ids])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(({"question_id": q, "expert": experts[p]} for q, p in zip(ids, picks)), out / "routes.jsonl")
    inputs = [pol_path, q_path]
    if args.responses:
        resp_path = _require(args.responses, "--responses")
        rep = route_and_report(policy, ExpertResponses.read_jsonl(resp_path), questions)
        (out / "routing_report.json").write_text(json.dumps(rep.to_json(), indent=2) + "\n", encoding="utf-8")
        inputs.append(resp_path)
    return {"out": out, "inputs": inputs}


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def globals_parser(suppress: bool) -> argparse.ArgumentParser:
        # global flags may appear before or after the subcommand; the copy on
        # subcommands suppresses defaults so it never overwrites the former
        g = argparse.ArgumentParser(add_help=False)

        def d(value):
            return argparse.SUPPRESS if suppress else value

        g.add_argument("--seed", type=int, default=d(0))
        g.add_argument("--config", default=d(None), help="TOML run configuration")
        g.add_argument("--parallelism", type=int, default=d(1))
        g.add_argument("--log-level", default=d("WARNING"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        return g

    common = globals_parser(suppress=True)

    llm = argparse.ArgumentParser(add_help=False)
    llm.add_argument("--backend", choices=["mock", "remote"])
    llm.add_argument("--api-base")
    llm.add_argument("--model")

    parser = _Parser(prog="threadbench", description=__doc__, parents=[globals_parser(suppress=False)])
    parser.add_argument("--version", action="version", version=f"threadbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, parents=(common,)):
        p = sub.add_parser(name, help=help_text, parents=list(parents))
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "parse an mbox archive into threads")
    p.add_argument("--in", dest="input", required=True, help="mbox path or - for stdin")
    p.add_argument("--out", required=True)
    p.add_argument("--anonymize", action="store_true")

    p = add("extract", cmd_extract, "extract question/answer/context triples", (common, llm))
    p.add_argument("--threads", required=True)
    p.add_argument("--out", required=True)

    p = add("build-mcq", cmd_build_mcq, "turn triples into multiple-choice items", (common, llm))
    p.add_argument("--triples", required=True)
    p.add_argument("--out", required=True)

    p = add("curate", cmd_curate, "filter, dedup, annotate and split items")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tables", help="keyword table TOML (default: bundled)")
    p.add_argument("--dedup-threshold", type=float, default=0.9)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = add("reward", cmd_reward, "score responses against gold labels")
    p.add_argument("--responses", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "run a backend over items and report")
    p.add_argument("--items", required=True)
    p.add_argument("--backend", choices=["mock", "remote"], default="mock")
    p.add_argument("--mock-mode", choices=["gold", "untagged", "random"], default="random")
    p.add_argument("--api-base")
    p.add_argument("--model")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--ks", default="1")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "rebuild a report from an evaluation journal")
    p.add_argument("--records", required=True)
    p.add_argument("--items", required=True)
    p.add_argument("--ks", default="1")
    p.add_argument("--out", required=True)

    p = add("train-grpo", cmd_train_grpo, "train a toy categorical policy with GRPO")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("train-router", cmd_train_router, "train an expert router on response tables")
    p.add_argument("--responses", required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--feature-dim", type=int, default=DEFAULT_FEATURE_DIM)
    p.add_argument("--out", required=True)

    p = add("route", cmd_route, "route questions with a trained router")
    p.add_argument("--policy", required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--responses", help="optional response table for a routing report")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.parallelism < 1:
        parser.error("--parallelism must be >= 1")
    try:
        result = args.func(args)
        config = _load_config(args)
        out = result["out"]
        write_manifest(_manifest_path(out), args.command, args, config, result["inputs"], result.get("extra"))
    except UsageError as exc:
        print(f"threadbench {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ThreadbenchError, OSError, ValueError, KeyError) as exc:
        print(f"threadbench {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""``screencrawl`` command line: crawl, intervene, analyze, taskgen, score.

Exit codes: 0 success, 1 operational failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import CliConfig, ConfigError, LlmSettings, load_config, policy_levels
from .fleet import AlreadyResumed, Coordinator, CrawlRunner, DuplicateJob, InstancePool, UnknownTicket
from .sim import SimError, action_from_dict
from .store import DatasetStore, StorageFailure
from .traversal import RulePolicy, SessionConfig

log = logging.getLogger("screencrawl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
FLEET_DIR = "fleet"


class OperationalError(Exception):
    pass


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- wiring


def make_chat(llm: LlmSettings):
    from .llm import HttpChatClient, ScriptedChat

    if llm.transcript:
        return ScriptedChat.from_file(llm.transcript)
    if llm.url:
        return HttpChatClient(llm.url, llm.model, llm.api_key_env, llm.timeout, multimodal=llm.multimodal)
    raise ConfigError("the llm policy needs llm.transcript or llm.url")


def make_runner(cfg: CliConfig, apps) -> CrawlRunner:
    levels = policy_levels(cfg.policies)
    chat = make_chat(cfg.llm) if "llm" in levels else None

    def policies():
        from .llm import LlmPolicy

        out = []
        for lv in levels:
            out.append(RulePolicy() if lv == "rules" else LlmPolicy(chat, failure_budget=cfg.llm.failure_budget))
        return out

    session = SessionConfig(
        max_steps=cfg.max_steps,
        idle_window=cfg.idle_window,
        trigger_keywords=tuple(cfg.trigger_keywords),
        llm_failure_budget=cfg.llm.failure_budget,
    )
    return CrawlRunner(apps, policies, session, seed=cfg.seed)


def load_inputs(cfg: CliConfig):
    from .scenario import load_apps_dir, load_scenario

    for name in ("scenario", "metadata", "apps_dir"):
        if getattr(cfg, name):
            setattr(cfg, name, str(Path(getattr(cfg, name)).resolve()))
    if cfg.scenario:
        sc = load_scenario(cfg.scenario)
        if not cfg.llm.transcript and not cfg.llm.url:
            cfg.llm.transcript = str(sc.transcript_path)
        return sc.apps, sc.metadata
    if not cfg.metadata or not cfg.apps_dir:
        raise ConfigError("crawl needs --scenario or both --metadata and --apps")
    meta_path, apps_dir = Path(cfg.metadata), Path(cfg.apps_dir)
    if not meta_path.exists():
        raise OperationalError(f"metadata file {meta_path} not found")
    if not apps_dir.is_dir():
        raise OperationalError(f"app model directory {apps_dir} not found")
    apps = load_apps_dir(apps_dir)
    metadata = _read_jsonl(meta_path)
    missing = sorted({m["app_id"] for m in metadata} - set(apps))
    if missing:
        raise OperationalError(f"no app model for {', '.join(missing)}")
    return apps, metadata


def make_coordinator(cfg: CliConfig, apps, store: DatasetStore, root: Path) -> Coordinator:
    return Coordinator(
        InstancePool.simulated(cfg.instances),
        make_runner(cfg, apps),
        concurrency=cfg.concurrency or None,
        max_attempts=cfg.max_attempts,
        store=store,
        events_dir=root / "events",
    )


def _save_fleet(co: Coordinator, store: DatasetStore, root: Path, wall: float | None = None, append: bool = False):
    store.flush()
    fleet = root / FLEET_DIR
    fleet.mkdir(parents=True, exist_ok=True)
    co.save_state(fleet / "state.json")
    co.write_dispatch_log(fleet / "dispatch_log.jsonl", append=append)
    report = co.report(wall or 0.0)
    _write_json(fleet / "report.json", report)
    return report


def _summary(report: dict) -> str:
    s = report["summary"]
    return (
        f"jobs={s['total']} completed={s['completed']} awaiting_intervention={s['awaiting_intervention']} "
        f"failed={s['failed']} queued={s['queued']}"
    )


# ---------------------------------------------------------------- commands


def cmd_crawl(args, cfg: CliConfig) -> int:
    import time

    t0 = time.perf_counter()
    apps, metadata = load_inputs(cfg)
    root = Path(cfg.dataset_root)
    store = DatasetStore(root)
    co = make_coordinator(cfg, apps, store, root)
    co.submit_jobs(metadata)
    co.run()
    run = cfg.to_obj()
    run.pop("dataset_root")
    _write_json(root / FLEET_DIR / "run.json", run)
    report = _save_fleet(co, store, root, time.perf_counter() - t0)
    print(_summary(report))
    return EXIT_OK if report["summary"]["failed"] == 0 else EXIT_FAIL


def _restore(cfg: CliConfig):
    from .scenario import load_apps_dir, load_scenario

    root = Path(cfg.dataset_root)
    run_path = root / FLEET_DIR / "run.json"
    if not run_path.exists():
        raise OperationalError(f"no fleet state under {root}")
    run = json.loads(run_path.read_text(encoding="utf-8"))
    saved = load_config(env={}, overrides={k: v for k, v in run.items() if k != "llm"})
    saved.llm = LlmSettings(**run.get("llm", {}))
    saved.dataset_root = str(root)
    apps = load_scenario(saved.scenario).apps if saved.scenario else load_apps_dir(saved.apps_dir)
    store = DatasetStore.open(root)
    co = make_coordinator(saved, apps, store, root)
    co.load_state(root / FLEET_DIR / "state.json")
    return co, store, root


def _load_actions(path: Path) -> list:
    try:
        return [action_from_dict(d) for d in json.loads(path.read_text(encoding="utf-8"))]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise OperationalError(f"bad action file {path}: {exc}") from exc


def cmd_intervene(args, cfg: CliConfig) -> int:
    co, store, root = _restore(cfg)
    if args.action == "list":
        tickets = co.list_paused()
        for t in tickets:
            print(json.dumps(t.summary(), sort_keys=True))
        print(f"{len(tickets)} open tickets")
        return EXIT_OK
    rc = EXIT_OK
    try:
        if args.action == "resume":
            if args.ticket not in co.tickets:
                raise UnknownTicket(args.ticket)
            res = co.resume(args.ticket, _load_actions(Path(args.actions)))
            print(f"{args.ticket}: {res.status} after {res.steps_taken} steps")
        else:
            adir = Path(args.actions_dir)
            for t in co.list_paused():
                f = next((p for p in (adir / f"{t.ticket_id}.json", adir / f"{t.app_id}.json") if p.exists()), None)
                if f is None:
                    log.warning("no action file for %s (%s)", t.ticket_id, t.app_id)
                    rc = EXIT_FAIL
                    continue
                res = co.resume(t.ticket_id, _load_actions(f))
                print(f"{t.ticket_id} {t.app_id}: {res.status}")
        if co.queue:
            co.run()
    except (UnknownTicket, AlreadyResumed) as exc:
        print(f"error: {type(exc).__name__}: ticket {exc}", file=sys.stderr)
        rc = EXIT_FAIL
    report = _save_fleet(co, store, root, append=True)
    print(_summary(report) + f" open_tickets={report['open_tickets']}")
    if report["summary"]["failed"]:
        rc = EXIT_FAIL
    return rc


def make_judge(spec: str, cfg: CliConfig):
    from .analyze import ChatJudge, ConstantJudge, PlantedSetJudge
    from .llm import ScriptedChat

    if spec in ("always-true", "always-false"):
        return ConstantJudge(spec == "always-true")
    if spec == "llm":
        return ChatJudge(make_chat(cfg.llm))
    if spec.startswith("scripted:"):
        path = Path(spec.split(":", 1)[1])
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise OperationalError(f"cannot read judge plan {path}: {exc}") from exc
        if isinstance(doc, dict) and "good_labels" in doc:
            return PlantedSetJudge(doc["good_labels"])
        return ChatJudge(ScriptedChat.from_file(path))
    raise ConfigError(f"unknown judge {spec!r}")


def cmd_analyze(args, cfg: CliConfig) -> int:
    from .analyze import ANALYSES, analyze_store

    root = Path(cfg.dataset_root)
    store = DatasetStore.open(root)
    out = Path(args.out) if args.out else root / "analysis"
    parts = ANALYSES if args.analysis == "all" else (args.analysis,)
    judge = None
    if "match-harness" in parts:
        judge = make_judge(args.judge, cfg)
    stats = analyze_store(
        store,
        out,
        judge=judge,
        per_bucket=args.per_bucket,
        seed=cfg.seed,
        threshold=cfg.hamming_threshold,
        parts=parts,
    )
    print(f"wrote {args.analysis} for {stats['records']} records ({stats['unique']} unique) to {out}")
    return EXIT_OK


def cmd_taskgen(args, cfg: CliConfig) -> int:
    from .taskgen import SplitSpec, generate, split, write_jsonl

    task = args.task.replace("-", "_")
    root = Path(cfg.dataset_root)
    store = DatasetStore.open(root)
    kw = {}
    if task == "relationship":
        kw = {"balance": args.balance, "direct_parent": args.direct_parent}
    samples = generate(task, store, cfg.seed, args.n, **kw)
    train, evl = split(samples, SplitSpec(args.split, cfg.seed))
    out = Path(args.out) if args.out else root / "tasks"
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(samples, out / f"{task}.jsonl")
    write_jsonl(train, out / f"{task}.train.jsonl")
    write_jsonl(evl, out / f"{task}.eval.jsonl")
    _write_json(out / f"{task}.split.json", {"train": [s.sample_id for s in train], "eval": [s.sample_id for s in evl]})
    print(f"{task}: {len(samples)} samples ({len(train)} train / {len(evl)} eval) in {out}")
    return EXIT_OK


def cmd_score(args, cfg: CliConfig) -> int:
    from .taskgen import read_jsonl, score

    task = args.task.replace("-", "_")
    for p in (args.pred, args.gold):
        if not Path(p).exists():
            raise OperationalError(f"{p} not found")
    result = score(task, read_jsonl(args.pred), read_jsonl(args.gold))
    text = json.dumps(result, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--root", dest="dataset_root", help="dataset root directory")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="screencrawl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("crawl", parents=[common], help="crawl apps on a simulated fleet")
    c.add_argument("--scenario", help="scenario directory with manifest.json")
    c.add_argument("--metadata", help="app metadata JSONL")
    c.add_argument("--apps", dest="apps_dir", help="directory of app-model JSON files")
    c.add_argument("--out", dest="out_root", help="output dataset root (same as --root)")
    c.add_argument("--instances", type=int)
    c.add_argument("--concurrency", type=int)
    c.add_argument("--policies", help="rules[,llm][,human-queue]")
    c.add_argument("--max-steps", dest="max_steps", type=int)
    c.add_argument("--idle-window", dest="idle_window", type=int)
    c.add_argument("--llm-transcript", dest="llm_transcript", help="scripted chat transcript JSON")
    c.set_defaults(func=cmd_crawl)

    i = sub.add_parser("intervene", parents=[common], help="list or resume paused sessions")
    isub = i.add_subparsers(dest="action", required=True)
    isub.add_parser("list", parents=[common])
    r = isub.add_parser("resume", parents=[common])
    r.add_argument("ticket")
    r.add_argument("--actions", required=True, help="JSON list of human actions")
    ra = isub.add_parser("resume-all", parents=[common])
    ra.add_argument("--actions-dir", required=True, help="directory of <app_id>.json or <ticket_id>.json files")
    i.set_defaults(func=cmd_intervene)

    a = sub.add_parser("analyze", parents=[common], help="dataset statistics")
    a.add_argument("analysis", choices=["stats", "similarity-cdf", "label-coverage", "label-length", "match-harness", "all"])
    a.add_argument("--out", help="output directory (default <root>/analysis)")
    a.add_argument("--threshold", dest="hamming_threshold", type=int)
    a.add_argument("--judge", default="always-true", help="always-true | always-false | scripted:FILE | llm")
    a.add_argument("--per-bucket", type=int, default=500)
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("taskgen", parents=[common], help="generate training samples")
    t.add_argument("task", choices=["vh-generation", "tappability", "relationship", "component-id"])
    t.add_argument("--n", type=int)
    t.add_argument("--split", type=float, default=0.9)
    t.add_argument("--balance", type=float, default=0.10)
    t.add_argument("--direct-parent", action="store_true")
    t.add_argument("--out", help="output directory (default <root>/tasks)")
    t.set_defaults(func=cmd_taskgen)

    s = sub.add_parser("score", parents=[common], help="score predictions against golds")
    s.add_argument("task", choices=["tappability", "relationship", "component-id", "screen-qa", "vh-generation"])
    s.add_argument("--pred", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)
    return p


_OVERRIDES = ("dataset_root", "seed", "scenario", "metadata", "apps_dir", "instances", "concurrency",
              "policies", "max_steps", "idle_window", "hamming_threshold")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
    if getattr(args, "out_root", None):
        overrides["dataset_root"] = args.out_root
    if getattr(args, "llm_transcript", None):
        overrides["llm"] = {"transcript": args.llm_transcript}
    try:
        cfg = load_config(args.config, overrides=overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DuplicateJob as exc:
        print(f"error: duplicate package in metadata: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OperationalError, StorageFailure, SimError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

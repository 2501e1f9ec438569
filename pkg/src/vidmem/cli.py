"""Command-line entry point: ``vidmem <command> ...``.

Videos ending in ``.json`` are treated as simulated worlds and answered with the
scripted backends; anything else goes through the decoder and the HTTP backends.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import threading
from pathlib import Path
from typing import Sequence

from . import engine, evaluation, media, sim
from .backends import CaptionBackend, HttpCaptionBackend, HttpTextBackend, TextBackend
from .config import Config, get_preset
from .errors import ConfigError, VidmemError
from .memory import ScopeConfig, VideoMeta

log = logging.getLogger("vidmem")


def _is_world(path: str) -> bool:
    return path.endswith(".json")


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


def _scope(args, cfg: Config) -> ScopeConfig:
    scope = get_preset(args.preset or cfg.preset).scope()
    if args.max_iters is not None:
        if args.max_iters < 1:
            raise ConfigError("--max-iters must be >= 1")
        scope = scope.with_overrides(max_iterations=args.max_iters)
    return scope


def _opts(cfg: Config) -> engine.EngineOptions:
    return engine.EngineOptions(workers=cfg.workers, context_budget=cfg.context_budget,
                                max_repairs=cfg.max_repairs, cache_dir=cfg.cache_dir)


def _media_backends(cfg: Config) -> tuple[TextBackend, CaptionBackend]:
    def frames(video, period, fps):
        return media.extract_frames(video, period, fps, decoder=cfg.decoder)

    return (HttpTextBackend(cfg.reasoner.settings(cfg.api_key)),
            HttpCaptionBackend(cfg.captioner.settings(cfg.api_key), frames))


def _resolve(path: str, cfg: Config, scope: ScopeConfig) -> tuple[VideoMeta, TextBackend, CaptionBackend]:
    p = _require(path, "video")
    if _is_world(path):
        world = sim.WorldSpec.load(p)
        return (VideoMeta(world.video_id, world.duration_s, str(p)), sim.ScriptedReasoner(world),
                sim.ScriptedCaptioner(world, scope))
    video = VideoMeta(p.stem, media.probe_duration(str(p), cfg.probe), str(p))
    return (video, *_media_backends(cfg))


def _emit(args, payload: dict, human: str) -> None:
    print(json.dumps(payload, indent=2, ensure_ascii=False) if args.json else human)


# ---------------------------------------------------------------- commands


def cmd_memorize(args, cfg: Config) -> int:
    scope = _scope(args, cfg)
    video, _, captioner = _resolve(args.video, cfg, scope)
    opts = _opts(cfg)
    trace = engine.Trace()
    cm = engine.build_coarse_memory(video, scope, captioner, opts, trace)
    hit = trace.ledger.caption_calls == 0
    path = media.cache_path(cfg.cache_dir, video.video_id)
    _emit(args, {"video_id": video.video_id, "cache": str(path), "cache_hit": hit, "entries": len(cm),
                 "caption_calls": trace.ledger.caption_calls},
          f"{'cache hit' if hit else 'cached'}: {len(cm)} coarse memories for {video.video_id} -> {path}")
    return 0


def cmd_ask(args, cfg: Config) -> int:
    scope = _scope(args, cfg)
    if args.dry_run:
        if _is_world(args.video):
            world = sim.WorldSpec.load(_require(args.video, "video"))
            video = VideoMeta(world.video_id, world.duration_s)
        else:
            video = _resolve(args.video, cfg, scope)[0]
        plan = engine.planned_budget(video, scope)
        _emit(args, plan, "\n".join(f"{k}: {v}" for k, v in plan.items()))
        return 0
    video, llm, captioner = _resolve(args.video, cfg, scope)
    final = engine.run(video, args.question, scope, llm, captioner, _opts(cfg))
    trace_path = engine.export_trace(final, video.video_id, args.question, args.trace_dir)
    payload = {**final.to_dict(), "trace": str(trace_path)}
    periods = ", ".join(f"({p.start_s}, {p.end_s})" for p in final.evidence_periods) or "none"
    human = (f"answer: {final.answer}\nevidence: {periods}\nconfident: {final.confident}\n"
             f"iterations: {final.iterations_used}  llm calls: {final.ledger.llm_calls}  "
             f"caption calls: {final.ledger.caption_calls}\ntrace: {trace_path}")
    _emit(args, payload, human)
    return 0


class _DirPipeline:
    """Resolves QA video ids to ``<dir>/<id>.json`` worlds or media files in ``dir``."""

    def __init__(self, root: Path, cfg: Config, scope: ScopeConfig) -> None:
        self.root, self.cfg, self.scope = root, cfg, scope
        self._cache: dict[str, tuple] = {}
        self._lock = threading.Lock()

    def _lookup(self, video_id: str) -> tuple:
        with self._lock:
            return self._lookup_locked(video_id)

    def _lookup_locked(self, video_id: str) -> tuple:
        if video_id not in self._cache:
            world = self.root / f"{video_id}.json"
            if not world.is_file():
                world = self._scan_worlds().get(video_id)
            if world is not None and world.is_file():
                self._cache[video_id] = _resolve(str(world), self.cfg, self.scope)
            else:
                found = sorted(p for p in self.root.glob(f"{video_id}.*") if p.suffix != ".json")
                if not found:
                    raise VidmemError(f"video {video_id!r} not found under {self.root}")
                self._cache[video_id] = _resolve(str(found[0]), self.cfg, self.scope)
        return self._cache[video_id]

    def _scan_worlds(self) -> dict[str, Path]:
        found = {}
        for p in sorted(self.root.glob("*.json")):
            if p.name.endswith(".qas.json"):
                continue
            try:
                vid = json.loads(p.read_text(encoding="utf-8")).get("video_id")
            except (ValueError, AttributeError, OSError):
                continue
            if isinstance(vid, str):
                found.setdefault(vid, p)
        return found

    def video(self, video_id: str) -> VideoMeta:
        return self._lookup(video_id)[0]

    def backends(self, video_id: str):
        _, llm, cap = self._lookup(video_id)
        return llm, cap


def cmd_eval(args, cfg: Config) -> int:
    scope = _scope(args, cfg)
    qa_path = _require(args.qa_file, "QA file")
    try:
        qas = evaluation.load_qas(qa_path)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed QA file {qa_path}: {exc}") from exc
    root = Path(args.videos) if args.videos else qa_path.parent
    matcher = evaluation.label_matcher
    if args.llm_match:
        matcher = evaluation.llm_matcher(HttpTextBackend(cfg.reasoner.settings(cfg.api_key)))
    report = evaluation.run_eval(qas, _DirPipeline(root, cfg, scope), scope, _opts(cfg), strict=args.strict,
                                 workers=min(cfg.workers, 8), matcher=matcher)
    jpath, cpath = report.write(args.out)
    _emit(args, {"accuracy": report.accuracy, "correct": report.correct, "total": report.total,
                 "errors": report.errors, "mean_llm_calls": report.mean_llm_calls, "report": str(jpath),
                 "csv": str(cpath)},
          f"accuracy: {report.accuracy:.4f} ({report.correct}/{report.total}, {report.errors} errors)\n"
          f"mean llm calls: {report.mean_llm_calls:.2f}\nreport: {jpath}")
    return 0


def cmd_curve(args, cfg: Config) -> int:
    scope = _scope(args, cfg)
    video, llm, captioner = _resolve(args.video, cfg, scope)
    final = engine.run(video, args.question, scope, llm, captioner, _opts(cfg))
    rows = evaluation.richness_relevance_curve(evaluation.backtrack_snapshots(final), args.question, llm)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_levels_csv(rows, out)
    _emit(args, {"levels": [{"level": r.level.label, "entropy_mean": r.entropy_mean,
                             "relevance_mean": r.relevance_mean, "count": r.count} for r in rows],
                 "csv": str(out)},
          "\n".join(f"{r.level.label:<10} entropy={r.entropy_mean} relevance={r.relevance_mean}"
                    + ("  (empty)" if r.flagged else "") for r in rows) + f"\ncsv: {out}")
    return 0


def cmd_simgen(args, cfg: Config) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.needle:
        world = sim.generate_needle(random.Random(args.seed), args.facts, args.size)
        world = sim.WorldSpec(args.video_id or world.video_id, world.duration_s, world.events, world.facts)
    else:
        world = sim.generate_world(args.seed, args.size, n_facts=args.facts, video_id=args.video_id)
    world.save(out)
    qa_out = out.with_name(out.stem + ".qas.json")
    evaluation.save_qas(evaluation.qas_from_world(world), qa_out)
    _emit(args, {"world": str(out), "qas": str(qa_out), "video_id": world.video_id,
                 "duration_s": world.duration_s, "facts": len(world.facts)},
          f"wrote {out} ({world.duration_s} s, {len(world.facts)} facts) and {qa_out}")
    return 0


def _load_needle(path: str) -> evaluation.Needle:
    p = _require(path, "needle")
    if not _is_world(path):
        return evaluation.Needle(str(p), [])
    data = json.loads(p.read_text(encoding="utf-8"))
    if "clip" in data:
        return evaluation.needle_from_json(data)
    return evaluation.needle_from_fragment(sim.WorldSpec.from_json(data))


def cmd_needle(args, cfg: Config) -> int:
    if len(args.needles) != len(args.positions):
        raise ConfigError("--needles and --positions must have the same length")
    needles = [_load_needle(n) for n in args.needles]
    base_path = _require(args.base, "base video")
    if _is_world(args.base):
        base = sim.WorldSpec.load(base_path)
    else:
        base = VideoMeta(base_path.stem, media.probe_duration(str(base_path), cfg.probe), str(base_path))
    res = evaluation.build_needle_haystack(base, needles, args.positions, args.video_id)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if res.world is not None:
        res.world.save(out)
    else:
        out.write_text(json.dumps(res.plan.to_json(), indent=2) + "\n", encoding="utf-8")
    qa_out = out.with_name(out.stem + ".qas.json")
    evaluation.save_qas(res.qas, qa_out)
    _emit(args, {"output": str(out), "qas": str(qa_out), "duration_s": res.plan.duration_s,
                 "questions": len(res.qas), "mode": "world" if res.world is not None else "splice-plan"},
          f"wrote {out} ({res.plan.duration_s} s) and {qa_out} ({len(res.qas)} questions)")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--preset", help="scope preset name, e.g. lvbench-long")
    common.add_argument("--max-iters", type=int, dest="max_iters", help="override the iteration cap")
    common.add_argument("--json", action="store_true", help="structured output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vidmem", description="Hierarchical-memory long-video QA.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("memorize", parents=[common], help="build and cache coarse memory")
    p.add_argument("video")
    p.set_defaults(fn=cmd_memorize)

    p = sub.add_parser("ask", parents=[common], help="answer one question")
    p.add_argument("video")
    p.add_argument("question")
    p.add_argument("--dry-run", action="store_true", help="print the planned call budget only")
    p.add_argument("--trace-dir", default="traces")
    p.set_defaults(fn=cmd_ask)

    p = sub.add_parser("eval", parents=[common], help="run a QA file")
    p.add_argument("qa_file")
    p.add_argument("--videos", help="directory holding worlds/media (default: QA file directory)")
    p.add_argument("--out", default="eval-out")
    p.add_argument("--strict", action="store_true", help="count errored records as incorrect")
    p.add_argument("--llm-match", action="store_true", dest="llm_match",
                   help="map free-text answers to labels with the reasoning backend")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("curve", parents=[common], help="per-level richness/relevance")
    p.add_argument("video")
    p.add_argument("question")
    p.add_argument("--out", default="levels.csv")
    p.set_defaults(fn=cmd_curve)

    p = sub.add_parser("simgen", parents=[common], help="generate a simulated world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=3600, help="duration in seconds")
    p.add_argument("--facts", type=int, default=1)
    p.add_argument("--needle", action="store_true", help="emit a short needle fragment instead")
    p.add_argument("--video-id", dest="video_id")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simgen)

    p = sub.add_parser("needle", parents=[common], help="splice needles into a base video or world")
    p.add_argument("base")
    p.add_argument("--needles", nargs="+", required=True)
    p.add_argument("--positions", nargs="+", type=int, required=True)
    p.add_argument("--video-id", dest="video_id")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_needle)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.load(args.config)
        return args.fn(args, cfg)
    except VidmemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        stderr = getattr(exc, "stderr", "")
        if stderr:
            print(stderr.rstrip(), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

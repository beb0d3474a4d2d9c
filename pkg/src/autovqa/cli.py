"""Command line entry points.

Subcommands: annotate (run the loop against configured HTTP backends),
evaluate (grounding metrics plus the composite score against references),
stats (run statistics recomputed from the output files alone), and
mock-run (a fully offline run driven by a scripted fixture).

Exit codes: 0 success, 1 usage error, 2 config or input validation
failure, 3 unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from PIL import Image

from .backends import ALL_ROLES, BackendConfig, Backends, http_backends, mock_script
from .dataio import (
    AnnotationRecord,
    JsonlSink,
    LedgerEntry,
    ManifestEntry,
    _read_jsonl,
    append_record,
    load_dataset,
    load_ledger,
    load_manifest,
    load_mask,
    mask_to_bbox,
    resolve_image,
)
from .domain import BBox, ImageRef, LoopConfig, Rubric, RubricSet
from .errors import AutoVQAError, EmptyRun, ImageDecodeError, ParseError
from .evalharness import (
    VQA_METRICS,
    composite_score,
    evaluate_grounding,
    load_metric_file,
    merge_metric_files,
)
from .generation import DEFAULT_RUBRIC_TEXTS
from .loop import (
    ATTRIBUTE_OTHER,
    RELATIONAL_COUNTING,
    classify_question,
    run_batch,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_LOOP_KEYS = {f.name for f in dataclasses.fields(LoopConfig)}
_BACKEND_KEYS = {"base_url", "model", "api_key_env", "temperature", "timeout_seconds", "max_retries"}

DEFAULT_MOCK_IMAGE_SIZE = 64


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="autovqa",
        description="Self-correcting VQA-with-grounding annotation engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    annotate = sub.add_parser("annotate", help="run the annotation loop over a manifest")
    annotate.add_argument("--config", required=True, help="run config JSON file")
    _add_override_flags(annotate)

    evaluate = sub.add_parser("evaluate", help="score a dataset against references")
    evaluate.add_argument("--dataset", required=True, help="dataset JSONL produced by a run")
    evaluate.add_argument("--references", required=True, help="manifest JSONL with reference fields")
    evaluate.add_argument(
        "--metrics",
        nargs="*",
        default=[],
        help="metric JSONL files; composite score is printed when they cover "
        "clipscore, tifa, and vqascore",
    )

    stats = sub.add_parser("stats", help="run statistics from output files")
    stats.add_argument("--dataset", required=True)
    stats.add_argument("--ledger", required=True)

    mock = sub.add_parser("mock-run", help="offline run driven by a scripted fixture")
    mock.add_argument("--fixture", required=True, help="fixture JSONL file")
    mock.add_argument("--out", default="mock_out", help="output directory")
    _add_override_flags(mock)

    return parser


def _add_override_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--workers", type=int, default=None, help="worker pool size")
    sub.add_argument("--max-iter", type=int, default=None, help="iteration budget per image")
    sub.add_argument("--tau", type=float, default=None, help="acceptance threshold")
    sub.add_argument("--single-pass", action="store_true", help="one draft, no refinement")
    sub.add_argument("--score-only", action="store_true", help="bare-score verification")
    sub.add_argument("--no-routing", action="store_true", help="refine all rubrics at once")
    sub.add_argument("--no-memory", action="store_true", help="optimizer sees only the latest attempt")
    sub.add_argument("--print-config", action="store_true", help="print the effective config at startup")


@dataclasses.dataclass
class _RunPlan:
    manifest_entries: list[ManifestEntry]
    output_dir: str
    workers: int
    loop: LoopConfig
    rubrics: RubricSet
    backend_configs: dict[str, BackendConfig] | None

    def describe(self) -> dict:
        backends: dict | str
        if self.backend_configs is None:
            backends = "scripted"
        else:
            backends = {
                role: dataclasses.asdict(cfg) for role, cfg in sorted(self.backend_configs.items())
            }
        return {
            "output_dir": self.output_dir,
            "workers": self.workers,
            "loop": dataclasses.asdict(self.loop),
            "rubrics": {key: self.rubrics.get(key).full_text() for key in ("cap", "vqa", "vg")},
            "backends": backends,
        }


def _build_loop_config(obj: dict, args: argparse.Namespace) -> LoopConfig:
    kwargs = dict(obj or {})
    unknown = set(kwargs) - _LOOP_KEYS
    if unknown:
        raise ValueError(f"unknown loop config keys: {sorted(unknown)}")
    if args.max_iter is not None:
        kwargs["max_iterations"] = args.max_iter
    if args.tau is not None:
        kwargs["tau"] = args.tau
    if args.single_pass:
        kwargs["single_pass"] = True
    if args.score_only:
        kwargs["score_only_verification"] = True
    if args.no_routing:
        kwargs["disable_routing"] = True
    if args.no_memory:
        kwargs["disable_memory"] = True
    return LoopConfig(**kwargs)


def _build_rubrics(obj: dict | None, config_dir: Path) -> RubricSet:
    obj = obj or {}
    unknown = set(obj) - {"cap", "vqa", "vg"}
    if unknown:
        raise ValueError(f"unknown rubric keys: {sorted(unknown)}")
    texts = {}
    for key in ("cap", "vqa", "vg"):
        value = obj.get(key)
        if value is None:
            texts[key] = DEFAULT_RUBRIC_TEXTS[key]
        elif isinstance(value, str):
            texts[key] = value
        elif isinstance(value, dict) and isinstance(value.get("path"), str):
            texts[key] = (config_dir / value["path"]).read_text(encoding="utf-8")
        else:
            raise ValueError(f"rubric {key!r} must be a string or {{\"path\": ...}}")
    return RubricSet(
        cap=Rubric("cap", texts["cap"]),
        vqa=Rubric("vqa", texts["vqa"]),
        vg=Rubric("vg", texts["vg"]),
    )


def _build_backend_configs(obj: dict) -> dict[str, BackendConfig]:
    if not isinstance(obj, dict):
        raise ValueError("backends must be an object keyed by role")
    configs: dict[str, BackendConfig] = {}
    for role in ALL_ROLES:
        entry = obj.get(role)
        if entry is None:
            raise ValueError(f"backends config is missing role {role!r}")
        if not isinstance(entry, dict):
            raise ValueError(f"backend config for {role!r} must be an object")
        unknown = set(entry) - _BACKEND_KEYS
        if unknown:
            raise ValueError(f"unknown backend keys for {role!r}: {sorted(unknown)}")
        configs[role] = BackendConfig(role=role, **entry)
    extra = set(obj) - set(ALL_ROLES)
    if extra:
        raise ValueError(f"unknown backend roles: {sorted(extra)}")
    return configs


def _load_json_file(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read {path!r}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path!r} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ValueError(f"{path!r} must contain a JSON object")
    return obj


def _plan_annotate(args: argparse.Namespace) -> _RunPlan:
    cfg = _load_json_file(args.config)
    unknown = set(cfg) - {"manifest", "output_dir", "workers", "loop", "rubrics", "backends"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in ("manifest", "output_dir", "backends"):
        if key not in cfg:
            raise ValueError(f"config is missing {key!r}")
    config_dir = Path(args.config).resolve().parent
    manifest_path = str((config_dir / cfg["manifest"]))
    workers = args.workers if args.workers is not None else cfg.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise ValueError(f"workers must be an int >= 1, got {workers!r}")
    return _RunPlan(
        manifest_entries=load_manifest(manifest_path),
        output_dir=str(config_dir / cfg["output_dir"]),
        workers=workers,
        loop=_build_loop_config(cfg.get("loop", {}), args),
        rubrics=_build_rubrics(cfg.get("rubrics"), config_dir),
        backend_configs=_build_backend_configs(cfg["backends"]),
    )


def _resolve_images(entries: list[ManifestEntry]) -> list[ImageRef]:
    """Manifest entries to ImageRefs; a failed probe degrades to a
    placeholder ref whose loop errors at first file read."""
    refs = []
    for entry in entries:
        try:
            refs.append(resolve_image(entry))
        except ImageDecodeError:
            refs.append(ImageRef(entry.image_id, entry.path, 1, 1))
    return refs


def _execute(plan: _RunPlan, backends: Backends) -> dict:
    out_dir = Path(plan.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_path = out_dir / "dataset.jsonl"
    ledger_path = out_dir / "ledger.jsonl"
    dataset_path.unlink(missing_ok=True)
    ledger_path.unlink(missing_ok=True)

    images = _resolve_images(plan.manifest_entries)
    counts = {"accepted": 0, "failed": 0, "errored": 0}

    with JsonlSink(str(dataset_path)) as dataset_sink, JsonlSink(str(ledger_path)) as ledger_sink:

        def on_outcome(outcome):
            for attempt in outcome.attempts:
                append_record(ledger_sink, LedgerEntry.from_attempt(outcome.image.id, attempt))
            best = outcome.best_attempt
            append_record(
                ledger_sink,
                LedgerEntry.terminal(
                    outcome.image.id,
                    outcome.status,
                    outcome.iterations_used,
                    outcome.total_tokens,
                    best_total=best.score.total if best is not None else None,
                    error=outcome.error,
                ),
            )
            if outcome.status == "accepted":
                append_record(
                    dataset_sink,
                    AnnotationRecord.from_parts(
                        outcome.image,
                        outcome.accepted_draft,
                        best.score,
                        outcome.iterations_used,
                        outcome.total_tokens,
                        best.rubric_version,
                    ),
                )
            counts[outcome.status] += 1

        outcomes = run_batch(
            images, plan.rubrics, plan.loop, backends, workers=plan.workers, on_outcome=on_outcome
        )

    return {
        "images": len(outcomes),
        "accepted": counts["accepted"],
        "failed": counts["failed"],
        "errored": counts["errored"],
        "success_rate": counts["accepted"] / len(outcomes) if outcomes else None,
        "dataset": str(dataset_path),
        "ledger": str(ledger_path),
    }


def _cmd_annotate(args: argparse.Namespace) -> int:
    plan = _plan_annotate(args)
    if args.print_config:
        print(json.dumps(plan.describe(), indent=2))
    backends = http_backends(plan.backend_configs)
    summary = _execute(plan, backends)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _reference_box(entry: ManifestEntry) -> BBox | None:
    ref = entry.reference
    if ref is None:
        return None
    if ref.bbox is not None:
        return BBox(*ref.bbox)
    if ref.mask_path is not None:
        mask = load_mask(ref.mask_path)
        return mask_to_bbox(mask, mask.shape[1], mask.shape[0])
    return None


def _cmd_evaluate(args: argparse.Namespace) -> int:
    records = load_dataset(args.dataset)
    references = {entry.image_id: entry for entry in load_manifest(args.references)}
    pairs = []
    missing = 0
    for record in records:
        entry = references.get(record.image_id)
        ref_box = _reference_box(entry) if entry is not None else None
        if ref_box is None:
            missing += 1
            continue
        pairs.append((BBox(*record.bbox), ref_box))
    if not pairs:
        raise ValueError("no dataset record has a usable reference box")
    metrics = evaluate_grounding(pairs)
    result: dict = {
        "count": metrics.count,
        "missing_reference": missing,
        "miou": metrics.miou,
        "acc_at_05": metrics.acc_at_05,
    }
    if args.metrics:
        pool = merge_metric_files([load_metric_file(p) for p in args.metrics])
        if set(VQA_METRICS) <= pool.metric_names():
            vqa_means = {name: pool.mean(name) for name in VQA_METRICS}
            result["vqa_means"] = vqa_means
            result["composite_score"] = composite_score(
                vqa_means, {"miou": metrics.miou, "acc_at_05": metrics.acc_at_05}
            )
    print(json.dumps(result, indent=2))
    return EXIT_OK


def _cmd_stats(args: argparse.Namespace) -> int:
    records = load_dataset(args.dataset)
    entries = load_ledger(args.ledger)
    terminals = [e for e in entries if e.kind == "terminal"]
    if not terminals:
        raise EmptyRun("ledger has no terminal entries")
    accepted = [t for t in terminals if t.status == "accepted"]
    result: dict = {
        "image_count": len(terminals),
        "success_rate": len(accepted) / len(terminals),
        "avg_iterations_per_success": None,
        "avg_tokens_per_success": None,
        "avg_question_words": None,
        "avg_answer_words": None,
        "avg_mention_words": None,
        "avg_bbox_area_fraction": None,
        "complexity_distribution": None,
    }
    if accepted:
        result["avg_iterations_per_success"] = _avg(t.iterations_used for t in accepted)
        result["avg_tokens_per_success"] = _avg(
            t.prompt_tokens + t.completion_tokens for t in accepted
        )
    if records:
        result["avg_question_words"] = _avg(len(r.question.split()) for r in records)
        result["avg_answer_words"] = _avg(len(r.answer.split()) for r in records)
        result["avg_mention_words"] = _avg(len(r.mention.split()) for r in records)
        result["avg_bbox_area_fraction"] = _avg(
            (r.bbox[2] - r.bbox[0]) * (r.bbox[3] - r.bbox[1]) / (r.image_width * r.image_height)
            for r in records
        )
        rc = _avg(
            1.0 if classify_question(r.question) == RELATIONAL_COUNTING else 0.0 for r in records
        )
        result["complexity_distribution"] = {
            RELATIONAL_COUNTING: rc,
            ATTRIBUTE_OTHER: 1.0 - rc,
        }
    print(json.dumps(result, indent=2))
    return EXIT_OK


def _avg(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def _synthesize_image(path: Path, width: int, height: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (width, height), (127, 127, 127)).save(path, format="PNG")


def _plan_mock_run(args: argparse.Namespace) -> tuple[_RunPlan, list[dict]]:
    config_obj: dict = {}
    image_lines: list[dict] = []
    script_entries: list[dict] = []
    saw_config = False
    for n, obj in _read_jsonl(args.fixture):
        kind = obj.get("kind")
        if kind == "config":
            if saw_config:
                raise ParseError("fixture has more than one config line", line=n)
            saw_config = True
            config_obj = obj
        elif kind == "image":
            image_lines.append(dict(obj, _line=n))
        elif kind == "chat":
            entry = {k: v for k, v in obj.items() if k != "kind"}
            if entry.get("role") not in ("caption", "vqa", "vg_mention", "verifier", "optimizer"):
                raise ParseError(f"chat entry has unknown role {entry.get('role')!r}", line=n)
            script_entries.append(entry)
        elif kind == "ground":
            entry = {k: v for k, v in obj.items() if k != "kind"}
            entry["role"] = "grounder"
            script_entries.append(entry)
        else:
            raise ParseError(f"unknown fixture line kind {kind!r}", line=n)

    out_dir = Path(args.out)
    manifest_entries: list[ManifestEntry] = []
    for entry in image_lines:
        n = entry.pop("_line")
        image_id = entry.get("image_id")
        width = entry.get("width")
        height = entry.get("height")
        path = entry.get("path")
        try:
            if path is None:
                width = width or DEFAULT_MOCK_IMAGE_SIZE
                height = height or DEFAULT_MOCK_IMAGE_SIZE
                target = out_dir / "images" / f"{image_id}.png"
                _synthesize_image(target, width, height)
                path = str(target)
            manifest_entries.append(
                ManifestEntry(image_id=image_id, path=path, width=width, height=height)
            )
        except (AutoVQAError, ValueError, TypeError) as exc:
            raise ParseError(f"bad image line: {exc}", line=n) from exc

    workers = args.workers if args.workers is not None else config_obj.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise ValueError(f"workers must be an int >= 1, got {workers!r}")
    plan = _RunPlan(
        manifest_entries=manifest_entries,
        output_dir=str(out_dir),
        workers=workers,
        loop=_build_loop_config(config_obj.get("loop", {}), args),
        rubrics=_build_rubrics(config_obj.get("rubrics"), Path(args.fixture).resolve().parent),
        backend_configs=None,
    )
    return plan, script_entries


def _cmd_mock_run(args: argparse.Namespace) -> int:
    plan, script_entries = _plan_mock_run(args)
    if args.print_config:
        print(json.dumps(plan.describe(), indent=2))
    script = mock_script(script_entries)
    summary = _execute(plan, script.backends())
    summary["unconsumed_script_entries"] = script.remaining()
    print(json.dumps(summary, indent=2))
    return EXIT_OK


_COMMANDS = {
    "annotate": _cmd_annotate,
    "evaluate": _cmd_evaluate,
    "stats": _cmd_stats,
    "mock-run": _cmd_mock_run,
}


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage problems
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (AutoVQAError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()

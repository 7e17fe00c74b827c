"""``doclayout`` command line: ingest -> build-tasks -> train -> generate -> evaluate -> render.

Exit codes: 0 success, 1 data or validation failure, 2 usage error.
Every command writes ``<output>.manifest.json`` recording its arguments,
seed, input/output digests and a hash of the package source.  ``doclayout
rerun <manifest>`` replays a command.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import secrets
import sys
from itertools import islice
from multiprocessing import Pool
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from . import __version__
from .core import Layout, LayoutError, layout_from_dict, layout_to_dict
from .dataset import (
    FilterConfig,
    Rejection,
    CorpusStats,
    compute_stats,
    feature_columns,
    feature_row,
    ingest,
    synthesize_corpus,
    write_jsonl,
)
from .generator import (
    Sampling,
    VocabularyMismatch,
    generate_for,
    load_model,
    refine,
    train,
)
from .metrics import ALL_METRICS, evaluate, reference_report
from .render import RenderStyle, render_sheet, render_svg
from .serialization import Vocabulary, encode_layout
from .taxonomy import (
    InvalidLabelMap,
    Taxonomy,
    default_coarse_taxonomy,
    load_label_map,
    load_taxonomy,
)
from .tasks import (
    TaskInstance,
    TaskKind,
    make_mixture,
    make_task,
    noisy_layout,
    normalize_weights,
)

log = logging.getLogger("doclayout")

DATA_DIR_ENV = "DOCLAYOUT_DATA_DIR"
EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# helpers


def resolve_input(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(DATA_DIR_ENV):
        alt = Path(os.environ[DATA_DIR_ENV]) / p
        if alt.exists():
            return alt
    if not p.exists():
        raise UsageError(f"input not found: {path}")
    return p


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def load_active_taxonomy(args) -> Taxonomy:
    if getattr(args, "taxonomy", None):
        return load_taxonomy(resolve_input(args.taxonomy))
    if getattr(args, "label_map", None):
        return load_label_map(resolve_input(args.label_map)).coarse
    return default_coarse_taxonomy()


def iter_jsonl(path: Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def load_layouts(path: Path) -> list[Layout]:
    """Layouts from a corpus, a layout file or a task file (targets)."""
    out = []
    for d in iter_jsonl(path):
        if "kind" in d and "target" in d:
            d = d["target"]
        out.append(layout_from_dict(d))
    return out


def load_instances(path: Path) -> list[TaskInstance]:
    return [TaskInstance.from_dict(d) for d in iter_jsonl(path)]


def filter_config(args, taxonomy: Optional[Taxonomy]) -> FilterConfig:
    label_map = load_label_map(resolve_input(args.label_map)) if getattr(args, "label_map", None) else None
    categories = None
    if label_map is None and taxonomy is not None:
        categories = frozenset(taxonomy.labels)
    return FilterConfig(
        min_elements=getattr(args, "min_elements", 1),
        max_elements=getattr(args, "max_elements", 256),
        categories=categories,
        label_map=label_map,
        dedup=not getattr(args, "no_dedup", False),
    )


def corpus_layouts(args, taxonomy: Optional[Taxonomy],
                   rejections: Optional[list[Rejection]] = None) -> Iterator[Layout]:
    paths = [resolve_input(p) for p in args.input]
    for record in ingest(paths, filter_config(args, taxonomy), rejections):
        yield record.to_layout()


def seed_of(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbits(32)
        log.info("no --seed given; using %d", args.seed)
    return args.seed


def write_manifest(args, argv: Sequence[str], outputs: Iterable[Path], manifest_path: Path) -> None:
    config = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func",)
    }
    inputs = []
    for key in ("input", "reference", "model", "taxonomy", "label_map"):
        vals = config.get(key)
        if not vals:
            continue
        for v in vals if isinstance(vals, list) else [vals]:
            p = resolve_input(v)
            inputs.append({"path": str(v), "sha256": sha256_file(p)})
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": config,
        "seed": config.get("seed"),
        "version": __version__,
        "code_hash": code_hash(),
        "inputs": inputs,
        "outputs": [
            {"path": str(p), "sha256": sha256_file(p)} for p in outputs if p.is_file()
        ],
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def manifest_path_for(out: Path) -> Path:
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


# commands


def cmd_synth(args) -> tuple[int, list[Path]]:
    taxonomy = load_active_taxonomy(args)
    out = Path(args.output)
    with open(out, "w", encoding="utf-8") as f:
        n = write_jsonl(synthesize_corpus(args.count, seed_of(args), taxonomy.labels, args.max_elements), f)
    log.info("wrote %d synthetic records to %s", n, out)
    return EXIT_OK, [out]


def cmd_ingest(args) -> tuple[int, list[Path]]:
    taxonomy = load_taxonomy(resolve_input(args.taxonomy)) if args.taxonomy else None
    paths = [resolve_input(p) for p in args.input]
    out = Path(args.output)
    rej_path = Path(args.rejections) if args.rejections else out.with_name(out.name + ".rejections.jsonl")
    rejections: list[Rejection] = []
    with open(out, "w", encoding="utf-8") as f:
        n = write_jsonl(ingest(paths, filter_config(args, taxonomy), rejections), f)
    with open(rej_path, "w", encoding="utf-8") as f:
        write_jsonl(rejections, f)
    counts: dict[str, int] = {}
    for r in rejections:
        counts[r.reason] = counts.get(r.reason, 0) + 1
    log.info("accepted %d records, rejected %d %s", n, len(rejections), counts)
    if n == 0:
        log.warning("every record was rejected; output is empty")
        return EXIT_DATA, [out, rej_path]
    return EXIT_OK, [out, rej_path]


def _stats_chunk(payload) -> tuple[CorpusStats, list[list]]:
    layouts, taxonomy = payload
    stats = compute_stats(layouts)
    return stats, [feature_row(l, taxonomy) for l in layouts]


def _chunks(it: Iterable, size: int) -> Iterator[list]:
    it = iter(it)
    while True:
        chunk = list(islice(it, size))
        if not chunk:
            return
        yield chunk


def cmd_stats(args) -> tuple[int, list[Path]]:
    import csv

    taxonomy = load_active_taxonomy(args)
    out = Path(args.output)
    feat_path = Path(args.features) if args.features else out.with_name(out.stem + ".features.csv")
    layouts = corpus_layouts(args, taxonomy)
    payloads = ((chunk, taxonomy) for chunk in _chunks(layouts, args.chunk_size))
    total = CorpusStats()
    jobs = max(1, args.jobs or os.cpu_count() or 1)
    with open(feat_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(feature_columns(taxonomy))
        if jobs > 1:
            with Pool(jobs) as pool:
                results = pool.imap(_stats_chunk, payloads)
                for stats, rows in results:
                    total = total.merge(stats)
                    writer.writerows([repr(v) if isinstance(v, float) else v for v in r] for r in rows)
        else:
            for stats, rows in map(_stats_chunk, payloads):
                total = total.merge(stats)
                writer.writerows([repr(v) if isinstance(v, float) else v for v in r] for r in rows)
    out.write_text(json.dumps(total.to_dict(), indent=2) + "\n", encoding="utf-8")
    if total.pages == 0:
        log.warning("no records survived ingestion")
        return EXIT_DATA, [out, feat_path]
    log.info("%d pages, %d elements", total.pages, total.elements)
    return EXIT_OK, [out, feat_path]


def parse_weights(text: Optional[str]) -> Optional[list[float]]:
    if not text:
        return None
    try:
        return [float(v) for v in text.replace(":", ",").split(",")]
    except ValueError:
        raise UsageError(f"bad --weights {text!r}") from None


def cmd_build_tasks(args) -> tuple[int, list[Path]]:
    taxonomy = load_taxonomy(resolve_input(args.taxonomy)) if args.taxonomy else None
    layouts = list(corpus_layouts(args, taxonomy))
    if not layouts:
        raise DataError("no layouts to build tasks from")
    n = args.samples or len(layouts)
    stream = (layouts[i % len(layouts)] for i in range(n))
    rng = np.random.default_rng(seed_of(args))
    valid = taxonomy.labels if taxonomy else None
    if args.task == "mixture":
        try:
            weights = normalize_weights(parse_weights(args.weights))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        instances = make_mixture(stream, weights, rng, sigma=args.sigma,
                                 valid_categories=valid, random_subset=args.random_subset)
    else:
        instances = (
            make_task(args.task, l, rng, sigma=args.sigma, valid_categories=valid,
                      random_subset=args.random_subset)
            for l in stream
        )
    out = Path(args.output)
    with open(out, "w", encoding="utf-8") as f:
        count = write_jsonl(instances, f)
    log.info("wrote %d task instances", count)
    return EXIT_OK, [out]


def cmd_train(args) -> tuple[int, list[Path]]:
    taxonomy = load_active_taxonomy(args)
    vocab = Vocabulary(taxonomy)
    seqs = (encode_layout(l, vocab) for l in corpus_layouts(args, taxonomy))
    try:
        model = train(seqs, vocab, args.order, args.alpha)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.output)
    model.save(out)
    log.info("trained order-%d model on %d sequences", model.order, model.n_sequences)
    return EXIT_OK, [out]


def _instances_from_input(args, taxonomy: Taxonomy) -> list[TaskInstance]:
    path = resolve_input(args.input)
    first = next(iter_jsonl(path), None)
    if first is None:
        raise DataError(f"{path} is empty")
    if "kind" in first and args.task is None:
        return load_instances(path)
    if args.task is None:
        raise UsageError("--task is required when --input is a corpus")
    rng = np.random.default_rng(seed_of(args))
    layouts = load_layouts(path)
    return [make_task(args.task, l, rng, sigma=args.sigma, valid_categories=taxonomy.labels)
            for l in layouts]


def cmd_generate(args) -> tuple[int, list[Path]]:
    taxonomy = load_active_taxonomy(args)
    vocab = Vocabulary(taxonomy)
    model = load_model(resolve_input(args.model), vocab)
    instances = _instances_from_input(args, taxonomy)
    sampling = Sampling(args.temperature, args.top_k)
    rng = np.random.default_rng(seed_of(args))
    out = Path(args.output)
    with open(out, "w", encoding="utf-8") as f:
        for inst in instances:
            layout = generate_for(model, inst, sampling, rng, args.delta)
            d = layout_to_dict(layout)
            d["task"] = inst.kind.value
            f.write(json.dumps(d) + "\n")
    log.info("generated %d layouts", len(instances))
    return EXIT_OK, [out]


def cmd_refine(args) -> tuple[int, list[Path]]:
    taxonomy = load_active_taxonomy(args)
    model = load_model(resolve_input(args.model), Vocabulary(taxonomy))
    out = Path(args.output)
    path = resolve_input(args.input)
    n = 0
    with open(out, "w", encoding="utf-8") as f:
        for d in iter_jsonl(path):
            noisy = noisy_layout(TaskInstance.from_dict(d)) if "kind" in d else layout_from_dict(d)
            f.write(json.dumps(layout_to_dict(refine(model.histogram, noisy, args.delta))) + "\n")
            n += 1
    log.info("refined %d layouts", n)
    return EXIT_OK, [out]


def cmd_evaluate(args) -> tuple[int, list[Path]]:
    taxonomy = load_active_taxonomy(args)
    out = Path(args.output)
    if args.self_report:
        report = reference_report(load_layouts(resolve_input(args.reference or args.input)))
    else:
        if not args.reference:
            raise UsageError("--reference is required unless --self-report is given")
        metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else list(ALL_METRICS)
        unknown = set(metrics) - set(ALL_METRICS)
        if unknown:
            raise UsageError(f"unknown metrics: {sorted(unknown)}")
        report = evaluate(load_layouts(resolve_input(args.input)),
                          load_layouts(resolve_input(args.reference)), taxonomy, metrics)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    outputs = [out]
    if args.csv:
        csv_path = Path(args.csv)
        csv_path.write_text(report.csv_row(), encoding="utf-8")
        outputs.append(csv_path)
    print(f"alignment={report.alignment:.6f} overlap={report.overlap:.6f} "
          f"miou={report.miou} fid={report.fid}")
    if report.errors:
        for name, msg in report.errors.items():
            log.error("%s failed: %s", name, msg)
        return EXIT_DATA, outputs
    return EXIT_OK, outputs


def cmd_render(args) -> tuple[int, list[Path]]:
    layouts = load_layouts(resolve_input(args.input))
    if not layouts:
        raise DataError("no layouts to render")
    style = RenderStyle(show_labels=not args.no_labels, width=args.width, height=args.height)
    out = Path(args.output)
    if args.sheet:
        out.write_text(render_sheet(layouts, style, args.columns), encoding="utf-8")
        return EXIT_OK, [out]
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, layout in enumerate(layouts):
        name = "".join(c if c.isalnum() or c in "-_." else "_" for c in layout.id) or f"layout-{i:06d}"
        p = out / f"{i:06d}-{name}.svg"
        p.write_text(render_svg(layout, style), encoding="utf-8")
        written.append(p)
    return EXIT_OK, written


def cmd_rerun(args) -> tuple[int, list[Path]]:
    manifest = json.loads(resolve_input(args.manifest).read_text(encoding="utf-8"))
    argv = list(manifest["argv"])
    seed = manifest.get("seed")
    if seed is not None and "--seed" not in argv:
        argv += ["--seed", str(seed)]
    return main(argv), []


# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doclayout", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        return sp

    def taxonomy_opts(sp):
        sp.add_argument("--taxonomy", help="taxonomy JSON (default: built-in 10 coarse labels)")
        sp.add_argument("--label-map", help="coarse-to-fine label map JSON; fine labels are coarsened")

    def corpus_opts(sp):
        sp.add_argument("--input", nargs="+", required=True)
        sp.add_argument("--min-elements", type=int, default=1)
        sp.add_argument("--max-elements", type=int, default=256)
        sp.add_argument("--no-dedup", action="store_true")

    sp = add("synth", cmd_synth, "write a synthetic corpus")
    sp.add_argument("--output", required=True)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--max-elements", type=int, default=24)
    sp.add_argument("--seed", type=int)
    taxonomy_opts(sp)

    sp = add("ingest", cmd_ingest, "validate, clean and deduplicate a JSONL corpus")
    corpus_opts(sp)
    taxonomy_opts(sp)
    sp.add_argument("--output", required=True)
    sp.add_argument("--rejections")

    sp = add("stats", cmd_stats, "corpus statistics and per-page feature table")
    corpus_opts(sp)
    taxonomy_opts(sp)
    sp.add_argument("--output", required=True, help="stats JSON")
    sp.add_argument("--features", help="feature CSV (default: <output stem>.features.csv)")
    sp.add_argument("--chunk-size", type=int, default=2000)

    sp = add("build-tasks", cmd_build_tasks, "build conditioning task instances")
    corpus_opts(sp)
    taxonomy_opts(sp)
    sp.add_argument("--output", required=True)
    sp.add_argument("--task", default="mixture", choices=[k.value for k in TaskKind] + ["mixture"])
    sp.add_argument("--weights", help="five task weights, e.g. 1:1:1:3:3")
    sp.add_argument("--sigma", type=float, default=0.1)
    sp.add_argument("--samples", type=int, help="number of instances (cycles the corpus)")
    sp.add_argument("--random-subset", action="store_true", help="completion keeps a random subset")
    sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, "count an n-gram model")
    corpus_opts(sp)
    taxonomy_opts(sp)
    sp.add_argument("--output", required=True)
    sp.add_argument("--order", type=int, default=4)
    sp.add_argument("--alpha", type=float, default=0.1)

    sp = add("generate", cmd_generate, "generate layouts for task instances")
    taxonomy_opts(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="task JSONL, or a corpus with --task")
    sp.add_argument("--output", required=True)
    sp.add_argument("--task", choices=[k.value for k in TaskKind])
    sp.add_argument("--temperature", type=float, default=0.0, help="0 = greedy")
    sp.add_argument("--top-k", type=int, default=0)
    sp.add_argument("--sigma", type=float, default=0.1)
    sp.add_argument("--delta", type=int, default=30)
    sp.add_argument("--seed", type=int)

    sp = add("refine", cmd_refine, "snap noisy layouts to the training histogram")
    taxonomy_opts(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--delta", type=int, default=30)

    sp = add("evaluate", cmd_evaluate, "score generated layouts against references")
    taxonomy_opts(sp)
    sp.add_argument("--input", required=True, help="generated layouts")
    sp.add_argument("--reference")
    sp.add_argument("--output", required=True)
    sp.add_argument("--metrics", help=f"comma list from {','.join(ALL_METRICS)}")
    sp.add_argument("--self-report", action="store_true",
                    help="alignment/overlap of the reference set alone")
    sp.add_argument("--csv", help="also write a one-row CSV")

    sp = add("render", cmd_render, "render layouts to SVG")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True, help="directory, or file with --sheet")
    sp.add_argument("--sheet", action="store_true")
    sp.add_argument("--columns", type=int, default=4)
    sp.add_argument("--no-labels", action="store_true")
    sp.add_argument("--width", type=int)
    sp.add_argument("--height", type=int)

    sp = add("rerun", cmd_rerun, "replay the command recorded in a manifest")
    sp.add_argument("manifest")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.jobs is not None:
        args.jobs = max(1, args.jobs)
    try:
        code, outputs = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"doclayout: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LayoutError, VocabularyMismatch, InvalidLabelMap, KeyError, ValueError) as exc:
        print(f"doclayout: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.command != "rerun" and outputs:
        # rebuild argv with the resolved seed so the manifest replays exactly
        replay = list(argv)
        if getattr(args, "seed", None) is not None and "--seed" not in replay:
            replay += ["--seed", str(args.seed)]
        write_manifest(args, replay, outputs, manifest_path_for(Path(args.output)))
    return code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()

"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the summary lines appear at
the end of the session) or directly with ``python tests/test_acceptance.py``.
Criterion 12 needs the M6Doc newspaper test split converted to the corpus
JSONL schema; point ``DOCLAYOUT_M6DOC`` at it, otherwise it is skipped.
"""
from __future__ import annotations

import math
import os
import resource
import sys
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np
import pytest
from scipy import stats as sps

sys.path.insert(0, str(Path(__file__).parent))

from conftest import LABELS, TAXONOMY, layout_of, random_layout  # noqa: E402
from doclayout.core import DOC_TYPES, BBox, Element, Layout, PartialElement  # noqa: E402
from doclayout.dataset import CorpusStats, FilterConfig, compute_stats, ingest, synthesize_corpus, write_jsonl  # noqa: E402
from doclayout.generator import GREEDY, Sampling, generate, generate_tokens, train  # noqa: E402
from doclayout.metrics import (  # noqa: E402
    alignment_score,
    brute_force_assignment,
    frechet_distance,
    hungarian,
    layout_miou,
    overlap_score,
    reference_report,
)
from doclayout.serialization import Vocabulary, decode_layout, encode_layout  # noqa: E402
from doclayout.taxonomy import LabelMap, Taxonomy, validate_map  # noqa: E402
from doclayout.tasks import (  # noqa: E402
    DEFAULT_WEIGHTS,
    TASK_ORDER,
    TaskKind,
    make_completion,
    make_mixture,
    make_refinement,
    make_task,
)
from doclayout.generator import refine  # noqa: E402

# tolerances
COORD_TOL = 0.0005
FLOAT_SLACK = 1e-12  # bin-center distance is 0.0005 up to one ulp
ROUND_TRIP_BUDGET_S = 10.0
KS_MAX = 0.01
NOISE_STD, NOISE_TOL = 0.100, 0.003
MIXTURE_REL_TOL = 0.01
OVERLAP_TOL = 1e-12
FRECHET_SELF_TOL = 1e-6
FRECHET_CLOSED_FORM_TOL = 1e-9
MEMORIZE_MIN, MEMORIZE_BUDGET_S = 19, 60.0
PEAK_RSS_LIMIT = 4 * 1024**3
M6DOC_ALIGNMENT, M6DOC_OVERLAP, M6DOC_REL_TOL = 0.012, 0.051, 0.20

RESULTS: dict[int, str] = {}


def report(number: int, name: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
    RESULTS[number] = line
    print(line)
    return passed


def vocab() -> Vocabulary:
    return Vocabulary(TAXONOMY)


# 1. serialization round trip


def random_layout_any(rng: np.random.Generator, doc_type: str) -> Layout:
    n = int(rng.integers(1, 65))
    els = []
    for _ in range(n):
        w, h = rng.uniform(0.001, 1.0, 2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        if rng.random() < 0.1:  # flush with the right/bottom edge
            x, y = 1 - w, 1 - h
        els.append(Element(LABELS[int(rng.integers(len(LABELS)))], BBox(x, y, w, h)))
    return Layout(doc_type, 1000, 1000, tuple(els))


def check_round_trip() -> bool:
    rng = np.random.default_rng(1)
    v = vocab()
    layouts = [random_layout_any(rng, DOC_TYPES[i % len(DOC_TYPES)]) for i in range(10_000)]
    start = time.perf_counter()
    decoded = [decode_layout(encode_layout(l, v), v, "strict", doc_type=l.doc_type).layout for l in layouts]
    elapsed = time.perf_counter() - start
    worst, cat_ok = 0.0, True
    for a, b in zip(layouts, decoded):
        cat_ok &= a.categories == b.categories
        ca = np.array([e.bbox.as_tuple() for e in a.elements])
        cb = np.array([e.bbox.as_tuple() for e in b.elements])
        worst = max(worst, float(np.abs(ca - cb).max()))
    ok = cat_ok and worst <= COORD_TOL + FLOAT_SLACK and elapsed < ROUND_TRIP_BUDGET_S
    return report(1, "serialization round trip", ok,
                  f"10^4 layouts, categories equal={cat_ok}, max coord error={worst:.6g} "
                  f"(<= {COORD_TOL}), {elapsed:.2f}s (< {ROUND_TRIP_BUDGET_S}s)")


# 2. grammar and constraint exactness


def check_constraints(n: int = 10_000) -> bool:
    rng = np.random.default_rng(2)
    v = vocab()
    corpus = [random_layout(rng, int(rng.integers(1, 7)), i) for i in range(200)]
    model = train((encode_layout(l, v) for l in corpus), v)
    sampling = Sampling(1.0)
    failures: dict[str, int] = {}
    for kind in (TaskKind.UCOND, TaskKind.C_TO_SP, TaskKind.CS_TO_P, TaskKind.COMPLETION, TaskKind.REFINEMENT):
        bad = 0
        for i in range(n):
            layout = random_layout(rng, int(rng.integers(1, 7)), i)
            inst = make_task(kind, layout, rng)
            if kind is TaskKind.REFINEMENT:
                out = refine(model.histogram, Layout(
                    layout.doc_type, layout.canvas_w, layout.canvas_h,
                    tuple(Element(c.category, BBox.from_quantized(c.x, c.y, c.w, c.h)) for c in inst.condition)))
                bad += out.categories != layout.categories
                continue
            seq = generate_tokens(model, inst.header, inst.condition, kind, sampling, rng)
            try:
                out = decode_layout(seq, v, "strict", doc_type=layout.doc_type).layout
            except Exception:
                bad += 1
                continue
            if len(out) != inst.header.bbox_count:
                bad += 1
            elif kind is TaskKind.C_TO_SP:
                bad += out.categories != layout.categories
            elif kind is TaskKind.CS_TO_P:
                bad += [(e.category, e.qbbox.qw, e.qbbox.qh) for e in out.elements] != \
                       [(e.category, e.qbbox.qw, e.qbbox.qh) for e in layout.elements]
            elif kind is TaskKind.COMPLETION:
                bad += [PartialElement.from_element(e) for e in out.elements[:len(inst.condition)]] != \
                       list(inst.condition)
        failures[kind.value] = bad
    ok = not any(failures.values())
    return report(2, "grammar/constraint exactness", ok,
                  f"{n} generations per regime, violations={failures}")


# 3. completion bound


def check_completion(n: int = 100_000) -> bool:
    rng = np.random.default_rng(3)
    pool = [random_layout(rng, int(rng.integers(1, 65)), i) for i in range(500)]
    fractions = np.empty(n)
    over = 0
    for i in range(n):
        layout = pool[i % len(pool)]
        inst = make_completion(layout, rng)
        fractions[i] = inst.seed_trace["fraction"]
        over += len(inst.condition) > math.ceil(0.2 * len(layout))
    ks = sps.kstest(fractions, sps.uniform(loc=0.0, scale=0.2).cdf).statistic
    ok = over == 0 and ks < KS_MAX and fractions.max() <= 0.2
    return report(3, "completion bound", ok,
                  f"{n} instances, k > ceil(0.2N) in {over}, KS={ks:.5f} (< {KS_MAX})")


# 4. refinement noise calibration


def check_noise(n: int = 100_000) -> bool:
    rng = np.random.default_rng(4)
    layout = random_layout(rng, 10)
    draws = []
    while sum(len(d) for d in draws) < n:
        draws.append(np.asarray(make_refinement(layout, rng).seed_trace["noise"]).ravel())
    noise = np.concatenate(draws)[:n]
    std = float(noise.std(ddof=1))
    ok = abs(std - NOISE_STD) <= NOISE_TOL
    return report(4, "refinement noise calibration", ok,
                  f"{n} pre-clamp draws, std={std:.5f} (target {NOISE_STD} +/- {NOISE_TOL})")


# 5. mixture ratio


def check_mixture(n: int = 900_000) -> bool:
    tiny = layout_of(("text", (0.1, 0.1, 0.5, 0.5)))
    kinds = [inst.kind for inst in make_mixture((tiny for _ in range(n)), None, np.random.default_rng(5))]
    counts = np.array([kinds.count(k) for k in TASK_ORDER], dtype=np.float64)
    expected = n * np.array(DEFAULT_WEIGHTS) / sum(DEFAULT_WEIGHTS)
    rel = np.abs(counts - expected) / expected
    ok = bool((rel <= MIXTURE_REL_TOL).all())
    detail = ", ".join(f"{k.value}={int(c)} ({r:.3%})" for k, c, r in zip(TASK_ORDER, counts, rel))
    return report(5, "mixture ratio 1:1:1:3:3", ok, f"{n} draws: {detail}")


# 6. Hungarian oracle


def check_hungarian(n: int = 1000) -> bool:
    rng = np.random.default_rng(6)
    mismatches = 0
    for i in range(n):
        rows, cols = rng.integers(1, 9, 2)
        c = rng.random((rows, cols))
        if i % 3 == 0:
            c = np.round(c * 4)  # ties
        sense = "max" if i % 2 else "min"
        mismatches += hungarian(c, sense)[1] != brute_force_assignment(c, sense)
    return report(6, "Hungarian vs brute force", mismatches == 0,
                  f"{n} matrices up to 8x8, exact mismatches={mismatches}")


# 7. metric fixed points


def exact_moments(rng: np.random.Generator, n: int, mu: float, sigma: float) -> np.ndarray:
    z = rng.normal(size=n)
    z = (z - z.mean()) / z.std(ddof=1)
    return (mu + sigma * z)[:, None]


def check_fixed_points() -> bool:
    s = 0.25
    tiling = layout_of(*[("text", (i * s, j * s, s, s)) for j in range(4) for i in range(4)])
    ali = alignment_score(tiling)
    ove = overlap_score(tiling)
    rng = np.random.default_rng(7)
    mious = [layout_miou(l, l) for l in (random_layout(rng, int(rng.integers(1, 20))) for _ in range(200))]
    feats = rng.normal(size=(200, 24))
    self_fd = frechet_distance(feats, feats)
    closed = frechet_distance(exact_moments(rng, 5000, 0.0, 1.0), exact_moments(rng, 5000, 2.0, 3.0))
    ok = (ali == 0.0 and abs(ove) <= OVERLAP_TOL and all(abs(m - 1.0) <= 1e-12 for m in mious)
          and self_fd <= FRECHET_SELF_TOL and abs(closed - 8.0) <= FRECHET_CLOSED_FORM_TOL)
    return report(7, "metric fixed points", ok,
                  f"alignment(4x4)={ali}, overlap(4x4)={ove}, min miou(L,L)={min(mious)!r}, "
                  f"frechet(A,A)={self_fd:.3g}, 1-D closed form error={abs(closed - 8.0):.3g}")


# 8. overlap hand case


def check_overlap_hand_case() -> bool:
    value = overlap_score(layout_of(("text", (0, 0, 0.4, 0.4)), ("text", (0.2, 0.2, 0.4, 0.4))))
    return report(8, "overlap hand case", abs(value - 0.25) <= OVERLAP_TOL, f"overlap={value!r} (expected 0.25)")


# 9. memorization


def check_memorization() -> bool:
    rng = np.random.default_rng(0)
    v = vocab()
    pages = [random_layout(rng, int(rng.integers(3, 13)), i) for i in range(20)]
    start = time.perf_counter()
    model = train((encode_layout(p, v) for p in pages for _ in range(50)), v, order=4)
    hits = 0
    for page in pages:
        inst = make_task(TaskKind.C_TO_SP, page)
        out = generate(model, inst.header, inst.condition, inst.kind, GREEDY)
        hits += [e.qbbox for e in out.elements] == [e.qbbox for e in page.elements]
    elapsed = time.perf_counter() - start
    ok = hits >= MEMORIZE_MIN and elapsed < MEMORIZE_BUDGET_S
    return report(9, "n-gram memorization", ok,
                  f"{hits}/20 pages reproduced exactly (>= {MEMORIZE_MIN}), {elapsed:.2f}s (< {MEMORIZE_BUDGET_S}s)")


# 10. pipeline scale


def peak_rss_bytes() -> int:
    # ru_maxrss is KiB on Linux, bytes on macOS
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return rss if sys.platform == "darwin" else rss * 1024


def check_pipeline(n: int = 1_000_000, shard: int = 100_000) -> bool:
    start = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "corpus.jsonl"
        with open(path, "w", encoding="utf-8") as f:
            write_jsonl(synthesize_corpus(n, 10, LABELS), f)
        # duplicate a slice so dedup has work to do
        with open(path, encoding="utf-8") as src, open(Path(tmp) / "dups.jsonl", "w", encoding="utf-8") as dst:
            for _, line in zip(range(1000), src):
                dst.write(line.replace('"syn-', '"dup-', 1))
        single = CorpusStats()
        merged = CorpusStats()
        current = CorpusStats()
        kept = 0
        rejected: list = []
        for record in ingest([path, Path(tmp) / "dups.jsonl"], FilterConfig(), rejected):
            layout = record.to_layout()
            single.add(layout)
            current.add(layout)
            kept += 1
            if kept % shard == 0:
                merged = merged.merge(current)
                current = CorpusStats()
        merged = merged.merge(current)
    elapsed = time.perf_counter() - start
    peak = peak_rss_bytes()
    equal = merged == single and merged.to_dict() == single.to_dict()
    # short synthetic pages can coincide after quantization; those are real duplicates
    only_dups = all(r.reason == "duplicate" for r in rejected)
    injected = sum(1 for r in rejected if (r.id or "").startswith("dup-"))
    natural = len(rejected) - injected
    accounted = only_dups and injected == 1000 and kept + len(rejected) == n + 1000
    ok = equal and peak < PEAK_RSS_LIMIT and accounted
    return report(10, "pipeline scale", ok,
                  f"{n} records (+1000 injected duplicates), kept {kept}, rejected {injected} injected + "
                  f"{natural} content duplicates, other rejections: {not only_dups}, "
                  f"shard-merged == single-pass: {equal}, "
                  f"peak RSS {peak / 2**20:.0f} MiB (< 4096 MiB), {elapsed:.0f}s")


# 11. taxonomy partition


def check_partition() -> bool:
    coarse = Taxonomy("coarse", ("text", "title", "image", "table"), "coarse")
    expansion = {
        "text": {"paragraph", "lead", "ordered_list"},
        "title": {"headline", "subheadline"},
        "image": {"photo", "chart"},
        "table": {"table"},
    }
    fine = Taxonomy("fine", tuple(sorted(set().union(*expansion.values()))), "fine")
    accepted = validate_map(LabelMap(coarse, fine, expansion)).valid
    injected = missed = 0
    for f in fine.labels:
        for c in coarse.labels:
            if f in expansion[c]:
                continue
            bad = {k: set(v) | ({f} if k == c else set()) for k, v in expansion.items()}
            report_ = validate_map(LabelMap.unchecked(coarse, fine, bad))
            injected += 1
            missed += report_.valid or report_.overlaps != [f]
    ok = accepted and missed == 0
    return report(11, "taxonomy partition", ok,
                  f"example expansion accepted={accepted}, injected overlaps rejected {injected - missed}/{injected}")


# 12. M6Doc self report (data dependent)


def check_m6doc() -> bool | None:
    path = os.environ.get("DOCLAYOUT_M6DOC")
    if not path:
        RESULTS[12] = "[SKIP] criterion 12 M6Doc self-report: DOCLAYOUT_M6DOC not set"
        print(RESULTS[12])
        return None
    layouts = [r.to_layout() for r in ingest([path], FilterConfig(doc_types=("newspaper",), dedup=False))]
    rep = reference_report(layouts)
    ali_ok = abs(rep.alignment - M6DOC_ALIGNMENT) <= M6DOC_REL_TOL * M6DOC_ALIGNMENT
    ove_ok = abs(rep.overlap - M6DOC_OVERLAP) <= M6DOC_REL_TOL * M6DOC_OVERLAP
    return report(12, "M6Doc newspaper self-report", ali_ok and ove_ok,
                  f"{len(layouts)} pages, alignment={rep.alignment:.4f} (0.012 +/- 20%), "
                  f"overlap={rep.overlap:.4f} (0.051 +/- 20%)")


CHECKS: dict[int, Callable[[], bool | None]] = {
    1: check_round_trip,
    2: check_constraints,
    3: check_completion,
    4: check_noise,
    5: check_mixture,
    6: check_hungarian,
    7: check_fixed_points,
    8: check_overlap_hand_case,
    9: check_memorization,
    10: check_pipeline,
    11: check_partition,
    12: check_m6doc,
}


@pytest.mark.parametrize("number", sorted(CHECKS))
def test_criterion(number: int) -> None:
    outcome = CHECKS[number]()
    if outcome is None:
        pytest.skip(RESULTS[number])
    assert outcome, RESULTS[number]


if __name__ == "__main__":
    results = [CHECKS[k]() for k in sorted(CHECKS)]
    sys.exit(0 if all(r is not False for r in results) else 1)

"""Grammar-constrained n-gram baseline generator.

The model is an interpolated, additively smoothed n-gram over the element
vocabulary, estimated by counting.  At every decoding step the proposal is
masked to the tokens the element grammar allows and to the tokens the task
condition forces, then renormalized.  Forced steps (a single allowed token)
consume no randomness.

Contexts are built from *content* tokens only (category and coordinate
tokens).  Structural tokens such as ``<|cat_end|>`` are fully determined by
the grammar state, so keeping them would only shorten the useful history.
Every history starts with two header symbols, the document type and the
element count, which is how the generator sees the page header.
"""
from __future__ import annotations

import enum
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .core import (
    BBox,
    ConditionMismatch,
    Element,
    Layout,
    LayoutError,
    PartialElement,
    MAX_Q,
    NUM_BINS,
)
from .serialization import (
    BOX_END,
    BOX_START,
    CAT_END,
    CAT_START,
    EOS,
    SPECIAL_TEXT,
    ParseError,
    PromptHeader,
    TokenSequence,
    Vocabulary,
    decode_layout,
)
from .tasks import TaskInstance, TaskKind

MODEL_FORMAT = "doclayout-ngram"
MODEL_VERSION = 1
PAD = -1
NO_DOC = -2


class VocabularyMismatch(LayoutError):
    """A saved model was built for a different vocabulary."""


class State(enum.Enum):
    START_OR_EOS = 0
    CAT = 1
    CAT_END = 2
    BOX_START = 3
    X = 4
    Y = 5
    W = 6
    H = 7
    BOX_END = 8


_ROLE_OF_STATE = {State.X: 0, State.Y: 1, State.W: 2, State.H: 3}


class GrammarState:
    """Walks the element grammar, optionally under a task condition.

    ``count`` forces the number of elements; ``forced`` maps an element
    index to the partial tuple whose present fields must be reproduced.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        count: Optional[int] = None,
        categories: Optional[Sequence[str]] = None,
        forced: Optional[dict[int, PartialElement]] = None,
    ):
        self.vocab = vocab
        self.count = count
        self.forced = forced or {}
        self.state = State.START_OR_EOS
        self.emitted = 0
        self.done = False
        self._pos = [0, 0]  # qx, qy of the element being emitted
        self._label_ids = np.array(sorted(vocab.label_ids(categories or None)), dtype=np.int64)
        self._roles = [np.arange(r.start, r.stop, dtype=np.int64) for r in map(vocab.role_range, range(4))]
        # zero-extent boxes have no valid decoding
        self._roles[2] = self._roles[2][1:]
        self._roles[3] = self._roles[3][1:]

    def allowed(self) -> np.ndarray:
        s = self.state
        if self.done:
            return np.empty(0, dtype=np.int64)
        if s is State.START_OR_EOS:
            if self.count is None:
                return np.array([CAT_START, EOS], dtype=np.int64)
            return np.array([CAT_START if self.emitted < self.count else EOS], dtype=np.int64)
        cond = self.forced.get(self.emitted)
        if s is State.CAT:
            if cond is not None and cond.category is not None:
                return np.array([self.vocab.label_id(cond.category)], dtype=np.int64)
            return self._label_ids
        if s in _ROLE_OF_STATE:
            role = _ROLE_OF_STATE[s]
            if cond is not None:
                value = (cond.x, cond.y, cond.w, cond.h)[role]
                if value is not None:
                    return np.array([self.vocab.coord_id(role, value)], dtype=np.int64)
            # keep the box on the page: position + extent <= NUM_BINS
            if role < 2:
                extent = None if cond is None else (cond.w, cond.h)[role]
                limit = MAX_Q if extent is None else NUM_BINS - extent
                return self._roles[role][: limit + 1]
            return self._roles[role][: NUM_BINS - self._pos[role - 2]]
        fixed = {State.CAT_END: CAT_END, State.BOX_START: BOX_START, State.BOX_END: BOX_END}
        return np.array([fixed[s]], dtype=np.int64)

    def advance(self, tok: int, index: int = -1) -> None:
        allowed = self.allowed()
        if tok not in allowed:
            names = [self.vocab.text(int(t)) for t in allowed[:8]]
            raise ParseError(index, names, self.vocab.text(tok))
        s = self.state
        if s is State.START_OR_EOS:
            if tok == EOS:
                self.done = True
                return
            self.state = State.CAT
        elif s is State.BOX_END:
            self.emitted += 1
            self.state = State.START_OR_EOS
        else:
            if s in (State.X, State.Y):
                self._pos[_ROLE_OF_STATE[s]] = self.vocab.coord_of(tok)[1]
            self.state = State(s.value + 1)


class CoordHistogram:
    """Counts of quantized values per (role, category)."""

    def __init__(self) -> None:
        self.counts: dict[tuple[int, str], np.ndarray] = {}

    def add(self, role: int, category: str, q: int, n: int = 1) -> None:
        key = (role, category)
        arr = self.counts.get(key)
        if arr is None:
            arr = self.counts[key] = np.zeros(NUM_BINS, dtype=np.int64)
        arr[q] += n

    def get(self, role: int, category: str) -> Optional[np.ndarray]:
        return self.counts.get((role, category))

    def merge(self, other: "CoordHistogram") -> "CoordHistogram":
        out = CoordHistogram()
        for src in (self, other):
            for key, arr in src.counts.items():
                if key in out.counts:
                    out.counts[key] = out.counts[key] + arr
                else:
                    out.counts[key] = arr.copy()
        return out

    def to_dict(self) -> dict:
        out = {}
        for (role, cat), arr in sorted(self.counts.items()):
            nz = np.nonzero(arr)[0]
            out[f"{role}|{cat}"] = {str(int(q)): int(arr[q]) for q in nz}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CoordHistogram":
        h = cls()
        for key, bins in d.items():
            role, cat = key.split("|", 1)
            for q, n in bins.items():
                h.add(int(role), cat, int(q), int(n))
        return h


def _is_content(vocab: Vocabulary, tok: int) -> bool:
    return vocab.label_base <= tok < vocab.size


def _seed_history(vocab: Vocabulary, order: int, doc_type: Optional[str], count: int) -> list[int]:
    doc = vocab.doc_type_id(doc_type) if doc_type else NO_DOC
    return [PAD] * (order - 1) + [doc, -(1000 + count)]


class NGramModel:
    """Interpolated additive-smoothing n-gram over the element vocabulary.

    ``P(t | ctx) = sum_m lambda_m (c_m(ctx_m, t) + alpha) / (c_m(ctx_m) + alpha |V|)``
    for context lengths ``m = 0 .. order-1``.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int = 4,
        alpha: float = 0.1,
        lambdas: Optional[Sequence[float]] = None,
    ):
        if order < 2:
            raise ValueError("order must be at least 2")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.vocab = vocab
        self.order = order
        self.alpha = float(alpha)
        if lambdas is None:
            lambdas = [1.0 / order] * order
        lam = np.asarray(lambdas, dtype=np.float64)
        if lam.shape != (order,) or (lam < 0).any() or not math.isclose(lam.sum(), 1.0):
            raise ValueError(f"need {order} non-negative lambdas summing to 1")
        self.lambdas = lam
        self.counts: list[dict[tuple, dict[int, int]]] = [defaultdict(dict) for _ in range(order)]
        self.totals: list[dict[tuple, int]] = [defaultdict(int) for _ in range(order)]
        self.histogram = CoordHistogram()
        self.n_sequences = 0
        self._arrays: list[dict] = [dict() for _ in range(order)]

    # counting

    def _observe(self, history: list[int], tok: int) -> None:
        n = len(history)
        for m in range(self.order):
            ctx = tuple(history[n - m:]) if m else ()
            succ = self.counts[m][ctx]
            succ[tok] = succ.get(tok, 0) + 1
            self.totals[m][ctx] += 1

    def add_sequence(self, seq: Union[TokenSequence, Sequence[int]]) -> None:
        tokens = seq.tokens if isinstance(seq, TokenSequence) else tuple(seq)
        doc_type = seq.doc_type if isinstance(seq, TokenSequence) else None
        grammar = GrammarState(self.vocab)
        for i, tok in enumerate(tokens):
            grammar.advance(tok, i)
        if not grammar.done:
            raise ParseError(len(tokens), [SPECIAL_TEXT[EOS]], "<end of sequence>")
        history = _seed_history(self.vocab, self.order, doc_type, tokens.count(CAT_START))
        category = None
        for tok in tokens:
            self._observe(history, tok)
            if self.vocab.is_label(tok):
                category = self.vocab.label_of(tok)
            else:
                rq = self.vocab.coord_of(tok)
                if rq is not None:
                    self.histogram.add(rq[0], category, rq[1])
            if _is_content(self.vocab, tok):
                history.append(tok)
        self.n_sequences += 1
        self._arrays = [dict() for _ in range(self.order)]

    def merge(self, other: "NGramModel") -> "NGramModel":
        """Sum the count tables of two shards trained with equal settings."""
        if (other.vocab.hash, other.order, other.alpha) != (self.vocab.hash, self.order, self.alpha):
            raise ValueError("cannot merge models with different settings")
        out = NGramModel(self.vocab, self.order, self.alpha, self.lambdas)
        for src in (self, other):
            for m in range(self.order):
                for ctx, succ in src.counts[m].items():
                    dst = out.counts[m][ctx]
                    for t, c in succ.items():
                        dst[t] = dst.get(t, 0) + c
                for ctx, tot in src.totals[m].items():
                    out.totals[m][ctx] += tot
        out.histogram = self.histogram.merge(other.histogram)
        out.n_sequences = self.n_sequences + other.n_sequences
        return out

    # probabilities

    def context(self, history: Sequence[int], m: int) -> tuple:
        return tuple(history[len(history) - m:]) if m else ()

    def order_term(self, m: int, ctx: tuple, tok: int) -> float:
        """Smoothed estimate of one order, ``(c(ctx, t) + a) / (c(ctx) + a|V|)``."""
        c = self.counts[m].get(ctx, {}).get(tok, 0)
        tot = self.totals[m].get(ctx, 0)
        return (c + self.alpha) / (tot + self.alpha * self.vocab.size)

    def prob(self, history: Sequence[int], tok: int) -> float:
        """Unmasked interpolated probability of ``tok`` after ``history``."""
        return float(sum(
            lam * self.order_term(m, self.context(history, m), tok)
            for m, lam in enumerate(self.lambdas)
        ))

    def _successors(self, m: int, ctx: tuple) -> Optional[tuple[np.ndarray, np.ndarray]]:
        cache = self._arrays[m]
        if ctx in cache:
            return cache[ctx]
        succ = self.counts[m].get(ctx)
        arrs = None
        if succ:
            ids = np.fromiter(succ.keys(), dtype=np.int64, count=len(succ))
            cnt = np.fromiter(succ.values(), dtype=np.float64, count=len(succ))
            arrs = (ids, cnt)
        cache[ctx] = arrs
        return arrs

    def distribution(self, history: Sequence[int], valid: np.ndarray) -> np.ndarray:
        """Masked, renormalized probabilities over the ids in ``valid``."""
        lo = int(valid[0])
        span = int(valid[-1]) - lo + 1
        window = np.zeros(span, dtype=np.float64)
        base = 0.0
        av = self.alpha * self.vocab.size
        for m, lam in enumerate(self.lambdas):
            if lam == 0.0:
                continue
            ctx = self.context(history, m)
            denom = self.totals[m].get(ctx, 0) + av
            base += lam * self.alpha / denom
            arrs = self._successors(m, ctx)
            if arrs is not None:
                ids, cnt = arrs
                sel = (ids >= lo) & (ids < lo + span)
                window[ids[sel] - lo] += (lam / denom) * cnt[sel]
        p = (window if span == len(valid) else window[valid - lo]) + base
        return p / p.sum()

    # persistence

    def to_dict(self) -> dict:
        orders = []
        for m in range(self.order):
            rows = []
            for ctx in sorted(self.counts[m]):
                succ = self.counts[m][ctx]
                rows.append([list(ctx), sorted(succ.items())])
            orders.append(rows)
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "vocab_hash": self.vocab.hash,
            "labels": list(self.vocab.labels),
            "order": self.order,
            "alpha": self.alpha,
            "lambdas": self.lambdas.tolist(),
            "n_sequences": self.n_sequences,
            "counts": orders,
            "histogram": self.histogram.to_dict(),
        }

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, separators=(",", ":"))
            f.write("\n")

    @classmethod
    def from_dict(cls, d: dict, vocab: Vocabulary) -> "NGramModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("not a doclayout n-gram model file")
        if d["vocab_hash"] != vocab.hash:
            raise VocabularyMismatch(
                "model vocabulary does not match the active taxonomy "
                f"(model labels: {d.get('labels')})"
            )
        model = cls(vocab, d["order"], d["alpha"], d["lambdas"])
        for m, rows in enumerate(d["counts"]):
            for ctx, succ in rows:
                ctx = tuple(ctx)
                model.counts[m][ctx] = {int(t): int(c) for t, c in succ}
                model.totals[m][ctx] = sum(c for _, c in succ)
        model.histogram = CoordHistogram.from_dict(d["histogram"])
        model.n_sequences = d.get("n_sequences", 0)
        return model


def load_model(path: Union[str, Path], vocab: Vocabulary) -> NGramModel:
    with open(path, encoding="utf-8") as f:
        return NGramModel.from_dict(json.load(f), vocab)


def train(
    corpus: Iterable[Union[TokenSequence, Sequence[int]]],
    vocab: Vocabulary,
    order: int = 4,
    alpha: float = 0.1,
    lambdas: Optional[Sequence[float]] = None,
) -> NGramModel:
    """Count n-grams and coordinate histograms in one pass over ``corpus``.

    The coordinate histogram is available as ``model.histogram``.
    """
    model = NGramModel(vocab, order, alpha, lambdas)
    for seq in corpus:
        model.add_sequence(seq)
    if model.n_sequences == 0:
        raise ValueError("cannot train on an empty corpus")
    return model


@dataclass(frozen=True)
class Sampling:
    """``temperature == 0`` means greedy decoding."""

    temperature: float = 0.0
    top_k: int = 0

    @property
    def greedy(self) -> bool:
        return self.temperature <= 0.0


GREEDY = Sampling()


def _choose(p: np.ndarray, sampling: Sampling, rng: Optional[np.random.Generator]) -> int:
    if sampling.greedy:
        return int(np.argmax(p))
    if rng is None:
        raise ValueError("sampling with temperature needs an rng")
    logp = np.log(np.maximum(p, 1e-300)) / sampling.temperature
    if 0 < sampling.top_k < len(p):
        keep = np.argsort(-logp, kind="stable")[: sampling.top_k]
        mask = np.full(len(p), -np.inf)
        mask[keep] = 0.0
        logp = logp + mask
    w = np.exp(logp - logp.max())
    cdf = np.cumsum(w)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def _forced_elements(kind: TaskKind, header: PromptHeader,
                     condition: Sequence[PartialElement]) -> dict[int, PartialElement]:
    n = header.bbox_count
    expected = {
        TaskKind.UCOND: None,
        TaskKind.C_TO_SP: (True, False, False),
        TaskKind.CS_TO_P: (True, True, False),
        TaskKind.COMPLETION: (True, True, True),
        TaskKind.REFINEMENT: (True, True, True),
    }[kind]
    if expected is None:
        if condition:
            raise ConditionMismatch("unconditional generation takes no condition tuples")
        return {}
    for i, c in enumerate(condition):
        if c.pattern != expected:
            raise ConditionMismatch(f"{kind.value} condition {i} has pattern {c.pattern}")
    if kind is TaskKind.COMPLETION:
        if len(condition) > n:
            raise ConditionMismatch(f"{len(condition)} retained elements exceed bbox_count {n}")
    elif len(condition) != n:
        raise ConditionMismatch(f"{kind.value} needs {n} condition tuples, got {len(condition)}")
    return dict(enumerate(condition))


def generate_tokens(
    model: NGramModel,
    header: PromptHeader,
    condition: Sequence[PartialElement] = (),
    kind: Union[TaskKind, str] = TaskKind.UCOND,
    sampling: Sampling = GREEDY,
    rng: Optional[np.random.Generator] = None,
) -> TokenSequence:
    kind = TaskKind(kind)
    if kind is TaskKind.REFINEMENT:
        raise ValueError("refinement is handled by refine(), not by sampling")
    forced = _forced_elements(kind, header, condition)
    grammar = GrammarState(model.vocab, header.bbox_count, header.valid_categories or None, forced)
    history = _seed_history(model.vocab, model.order, header.doc_type, header.bbox_count)
    tokens: list[int] = []
    while not grammar.done:
        valid = grammar.allowed()
        if len(valid) == 1:
            tok = int(valid[0])
        else:
            tok = int(valid[_choose(model.distribution(history, valid), sampling, rng)])
        grammar.advance(tok, len(tokens))
        tokens.append(tok)
        if _is_content(model.vocab, tok):
            history.append(tok)
    return TokenSequence(tuple(tokens), header.doc_type)


def generate(
    model: NGramModel,
    header: PromptHeader,
    condition: Sequence[PartialElement] = (),
    kind: Union[TaskKind, str] = TaskKind.UCOND,
    sampling: Sampling = GREEDY,
    rng: Optional[np.random.Generator] = None,
    layout_id: str = "",
    delta: int = 30,
) -> Layout:
    """Decode one layout for the given prompt.

    Refinement prompts are routed to :func:`refine` with the model's
    coordinate histogram.
    """
    kind = TaskKind(kind)
    if kind is TaskKind.REFINEMENT:
        _forced_elements(kind, header, condition)
        elements = [Element(c.category, BBox.from_quantized(c.x, c.y, c.w, c.h)) for c in condition]
        noisy = Layout(header.doc_type, header.canvas_w, header.canvas_h, tuple(elements), layout_id)
        return refine(model.histogram, noisy, delta)
    seq = generate_tokens(model, header, condition, kind, sampling, rng)
    return decode_layout(
        seq, model.vocab, "strict", doc_type=header.doc_type,
        canvas=(header.canvas_w, header.canvas_h), layout_id=layout_id,
    ).layout


def generate_for(
    model: NGramModel,
    instance: TaskInstance,
    sampling: Sampling = GREEDY,
    rng: Optional[np.random.Generator] = None,
    delta: int = 30,
) -> Layout:
    return generate(model, instance.header, instance.condition, instance.kind,
                    sampling, rng, instance.target.id, delta)


def snap(counts: np.ndarray, v: int, delta: int) -> int:
    """Histogram mode within ``[v - delta, v + delta]``.

    Ties go to the bin nearest ``v``, then to the smaller bin.
    """
    lo, hi = max(0, v - delta), min(NUM_BINS - 1, v + delta)
    window = counts[lo:hi + 1]
    best = np.flatnonzero(window == window.max()) + lo
    return int(min(best, key=lambda b: (abs(int(b) - v), int(b))))


def refine(histogram: CoordHistogram, noisy: Layout, delta: int = 30) -> Layout:
    """Snap every quantized coordinate to its local histogram mode."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    elements = []
    for e in noisy.elements:
        q = list(e.qbbox.as_tuple())
        for role in range(4):
            counts = histogram.get(role, e.category)
            if counts is not None:
                q[role] = snap(counts, q[role], delta)
        q[2], q[3] = max(q[2], 1), max(q[3], 1)
        elements.append(Element(e.category, BBox.from_quantized(*q)))
    return noisy.replace_elements(elements)


def perplexity(
    model: NGramModel, corpus: Iterable[Union[TokenSequence, Sequence[int]]]
) -> float:
    """``exp`` of the mean negative log masked probability per free token.

    Tokens the grammar forces (a single valid choice) have probability 1 and
    are left out of the mean.
    """
    total, n = 0.0, 0
    for seq in corpus:
        tokens = seq.tokens if isinstance(seq, TokenSequence) else tuple(seq)
        doc_type = seq.doc_type if isinstance(seq, TokenSequence) else None
        grammar = GrammarState(model.vocab)
        history = _seed_history(model.vocab, model.order, doc_type, tokens.count(CAT_START))
        for i, tok in enumerate(tokens):
            valid = grammar.allowed()
            if len(valid) > 1:
                pos = np.searchsorted(valid, tok)
                if pos >= len(valid) or valid[pos] != tok:
                    raise ParseError(i, [], model.vocab.text(tok))
                total -= math.log(model.distribution(history, valid)[pos])
                n += 1
            grammar.advance(tok, i)
            if _is_content(model.vocab, tok):
                history.append(tok)
    if n == 0:
        raise ValueError("perplexity needs at least one free token")
    return math.exp(total / n)

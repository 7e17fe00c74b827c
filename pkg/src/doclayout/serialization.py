"""Token serialization of layouts.

Each element becomes nine tokens::

    <|cat_start|> c <|cat_end|> <|box_start|> 0xxx 1yyy 2www 3hhh <|box_end|>

Coordinate tokens are atomic and role-prefixed (role 0=x, 1=y, 2=w, 3=h),
so ``1200`` is the single token "y in bin 200".  A layout is its elements
in reading order followed by ``<|eos|>``.

Token ids are laid out as: six specials, one token per taxonomy label, then
4 x 1000 coordinate tokens.  Prompt-only tokens (header keys, doc types,
digits) follow after that block so the element vocabulary stays contiguous.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from .core import (
    DOC_TYPES,
    NUM_BINS,
    BBox,
    ConditionMismatch,
    DomainError,
    Element,
    EmptyLayout,
    Layout,
    LayoutError,
    PartialElement,
    UnknownLabel,
    DEFAULT_MAX_ELEMENTS,
)
from .taxonomy import Taxonomy

CAT_START, CAT_END, BOX_START, BOX_END, SEP, EOS = range(6)
SPECIAL_TEXT = (
    "<|cat_start|>", "<|cat_end|>", "<|box_start|>", "<|box_end|>", "<|sep|>", "<|eos|>",
)
HEADER_KEYS = ("<|doc_type|>", "<|canvas|>", "<|count|>", "<|categories|>")
ROLE_NAMES = ("x", "y", "w", "h")


class ParseError(LayoutError, ValueError):
    """Strict decoding failed at ``index``; ``expected`` names acceptable tokens."""

    def __init__(self, index: int, expected: Sequence[str], got: str):
        self.index = index
        self.expected = tuple(expected)
        self.got = got
        super().__init__(
            f"token {index}: expected one of {list(self.expected)}, got {got!r}"
        )


class Vocabulary:
    """Token ids for one taxonomy.

    ``size`` counts the element vocabulary (specials, labels, coordinates);
    ``total_size`` adds the prompt-header tokens.
    """

    def __init__(self, taxonomy: Taxonomy):
        self.taxonomy = taxonomy
        self.labels = taxonomy.labels
        self.label_base = len(SPECIAL_TEXT)
        self.coord_base = self.label_base + len(self.labels)
        self.size = self.coord_base + 4 * NUM_BINS
        self.key_base = self.size
        self.doc_base = self.key_base + len(HEADER_KEYS)
        self.digit_base = self.doc_base + len(DOC_TYPES)
        self.total_size = self.digit_base + 10

        texts = list(SPECIAL_TEXT) + list(self.labels)
        texts += [f"{r}{q:03d}" for r in range(4) for q in range(NUM_BINS)]
        texts += list(HEADER_KEYS)
        texts += [f"<|{d}|>" for d in DOC_TYPES]
        texts += [f"<|{d}|>" for d in range(10)]
        assert len(texts) == self.total_size
        self._text = tuple(texts)
        self._ids = {t: i for i, t in enumerate(texts)}
        if len(self._ids) != len(texts):
            raise ValueError("taxonomy labels collide with reserved token text")
        self._label_ids = {lab: self.label_base + i for i, lab in enumerate(self.labels)}

    def __len__(self) -> int:
        return self.size

    @property
    def hash(self) -> str:
        """Stable digest of the token inventory, used to pin saved models."""
        return hashlib.sha256("\n".join(self._text).encode("utf-8")).hexdigest()

    # ids
    def label_id(self, label: str) -> int:
        try:
            return self._label_ids[label]
        except KeyError:
            raise UnknownLabel(label) from None

    def coord_id(self, role: int, q: int) -> int:
        if not (0 <= role < 4 and 0 <= q < NUM_BINS):
            raise DomainError(f"bad coordinate token role={role} q={q}")
        return self.coord_base + role * NUM_BINS + q

    def doc_type_id(self, doc_type: str) -> int:
        if doc_type not in DOC_TYPES:
            raise DomainError(f"unknown doc_type {doc_type!r}")
        return self.doc_base + DOC_TYPES.index(doc_type)

    def digit_ids(self, n: int) -> list[int]:
        if n < 0:
            raise DomainError("header integers must be non-negative")
        return [self.digit_base + int(c) for c in str(int(n))]

    # classification
    def is_label(self, tok: int) -> bool:
        return self.label_base <= tok < self.coord_base

    def label_of(self, tok: int) -> str:
        return self.labels[tok - self.label_base]

    def coord_of(self, tok: int) -> Optional[tuple[int, int]]:
        """``(role, q)`` for a coordinate token, else ``None``."""
        if self.coord_base <= tok < self.size:
            return divmod(tok - self.coord_base, NUM_BINS)
        return None

    def label_ids(self, labels: Optional[Iterable[str]] = None) -> list[int]:
        if labels is None:
            return list(range(self.label_base, self.coord_base))
        return [self.label_id(lab) for lab in labels]

    def role_range(self, role: int) -> range:
        start = self.coord_base + role * NUM_BINS
        return range(start, start + NUM_BINS)

    # text form
    def text(self, tok: int) -> str:
        if not (0 <= tok < self.total_size):
            return f"<|unk:{tok}|>"
        return self._text[tok]

    def to_text(self, tokens: Iterable[int]) -> str:
        return " ".join(self.text(t) for t in tokens)

    def from_text(self, text: str) -> list[int]:
        try:
            return [self._ids[t] for t in text.split()]
        except KeyError as exc:
            raise DomainError(f"unknown token text {exc.args[0]!r}") from None


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    doc_type: Optional[str] = None

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


@dataclass(frozen=True)
class PromptHeader:
    doc_type: str
    canvas_w: int
    canvas_h: int
    bbox_count: int
    valid_categories: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "valid_categories", tuple(self.valid_categories))
        if self.bbox_count < 1:
            raise DomainError("bbox_count must be at least 1")
        if self.doc_type not in DOC_TYPES:
            raise DomainError(f"unknown doc_type {self.doc_type!r}")

    def to_dict(self) -> dict:
        return {
            "doc_type": self.doc_type,
            "width": self.canvas_w,
            "height": self.canvas_h,
            "bbox_count": self.bbox_count,
            "valid_categories": list(self.valid_categories),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptHeader":
        return cls(d["doc_type"], int(d["width"]), int(d["height"]),
                   int(d["bbox_count"]), tuple(d.get("valid_categories", ())))


def element_tokens(element: Element, vocab: Vocabulary) -> list[int]:
    q = element.qbbox
    return [
        CAT_START, vocab.label_id(element.category), CAT_END, BOX_START,
        vocab.coord_id(0, q.qx), vocab.coord_id(1, q.qy),
        vocab.coord_id(2, q.qw), vocab.coord_id(3, q.qh),
        BOX_END,
    ]


def encode_layout(layout: Layout, vocab: Vocabulary) -> TokenSequence:
    if not layout.elements:
        raise EmptyLayout("cannot encode an empty layout")
    tokens: list[int] = []
    for i, e in enumerate(layout.elements):
        try:
            tokens.extend(element_tokens(e, vocab))
        except UnknownLabel as exc:
            raise UnknownLabel(exc.label, i) from None
    tokens.append(EOS)
    return TokenSequence(tuple(tokens), layout.doc_type)


@dataclass
class DecodeResult:
    layout: Layout
    diagnostics: list[str] = field(default_factory=list)


class _Malformed(Exception):
    def __init__(self, index: int, expected: Sequence[str]):
        self.index = index
        self.expected = expected


def _parse_element(tokens: Sequence[int], i: int, vocab: Vocabulary) -> tuple[Element, int]:
    """Parse one element whose ``<|cat_start|>`` sits at ``i``."""
    n = len(tokens)

    def at(j: int) -> int:
        return tokens[j] if j < n else -1

    j = i + 1
    if not vocab.is_label(at(j)):
        raise _Malformed(j, ("<category>",))
    category = vocab.label_of(at(j))
    j += 1
    for tok, name in ((CAT_END, SPECIAL_TEXT[CAT_END]), (BOX_START, SPECIAL_TEXT[BOX_START])):
        if at(j) != tok:
            raise _Malformed(j, (name,))
        j += 1
    qs = []
    for role in range(4):
        c = vocab.coord_of(at(j))
        if c is None or c[0] != role:
            raise _Malformed(j, (f"<coord role {role} ({ROLE_NAMES[role]})>",))
        qs.append(c[1])
        j += 1
    if at(j) != BOX_END:
        raise _Malformed(j, (SPECIAL_TEXT[BOX_END],))
    if qs[2] == 0 or qs[3] == 0:
        raise _Malformed(j - 2 if qs[2] == 0 else j - 1, ("<non-zero extent>",))
    return Element(category, BBox.from_quantized(*qs)), j + 1


def decode_layout(
    seq: Union[TokenSequence, Sequence[int]],
    vocab: Vocabulary,
    mode: str = "strict",
    *,
    doc_type: Optional[str] = None,
    canvas: tuple[int, int] = (1000, 1000),
    layout_id: str = "",
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> DecodeResult:
    """Parse a token sequence back into a layout.

    In ``strict`` mode any deviation from the grammar raises
    :class:`ParseError`.  In ``lenient`` mode a malformed element is dropped,
    a diagnostic is recorded and parsing resumes at the next
    ``<|cat_start|>``.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be strict or lenient, got {mode!r}")
    strict = mode == "strict"
    if isinstance(seq, TokenSequence):
        doc_type = doc_type or seq.doc_type
        tokens: Sequence[int] = seq.tokens
    else:
        tokens = list(seq)
    doc_type = doc_type or "academic"
    n = len(tokens)
    elements: list[Element] = []
    diagnostics: list[str] = []

    def fail(index: int, expected: Sequence[str]) -> None:
        got = vocab.text(tokens[index]) if index < n else "<end of sequence>"
        if strict:
            raise ParseError(index, expected, got)
        diagnostics.append(
            f"token {index}: expected one of {list(expected)}, got {got!r}"
        )

    i = 0
    terminated = False
    while i < n:
        tok = tokens[i]
        if tok == EOS:
            terminated = True
            if i + 1 < n:
                fail(i + 1, ("<end of sequence>",))
            break
        if tok != CAT_START:
            fail(i, (SPECIAL_TEXT[CAT_START], SPECIAL_TEXT[EOS]))
            i = _resync(tokens, i + 1)
            continue
        try:
            element, i = _parse_element(tokens, i, vocab)
        except _Malformed as exc:
            fail(exc.index, exc.expected)
            # the offending token may itself open the next element
            i = _resync(tokens, max(exc.index, i + 1))
            continue
        if len(elements) >= max_elements:
            fail(i - 9, ("<at most %d elements>" % max_elements,))
            continue
        elements.append(element)
    if not terminated:
        fail(n, (SPECIAL_TEXT[CAT_START], SPECIAL_TEXT[EOS]))
    if not elements:
        raise EmptyLayout("no element could be decoded")
    layout = Layout(doc_type, canvas[0], canvas[1], tuple(elements), layout_id, max_elements)
    return DecodeResult(layout, diagnostics)


def _resync(tokens: Sequence[int], start: int) -> int:
    for j in range(start, len(tokens)):
        if tokens[j] in (CAT_START, EOS):
            return j
    return len(tokens)


def condition_tokens(cond: PartialElement, vocab: Vocabulary) -> list[int]:
    """Render a partial tuple; absent field groups are simply left out."""
    out: list[int] = []
    if cond.category is not None:
        out += [CAT_START, vocab.label_id(cond.category), CAT_END]
    if cond.x is not None or cond.w is not None:
        out.append(BOX_START)
        if cond.x is not None:
            out += [vocab.coord_id(0, cond.x), vocab.coord_id(1, cond.y)]
        if cond.w is not None:
            out += [vocab.coord_id(2, cond.w), vocab.coord_id(3, cond.h)]
        out.append(BOX_END)
    return out


def header_tokens(header: PromptHeader, vocab: Vocabulary) -> list[int]:
    key = {k: vocab.key_base + i for i, k in enumerate(HEADER_KEYS)}
    out = [key["<|doc_type|>"], vocab.doc_type_id(header.doc_type)]
    out += [key["<|canvas|>"], *vocab.digit_ids(header.canvas_w),
            key["<|canvas|>"], *vocab.digit_ids(header.canvas_h)]
    out += [key["<|count|>"], *vocab.digit_ids(header.bbox_count)]
    out += [key["<|categories|>"], *vocab.label_ids(header.valid_categories)]
    return out


def check_condition(header: PromptHeader, condition: Sequence[PartialElement]) -> None:
    """Raise :class:`ConditionMismatch` if the condition cannot belong to the header."""
    if len(condition) > header.bbox_count:
        raise ConditionMismatch(
            f"{len(condition)} condition tuples for bbox_count {header.bbox_count}"
        )
    patterns = {c.pattern for c in condition}
    if len(patterns) > 1:
        raise ConditionMismatch(f"mixed condition tuple patterns {sorted(patterns)}")
    if patterns and not next(iter(patterns))[0]:
        raise ConditionMismatch("condition tuples must carry a category")
    if condition and not condition[0].is_complete and len(condition) != header.bbox_count:
        raise ConditionMismatch(
            f"partial tuples must cover all {header.bbox_count} elements, got {len(condition)}"
        )
    if header.valid_categories:
        allowed = set(header.valid_categories)
        for i, c in enumerate(condition):
            if c.category not in allowed:
                raise ConditionMismatch(f"condition {i} category {c.category!r} not in header")


def build_prompt(
    header: PromptHeader, condition: Sequence[PartialElement], vocab: Vocabulary
) -> TokenSequence:
    """``header <|sep|> condition tuples <|sep|>``."""
    check_condition(header, condition)
    tokens = header_tokens(header, vocab) + [SEP]
    for c in condition:
        tokens += condition_tokens(c, vocab)
    tokens.append(SEP)
    return TokenSequence(tuple(tokens), header.doc_type)

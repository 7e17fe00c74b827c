from __future__ import annotations

import types

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doclayout.core import ConditionMismatch, PartialElement
from doclayout.generator import (
    GREEDY,
    CoordHistogram,
    GrammarState,
    NGramModel,
    Sampling,
    VocabularyMismatch,
    generate,
    generate_tokens,
    load_model,
    perplexity,
    refine,
    snap,
    train,
)
from doclayout.serialization import PromptHeader, Vocabulary, decode_layout, encode_layout
from doclayout.taxonomy import Taxonomy
from doclayout.tasks import TaskKind, make_c_to_sp, make_cs_to_p, make_ucond

from conftest import layout_of, random_layout


@pytest.fixture(scope="module")
def corpus(vocab):
    rng = np.random.default_rng(0)
    return [random_layout(rng, int(rng.integers(2, 8)), i) for i in range(40)]


@pytest.fixture(scope="module")
def model(vocab, corpus):
    return train((encode_layout(l, vocab) for l in corpus), vocab)


def test_smoothing_formula():
    stub = types.SimpleNamespace(size=10)
    m = NGramModel(stub, order=2, alpha=0.1)
    m.counts[1][("c",)] = {7: 9}
    m.totals[1][("c",)] = 9
    assert m.order_term(1, ("c",), 7) == pytest.approx((9 + 0.1) / (9 + 1))
    assert m.order_term(1, ("c",), 7) == pytest.approx(0.91)


def test_unseen_context_is_uniform(vocab, corpus):
    top_only = train((encode_layout(l, vocab) for l in corpus), vocab, 4, 1.0, (0, 0, 0, 1))
    valid = np.arange(vocab.coord_id(0, 0), vocab.coord_id(0, 999) + 1)
    p = top_only.distribution([-7, -8, -9], valid)
    assert np.allclose(p, 1 / len(valid))


def test_memorizes_single_sequence(vocab):
    layout = layout_of(("title", (0.1, 0.05, 0.8, 0.1)), ("text", (0.1, 0.2, 0.8, 0.5)),
                       ("image", (0.3, 0.75, 0.4, 0.2)), doc_type="magazine")
    seq = encode_layout(layout, vocab)
    m = train([seq] * 100, vocab)
    header = PromptHeader("magazine", 1000, 1000, 3)
    out = generate_tokens(m, header, (), TaskKind.UCOND, GREEDY)
    assert out.tokens == seq.tokens


def test_c_to_sp_forces_categories(model, vocab):
    header = PromptHeader("exam", 1000, 1000, 2)
    cond = [PartialElement("title"), PartialElement("text")]
    for seed in range(20):
        out = generate(model, header, cond, "c_to_sp", Sampling(1.0, 50), np.random.default_rng(seed))
        assert out.categories == ("title", "text")


def test_cs_to_p_forces_sizes(model):
    header = PromptHeader("exam", 1000, 1000, 1)
    for seed in range(20):
        out = generate(model, header, [PartialElement("title", w=500, h=100)], "cs_to_p",
                       Sampling(1.0), np.random.default_rng(seed))
        q = out.elements[0].qbbox
        assert (out.categories[0], q.qw, q.qh) == ("title", 500, 100)


def test_ucond_count_and_strict_parse(model, vocab):
    header = PromptHeader("newspaper", 1000, 1000, 7)
    for seed in range(10):
        seq = generate_tokens(model, header, (), "ucond", Sampling(1.0), np.random.default_rng(seed))
        assert len(decode_layout(seq, vocab, "strict").layout) == 7


def test_valid_categories_restrict_labels(model):
    header = PromptHeader("exam", 1000, 1000, 5, ("table",))
    out = generate(model, header, (), "ucond", Sampling(2.0), np.random.default_rng(0))
    assert set(out.categories) == {"table"}


def test_completion_keeps_prefix(model):
    header = PromptHeader("exam", 1000, 1000, 4)
    kept = PartialElement("title", 100, 50, 800, 100)
    out = generate(model, header, [kept], "completion", Sampling(1.0), np.random.default_rng(0))
    assert len(out) == 4 and PartialElement.from_element(out.elements[0]) == kept


def test_condition_mismatch(model):
    header = PromptHeader("exam", 1000, 1000, 3)
    with pytest.raises(ConditionMismatch):
        generate(model, header, [PartialElement("text")], "c_to_sp")
    with pytest.raises(ConditionMismatch):
        generate(model, header, [PartialElement("text")], "ucond")


def test_determinism(model, corpus):
    inst = make_c_to_sp(corpus[0])
    a = generate(model, inst.header, inst.condition, inst.kind, Sampling(0.8, 20), np.random.default_rng(5))
    b = generate(model, inst.header, inst.condition, inst.kind, Sampling(0.8, 20), np.random.default_rng(5))
    assert a == b


def test_grammar_rejects_bad_token(vocab):
    g = GrammarState(vocab, count=1)
    with pytest.raises(Exception):
        g.advance(vocab.label_id("text"))


def test_snap_examples():
    counts = np.zeros(1000, dtype=np.int64)
    counts[100] = 5
    assert snap(counts, 110, 30) == 100
    assert snap(counts, 100, 30) == 100
    assert snap(counts, 140, 30) == 140  # spike outside window, all zero: nearest is itself
    assert snap(counts, 110, 0) == 110
    counts[120] = 5
    assert snap(counts, 110, 30) == 100  # tie at equal distance goes to the smaller bin


def test_refine_identity_at_zero_delta(model, corpus):
    for layout in corpus[:10]:
        out = refine(model.histogram, layout, delta=0)
        assert [e.qbbox for e in out.elements] == [e.qbbox for e in layout.elements]


def test_refine_fixed_point(vocab):
    layout = layout_of(("text", (0.1, 0.1, 0.3, 0.3)))
    m = train([encode_layout(layout, vocab)], vocab)
    noisy = layout_of(("text", (0.115, 0.09, 0.31, 0.28)))
    assert refine(m.histogram, noisy).elements[0].qbbox == layout.elements[0].qbbox
    assert refine(m.histogram, layout).elements[0].qbbox == layout.elements[0].qbbox


def test_perplexity(vocab):
    layout = layout_of(("text", (0.1, 0.1, 0.3, 0.3)), ("image", (0.5, 0.5, 0.4, 0.4)))
    seq = encode_layout(layout, vocab)
    ppl = [perplexity(train([seq] * 1000, vocab, 4, a, (0, 0, 0, 1)), [seq]) for a in (1.0, 0.01, 1e-4)]
    assert ppl[0] > ppl[1] > ppl[2] and ppl[2] < 1.01


def test_perplexity_uniform_model():
    tax = Taxonomy("one", ("text",), "coarse")
    v = Vocabulary(tax)
    layout = layout_of(("text", (0.1, 0.1, 0.3, 0.3)))
    seq = encode_layout(layout, v)
    fresh = NGramModel(v, order=2, alpha=1.0, lambdas=(0, 1))
    # no counts: every free step is uniform over its valid set.  Free steps are
    # start-or-stop (2 ways, twice), x and y (1000 bins), w and h (bins that
    # keep the box on the page: 1000 - 100 and 1000 - 100)
    ppl = perplexity(fresh, [seq])
    assert ppl == pytest.approx((2 * 1000 * 1000 * 900 * 900 * 2) ** (1 / 6), rel=1e-9)


def test_save_load_and_vocab_check(tmp_path, model, vocab):
    p = tmp_path / "m.json"
    model.save(p)
    loaded = load_model(p, vocab)
    assert loaded.to_dict() == model.to_dict()
    other = Vocabulary(Taxonomy("x", ("a", "b"), "coarse"))
    with pytest.raises(VocabularyMismatch):
        load_model(p, other)


def test_merge_equals_joint_training(vocab, corpus):
    seqs = [encode_layout(l, vocab) for l in corpus]
    joint = train(seqs, vocab)
    merged = train(seqs[:15], vocab).merge(train(seqs[15:], vocab))
    assert merged.to_dict() == joint.to_dict()


def test_empty_corpus(vocab):
    with pytest.raises(ValueError):
        train([], vocab)


def test_histogram_round_trip():
    h = CoordHistogram()
    h.add(0, "text", 5, 3)
    assert CoordHistogram.from_dict(h.to_dict()).to_dict() == h.to_dict()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.sampled_from(["ucond", "c_to_sp", "cs_to_p"]))
def test_generated_tokens_survive_decode(model, vocab, n, seed, kind):
    rng = np.random.default_rng(seed)
    layout = random_layout(rng, n)
    inst = {"ucond": make_ucond, "c_to_sp": make_c_to_sp, "cs_to_p": make_cs_to_p}[kind](layout)
    seq = generate_tokens(model, inst.header, inst.condition, kind, Sampling(1.5), rng)
    decoded = decode_layout(seq, vocab, "strict", doc_type=layout.doc_type).layout
    assert encode_layout(decoded, vocab).tokens == seq.tokens


def test_train_perplexity_below_held_out(vocab):
    wins = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        pages = [encode_layout(random_layout(rng, int(rng.integers(2, 8)), i), vocab) for i in range(80)]
        m = train(pages[:60], vocab)
        wins += perplexity(m, pages[:60]) <= perplexity(m, pages[60:])
    assert wins == 5

import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifi.batching import length_batches
from lifi.data import (CorpusError, CorpusRecord, SyntheticSpec, SyntheticWorld, load_coded, load_corpus,
                       make_synthetic, parse_corpus, preset, save_coded, save_corpus, unlabeled_truth)
from lifi.vocab import BOS, EOS, UNK, TokenizeError, Vocab

ATTRS = ["pos", "neg"]


def test_three_line_file(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"text": "good", "label": "pos"}\n{"text": "bad", "label": "neg"}\n{"text": "meh"}\n')
    recs = load_corpus(p, ATTRS)
    assert [r.text for r in recs] == ["good", "bad", "meh"]
    assert [r.label for r in recs] == ["pos", "neg", None]


def test_unknown_label_named():
    with pytest.raises(CorpusError, match="'happy'") as e:
        parse_corpus(['{"text": "a", "label": "pos"}', '{"text": "b", "label": "happy"}'], ATTRS)
    assert "line 2" in str(e.value)


@pytest.mark.parametrize("line, msg", [
    ("not json", "malformed"), ('["text"]', "object"), ('{"label": "pos"}', "text"),
    ('{"text": "   "}', "empty"), ('{"text": "a", "extra": 1}', "unexpected"), ('{"text": 3}', "text"),
    ('{"text": "a", "label": 1}', "label"),
])
def test_rejects_with_line_number(line, msg):
    with pytest.raises(CorpusError, match=msg) as e:
        parse_corpus(['{"text": "fine"}', "", line], ATTRS)
    assert "line 3" in str(e.value)


def test_round_trip_byte_exact(tmp_path):
    recs = [CorpusRecord("héllo \"wörld\"\tтест", "pos"), CorpusRecord("  spaces  ", None),
            CorpusRecord("emoji 🙂 \\ slash", "neg")]
    save_corpus(tmp_path / "r.jsonl", recs)
    assert load_corpus(tmp_path / "r.jsonl", ATTRS) == recs


_text = st.text(min_size=0, max_size=20)
_label = st.one_of(st.none(), st.sampled_from(ATTRS + ["other"]), st.integers(), st.booleans())


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(
    st.builds(lambda t, l: json.dumps({"text": t, "label": l}), _text, _label),
    st.builds(lambda t: json.dumps({"text": t}), _text),
    st.builds(lambda d: json.dumps(d), st.dictionaries(st.text(max_size=5), st.integers(), max_size=3)),
    st.text(max_size=30),
), max_size=6))
def test_fuzzed_lines(lines):
    """Accepted iff every nonblank line is an object with exactly the documented keys."""
    def ok(line):
        if not line.strip():
            return True
        try:
            obj = json.loads(line)
        except ValueError:
            return False
        if not isinstance(obj, dict) or set(obj) - {"text", "label"}:
            return False
        t, l = obj.get("text"), obj.get("label")
        return isinstance(t, str) and bool(t.strip()) and (l is None or (isinstance(l, str) and l in ATTRS))

    lines = [l.replace("\n", " ").replace("\r", " ") for l in lines]
    expect = all(ok(l) for l in lines)
    try:
        recs = parse_corpus(lines, ATTRS)
    except CorpusError:
        assert not expect
    else:
        assert expect
        assert len(recs) == sum(1 for l in lines if l.strip())


def test_coded_round_trip(tmp_path):
    save_coded(tmp_path / "c.jsonl", [("ab", [1.5, -2.0]), ("c", np.array([0.0, 3.25]))])
    out = load_coded(tmp_path / "c.jsonl", 2)
    assert out[0][0] == "ab" and out[1][1].tolist() == [0.0, 3.25]
    with pytest.raises(CorpusError):
        load_coded(tmp_path / "c.jsonl", 3)
    (tmp_path / "bad.jsonl").write_text('{"text": "a", "code": [NaN, 1]}\n')
    with pytest.raises(CorpusError, match="non-finite"):
        load_coded(tmp_path / "bad.jsonl")


# ---------------------------------------------------------------- synthetic

def small_spec(**kw):
    d = dict(n_labeled=40, n_unlabeled=60, n_heldout=30, seed=7)
    d.update(kw)
    return SyntheticSpec(**d)


def test_deterministic():
    a, b = make_synthetic(small_spec()), make_synthetic(small_spec())
    assert a == b
    assert make_synthetic(small_spec(seed=8))[0] != a[0]


def test_sizes_and_balance():
    spec = small_spec(attributes=("a", "b", "c", "d"), n_labeled=40, n_unlabeled=80, n_heldout=20)
    lab, unl, held = make_synthetic(spec)
    assert (len(lab), len(unl), len(held)) == (40, 80, 20)
    assert all(r.label is None for r in unl)
    assert Counter(r.label for r in lab) == {a: 10 for a in "abcd"}
    assert Counter(r.label for r in unlabeled_truth(spec)) == {a: 20 for a in "abcd"}
    assert [r.text for r in unlabeled_truth(spec)] == [r.text for r in unl]


def test_degenerate_rejected():
    with pytest.raises(ValueError, match="too similar"):
        make_synthetic(small_spec(strength=(0.0, 0.0)))
    with pytest.raises(ValueError):
        SyntheticSpec(attributes=("a",))
    with pytest.raises(ValueError):
        SyntheticSpec(attributes=("a", "a"))
    with pytest.raises(ValueError):
        SyntheticSpec(strength=(0.9, 0.5))


def test_presets():
    assert preset("sentiment").attributes == ("pos", "neg")
    assert len(preset("topic").attributes) == 4
    assert preset("sentiment", n_labeled=5).n_labeled == 5
    with pytest.raises(KeyError):
        preset("nope")


def test_spec_dict_round_trip():
    s = preset("topic")
    assert SyntheticSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s


@pytest.mark.parametrize("name", ["sentiment", "topic"])
def test_count_oracle_accuracy(name):
    """Multinomial naive Bayes over word counts (an oracle independent of the models) reaches >= 95%."""
    lab, unl, held = make_synthetic(preset(name))
    attrs = preset(name).attributes
    counts = {a: Counter() for a in attrs}
    for r in lab:
        counts[r.label].update(r.text.split())
    vocab = set().union(*counts.values())
    logp = {a: {w: math.log((c[w] + 1) / (sum(c.values()) + len(vocab))) for w in vocab} for a, c in counts.items()}
    floor = {a: math.log(1 / (sum(c.values()) + len(vocab))) for a, c in counts.items()}
    hits = 0
    for r in held:
        score = {a: sum(logp[a].get(w, floor[a]) for w in r.text.split()) for a in attrs}
        hits += max(score, key=score.get) == r.label
    assert hits / len(held) >= 0.95


def test_prompts_are_neutral():
    world = SyntheticWorld.build(preset("sentiment"))
    ps = world.prompts(10)
    assert len(ps) == 10 and ps == world.prompts(10)
    for p in ps:
        assert p.endswith(" ") and all(w in world.shared for w in p.split())


# ---------------------------------------------------------------- vocab / batching

def test_vocab():
    v = Vocab.from_texts(["ab", "ca"])
    assert len(v) == 7
    ids = v.encode("abc", bos=True, eos=True)
    assert ids[0] == BOS and ids[-1] == EOS and v.decode(ids) == "abc"
    with pytest.raises(TokenizeError, match="offset 1"):
        v.encode("aZ")
    assert v.encode("aZ", strict=False)[-1] == UNK
    assert Vocab.from_dict(v.to_dict()) == v


def test_length_batches(rng):
    lengths = rng.integers(1, 5, size=50)
    batches = length_batches(lengths, 4, rng)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(50))
    assert all(len(set(lengths[b])) == 1 and len(b) <= 4 for b in batches)
    with pytest.raises(ValueError):
        length_batches(lengths, 0)

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsasr import evaluate as ev
from zsasr.langdata import build_pools
from zsasr.tensor import Rng


def recursive_distance(a, b):
    """The plain recursive edit-distance definition, used as an oracle."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    if a[0] == b[0]:
        return recursive_distance(a[1:], b[1:])
    return 1 + min(recursive_distance(a[1:], b),
                   recursive_distance(a, b[1:]),
                   recursive_distance(a[1:], b[1:]))


def test_cer_identical_strings():
    assert ev.cer("abc", "abc") == 0.0


def test_cer_single_substitution():
    assert ev.cer("abc", "axc") == pytest.approx(1 / 3)


def test_cer_all_deletions():
    assert ev.cer("ab", "") == 1.0


def test_cer_insertions_can_reach_one():
    assert ev.cer("ab", "abcd") == 1.0


def test_cer_can_exceed_one():
    assert ev.cer("a", "xyz") > 1.0


def test_cer_rejects_empty_reference():
    with pytest.raises(ValueError):
        ev.cer("", "abc")


def test_cer_space_handling():
    assert ev.cer("a b", "ab") == pytest.approx(1 / 3)
    assert ev.cer("a b", "ab", strip_space=True) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="abc", max_size=4), st.text(alphabet="abc", max_size=4))
def test_levenshtein_matches_recursive_definition(a, b):
    assert ev.levenshtein(a, b) == recursive_distance(a, b)


def test_cer_exhaustive_small():
    # full check on strings of length <= 3; the acceptance suite extends to 6
    universe = [""] + ["".join(p) for n in (1, 2, 3)
                       for p in itertools.product("abc", repeat=n)]
    for ref in universe:
        if not ref:
            continue
        for hyp in universe:
            assert ev.cer(ref, hyp) == recursive_distance(ref, hyp) / len(ref)


# ----------------------------------------------------------------- evaluation


@pytest.fixture(scope="module")
def trained_free_model():
    from tests.test_trainer import tiny_corpus, tiny_model
    corpus = tiny_corpus(seed=31)
    model = tiny_model(corpus, seed=29)
    return corpus, model


def test_evaluate_deterministic(trained_free_model):
    corpus, model = trained_free_model
    test = [u for u in corpus.utterances if u.split == "test"]
    a = ev.evaluate(model, test, preset="p", seed=1, step=2)
    b = ev.evaluate(model, test, preset="p", seed=1, step=2)
    assert [(r.name, r.cer) for r in a.rows] == [(r.name, r.cer) for r in b.rows]


def test_empty_hypotheses_score_full_deletion(trained_free_model, monkeypatch):
    # a model emitting nothing loses every reference character
    corpus, model = trained_free_model
    test = [u for u in corpus.utterances if u.split == "test"]
    monkeypatch.setattr(ev, "decode_utterance", lambda *a, **k: "")
    rep = ev.evaluate(model, test)
    for row in rep.rows:
        assert row.cer == 1.0


def test_report_includes_gamma_for_group_b(trained_free_model):
    corpus, model = trained_free_model
    test = [u for u in corpus.utterances if u.split == "test"]
    rep = ev.evaluate(model, test)
    for row in rep.rows:
        if row.group == "B":
            assert row.gamma_grapheme is not None and row.gamma_byte is not None
            assert 0.0 <= row.gamma_byte <= 1.0 and row.gamma_grapheme == 1.0
        else:
            assert row.gamma_grapheme is None


def test_language_without_test_utts_is_omitted_with_warning(trained_free_model):
    corpus, model = trained_free_model
    test = [u for u in corpus.utterances
            if u.split == "test" and u.lang_id != 0]
    rep = ev.evaluate(model, test)
    assert all(r.name != "l1" for r in rep.rows)
    assert any("l1" in w for w in rep.warnings)


def test_group_means_are_unweighted_language_means(trained_free_model):
    corpus, model = trained_free_model
    test = [u for u in corpus.utterances if u.split == "test"]
    rep = ev.evaluate(model, test)
    for group in ("A", "B"):
        cers = [r.cer for r in rep.rows if r.group == group]
        assert rep.group_mean(group) == pytest.approx(np.mean(cers))
    all_cers = [r.cer for r in rep.rows]
    assert rep.group_mean("A+B") == pytest.approx(np.mean(all_cers))


def test_report_csv_roundtrip_self_consistent(tmp_path, trained_free_model):
    corpus, model = trained_free_model
    test = [u for u in corpus.utterances if u.split == "test"]
    rep = ev.evaluate(model, test, preset="x", seed=3, step=7)
    path = tmp_path / "report.csv"
    ev.save_report_csv(rep, path)
    rows, groups = ev.load_report_csv(path)
    # group means must be recomputable from the per-language rows
    for group in ("A", "B"):
        cers = [float(r["cer"]) for r in rows if r["group"] == group]
        assert groups[group] == pytest.approx(np.mean(cers), abs=1e-6)
    assert groups["A+B"] == pytest.approx(
        np.mean([float(r["cer"]) for r in rows]), abs=1e-6)

import numpy as np
import pytest

from wsed import evaluation as ev
from wsed.postproc import Event, EventList

from oracles import brute_force_matching


def test_match_rule_examples():
    ref = Event("a", 1.0, 2.0)
    assert ev.matches(ref, Event("a", 1.15, 2.10))
    assert not ev.matches(ref, Event("a", 1.30, 2.00))
    assert ev.matches(ref, ref)


def test_relative_offset_collar():
    ref = Event("a", 0.0, 5.0)  # offset collar max(0.2, 1.0) = 1.0
    assert ev.matches(ref, Event("a", 0.1, 5.9))
    assert not ev.matches(ref, Event("a", 0.1, 6.1))


def test_empty_est():
    out = ev.match_events(EventList("c", [Event("a", 1, 2)]), EventList("c"))
    assert out == {"a": (0, 0, 1)}


def test_one_to_one():
    ref = EventList("c", [Event("a", 1.0, 2.0), Event("a", 1.1, 2.1)])
    est = EventList("c", [Event("a", 1.05, 2.05)])
    assert ev.match_events(ref, est) == {"a": (1, 0, 1)}


def _random_events(rng, n, label="a"):
    out = []
    for _ in range(n):
        on = float(rng.uniform(0, 3))
        out.append(Event(label, on, on + float(rng.uniform(0.1, 1.5))))
    return out


def test_matching_equals_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ref = _random_events(rng, int(rng.integers(0, 7)))
        est = _random_events(rng, int(rng.integers(0, 7)))
        adj = [[ev.matches(r, e) for e in est] for r in ref]
        tp = brute_force_matching(np.array(adj).reshape(len(ref), len(est)))
        assert ev.match_events(EventList("c", ref), EventList("c", est), labels=["a"]) == \
            {"a": (tp, len(est) - tp, len(ref) - tp)}


def test_greedy_would_fail_here():
    # est0 can match either ref, est1 only ref0; a greedy pass that gives ref0 to est0 loses one
    ref = [Event("a", 1.0, 2.0), Event("a", 1.3, 2.3)]
    est = [Event("a", 1.15, 2.15), Event("a", 0.85, 1.85)]
    assert ev.count_matches(ref, est) == 2


def test_swap_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(50):
        ref = EventList("c", _random_events(rng, 4))
        est = EventList("c", _random_events(rng, 5))
        tp, fp, fn = ev.match_events(ref, est, labels=["a"])["a"]
        assert ev.match_events(est, ref, labels=["a"])["a"] == (tp, fn, fp)


def test_extra_unmatched_est_adds_one_fp():
    rng = np.random.default_rng(2)
    ref = EventList("c", _random_events(rng, 3) + _random_events(rng, 2, "b"))
    est = EventList("c", _random_events(rng, 3) + _random_events(rng, 2, "b"))
    before = ev.match_events(ref, est, labels=["a", "b"])
    est2 = EventList("c", est.events + [Event("b", 9.0, 9.5)])
    after = ev.match_events(ref, est2, labels=["a", "b"])
    assert after["a"] == before["a"]
    assert after["b"] == (before["b"][0], before["b"][1] + 1, before["b"][2])


def test_score_hand_example():
    s = ev._class_score(2, 1, 1)
    assert s.precision == pytest.approx(2 / 3) and s.recall == pytest.approx(2 / 3)
    assert s.f1 == pytest.approx(2 / 3) and s.er == pytest.approx(2 / 3)


def test_score_identity_corpus():
    rng = np.random.default_rng(3)
    corpus = {f"c{i}": EventList(f"c{i}", _random_events(rng, 2) + _random_events(rng, 1, "b"))
              for i in range(5)}
    r = ev.score(corpus, corpus)
    assert r.macro_f1 == 1.0 and r.macro_er == 0.0


def test_macro_is_unweighted():
    ref = {"x": EventList("x", [Event("a", 0, 1), Event("a", 2, 3), Event("b", 0, 1), Event("b", 2, 3),
                                Event("b", 4, 5), Event("b", 6, 7), Event("b", 8, 9)])}
    est = {"x": EventList("x", [Event("a", 0, 1), Event("b", 0, 1), Event("b", 2, 3), Event("b", 4, 5)])}
    r = ev.score(ref, est)
    f_a, f_b = 2 * 1 * 0.5 / 1.5, 2 * 1 * 0.6 / 1.6
    assert r.per_class["a"].f1 == pytest.approx(f_a)
    assert r.macro_f1 == pytest.approx((f_a + f_b) / 2)


def test_conventions_for_empty_classes():
    ref = {"x": EventList("x", [Event("a", 0, 1)])}
    est = {"x": EventList("x", [Event("a", 0, 1)]), "y": EventList("y", [Event("b", 1, 2)])}
    r = ev.score(ref, est, labels=["a", "b", "c"])
    assert r.per_class["c"].f1 == 1.0 and r.per_class["c"].er == 0.0
    assert r.per_class["b"].f1 == 0.0 and r.per_class["b"].er == 1.0
    assert r.per_class["b"].fp == 1


def test_duplicating_corpus_keeps_macro():
    rng = np.random.default_rng(4)
    ref = {f"c{i}": EventList(f"c{i}", _random_events(rng, 3)) for i in range(6)}
    est = {f"c{i}": EventList(f"c{i}", _random_events(rng, 3)) for i in range(6)}
    once = ev.score(ref, est, labels=["a"])
    twice = ev.score({**ref, **{k + "_2": v for k, v in ref.items()}},
                     {**est, **{k + "_2": v for k, v in est.items()}}, labels=["a"])
    assert twice.macro_f1 == pytest.approx(once.macro_f1)


def test_report_tsv_and_table():
    r = ev.score({"x": EventList("x", [Event("a", 0, 1)])}, {"x": EventList("x", [Event("a", 0, 1)])})
    assert r.to_tsv().splitlines()[-1] == "macro\t\t\t\t\t\t1.000000\t0.000000"
    assert "100.0%" in r.table()

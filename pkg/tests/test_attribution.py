import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tlscope.attribution import (
    FamilyProfile, attribute_flow, attribute_window, attribute_windows, family_profiles, host_windows, majority,
    similarity_matrix,
)
from tlscope.errors import DimensionMismatch, EmptyWindow
from tlscope.features import FeatureDictionary, fit_space
from tlscope.learn import LinearModel, fit_model
from flows import flow, summary


def uniform_model(n_classes, d=3):
    labels = tuple(f"f{i:02d}" for i in range(n_classes))
    flows = [flow(tls=summary([1]), label=labels[0])]
    space = fit_space(["SS"], flows)
    return LinearModel(labels, np.zeros((n_classes, space.length)), np.zeros(n_classes), 0.0, "multinomial", space=space)


def test_uniform_eighteen_classes_pick_first():
    m = uniform_model(18)
    v = attribute_flow(m, flow(tls=summary([1])))
    assert v.family == "f00"
    assert all(p == pytest.approx(1 / 18, abs=1e-12) for p in v.probabilities.values())


def test_majority_vote():
    P = np.array([[0.6, 0.4], [0.7, 0.3], [0.1, 0.9]])
    assert majority(P)[0] == 0
    # one vote each: the larger probability mass wins
    assert majority(np.array([[0.51, 0.49], [0.1, 0.9]]))[0] == 1
    # exact tie in votes and mass: lowest index
    assert majority(np.array([[0.6, 0.4], [0.4, 0.6]]))[0] == 0


@settings(max_examples=200, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 9), st.integers(2, 5)), elements=st.floats(0.01, 1)))
def test_majority_winner_has_most_votes(P):
    P = P / P.sum(axis=1, keepdims=True)
    w, votes, mass = majority(P)
    assert votes[w] == votes.max()
    tied = np.flatnonzero(votes == votes.max())
    assert mass[w] == mass[tied].max()
    assert votes.sum() == len(P)


def trained():
    flows = []
    for i in range(30):
        fam = ["a", "b", "c"][i % 3]
        suites = {"a": [1, 2], "b": [3, 4], "c": [5, 6]}[fam]
        flows.append(flow(sa=f"10.0.0.{i % 5}", sp=1000 + i, start_us=i * 10_000_000, tls=summary(suites), label=fam))
    return flows, fit_model(flows, ["TLS"], 1e-3)


def test_single_flow_window_matches_flow():
    flows, m = trained()
    for f in flows[:6]:
        w = attribute_window(m, [f])
        v = attribute_flow(m, f)
        assert w.family == v.family
        assert w.probabilities == pytest.approx(v.probabilities, abs=1e-15)


def test_empty_window():
    _, m = trained()
    with pytest.raises(EmptyWindow):
        attribute_window(m, [])


def test_host_windows_tumbling():
    fs = [flow(sa="h", sp=i, start_us=int(t * 1_000_000)) for i, t in enumerate([100, 150, 399.9, 400, 700, 1500])]
    fs.append(flow(sa="g", sp=99, start_us=5_000_000))
    wins = host_windows(fs, 300)
    assert [(h, s, len(w)) for h, s, w in wins] == [("g", 5.0, 1), ("h", 100.0, 3), ("h", 400.0, 1), ("h", 700.0, 1), ("h", 1300.0, 1)]


def test_host_windows_sliding_covers_each_flow():
    fs = [flow(sa="h", sp=i, start_us=t * 1_000_000) for i, t in enumerate([0, 60, 130, 250, 320])]
    wins = host_windows(fs, 120, stride_secs=60)
    # windows never start before the host's first flow
    assert [sum(f in w for _, _, w in wins) for f in fs] == [1, 2, 2, 2, 2]
    with pytest.raises(ValueError):
        host_windows(fs, 0)


def test_attribute_windows_single_family_hosts():
    flows, m = trained()
    out = attribute_windows(m, flows, 1e9)
    assert len(out) == 5 and all(sum(v.votes.values()) == 6 for v in out)


def dict_of(n_suites):
    return FeatureDictionary.from_codes(range(1, n_suites + 1), [])


def test_similarity_diagonal_and_one_gap():
    a = FamilyProfile("a", np.array([0.0, 1.0, 2.0]), 1)
    b = FamilyProfile("b", np.array([1.0, 1.0, 2.0]), 1)
    S = similarity_matrix([a, b])
    assert S[0, 0] == 1.0 and S[1, 1] == 1.0
    assert abs(S[0, 1] - np.exp(-1)) < 1e-12
    assert abs(similarity_matrix([a, b], lam=2.0)[0, 1] - np.exp(-2)) < 1e-12
    with pytest.raises(DimensionMismatch):
        similarity_matrix([a, FamilyProfile("c", np.zeros(2), 1)])


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-3, 3)))
def test_similarity_properties(M):
    S = similarity_matrix([FamilyProfile(str(i), row, 1) for i, row in enumerate(M)])
    assert (np.diag(S) == 1.0).all()
    assert (S == S.T).all()
    assert ((S > 0) | (S == 0)).all() and (S <= 1).all()


def test_family_profiles_means():
    d = dict_of(2)
    flows = [flow(tls=summary([1], bits=1024), label="x"), flow(tls=summary([2], bits=3072), label="x"),
             flow(tls=summary([2]), label="y"), flow(tls=None, label="y"), flow(tls=summary([1]))]
    prof = family_profiles(flows, d)
    assert [p.family for p in prof] == ["x", "y"]
    assert prof[0].mean_vector.tolist() == [0.5, 0.5, 2.0]
    assert prof[1].flow_count == 1

"""Assignment-module tests against exhaustive enumeration oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pooldispatch.errors import ConfigError
from pooldispatch.matching import (
    LOG_FLOOR,
    SENTINEL,
    AssignmentAction,
    NoiseSpec,
    ProbabilityMatrix,
    QMatrix,
    UtilityMatrix,
    action_log_probability,
    action_space_lower_bound,
    count_action_space,
    inject_exploration,
    perturb_probabilities,
    probabilities_from_utilities,
    solve_stage1,
    solve_stage2,
    stage1_value,
)

from oracles import brute_stage1_value, brute_stage2_value, enumerate_action_count


def random_q(rng, n=None, m=None) -> QMatrix:
    n = n or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, 4))
    values = rng.normal(0.0, 3.0, (n, m))
    available = rng.random(n) < 0.8
    return QMatrix.build(values, available)


def random_p(rng, n=None, m=None) -> ProbabilityMatrix:
    n = n or int(rng.integers(1, 5))
    m = m if m is not None else int(rng.integers(0, 4))
    available = rng.random(n) < 0.8
    raw = rng.random((n, m + 1)) + 1e-3
    probs = raw / raw.sum(axis=1, keepdims=True)
    probs[~available] = 0.0
    probs[~available, -1] = 1.0
    return ProbabilityMatrix(probs, available)


# ---------------------------------------------------------------------------
# action-space counting


def test_count_examples():
    assert count_action_space(5, 0) == 1
    assert count_action_space(3, 2) == 13
    big = count_action_space(1000, 10)
    assert big >= 992**10
    assert action_space_lower_bound(1000, 10) == 992**10
    assert action_space_lower_bound(0, 0) == 1


def test_count_matches_enumeration():
    for n in range(0, 9):
        for m in range(0, min(n, 4) + 1):
            expected = enumerate_action_count(n, m)
            assert count_action_space(n, m) == expected
            assert action_space_lower_bound(n, m) <= expected


def test_count_rejects_more_workers_than_orders():
    with pytest.raises(ConfigError):
        count_action_space(2, 3)
    with pytest.raises(ConfigError):
        action_space_lower_bound(2, 3)


# ---------------------------------------------------------------------------
# AssignmentAction structure


def test_action_make_canonicalizes_and_validates():
    a = AssignmentAction.make([(2, 1), (0, 3)], [1])
    assert a.pairs == ((0, 3), (2, 1))
    assert a.rejecting == (1,)
    assert a.order_of(2) == 1 and a.order_of(1) is None
    with pytest.raises(ValueError):
        AssignmentAction.make([(0, 1), (0, 2)], [])
    with pytest.raises(ValueError):
        AssignmentAction.make([(0, 1), (1, 1)], [])
    with pytest.raises(ValueError):
        AssignmentAction.make([(0, 1)], [0])


# ---------------------------------------------------------------------------
# stage 1


def test_stage1_spec_examples():
    q = QMatrix.build(np.array([[5.0, 1.0], [2.0, 4.0]]), np.array([True, True]))
    action = solve_stage1(q)
    assert action.pairs == ((0, 0), (1, 1))
    assert stage1_value(q, action) == pytest.approx(9.0)

    masked = QMatrix.build(np.array([[7.0, 7.0]]), np.array([False]))
    assert solve_stage1(masked).pairs == ()
    assert np.all(masked.values == SENTINEL)

    negative = QMatrix.build(np.array([[-3.0]]), np.array([True]))
    action = solve_stage1(negative)
    assert action.pairs == () and action.rejecting == (0,)


def test_stage1_matches_bruteforce():
    rng = np.random.default_rng(3)
    for _ in range(300):
        q = random_q(rng)
        action = solve_stage1(q)
        got = stage1_value(q, action)
        want = brute_stage1_value(q.values, q.available)
        assert got == pytest.approx(want, abs=1e-8)
        assert all(q.values[w, o] > 0 for w, o in action.pairs)


def test_stage1_relabeling_equivariance():
    rng = np.random.default_rng(5)
    for _ in range(50):
        q = random_q(rng, n=4, m=3)
        base = solve_stage1(q)
        prow = rng.permutation(4)
        pcol = rng.permutation(3)
        permuted = QMatrix(q.values[prow][:, pcol], q.available[prow])
        got = solve_stage1(permuted)
        inv_row = np.argsort(prow)
        inv_col = np.argsort(pcol)
        expected = AssignmentAction.make(
            [(inv_row[w], inv_col[o]) for w, o in base.pairs],
            [inv_row[w] for w in base.rejecting],
        )
        assert got == expected


# ---------------------------------------------------------------------------
# stage 2


def test_stage2_spec_examples():
    p = ProbabilityMatrix(np.array([[0.9, 0.1]]), np.array([True]))
    assert solve_stage2(p).pairs == ((0, 0),)

    p = ProbabilityMatrix(
        np.array([[0.8, 0.2], [0.6, 0.4]]), np.array([True, True])
    )
    action = solve_stage2(p)
    assert action.pairs == ((0, 0),) and action.rejecting == (1,)

    p = ProbabilityMatrix(
        np.array([[0.0, 1.0], [0.0, 1.0]]), np.array([False, False])
    )
    action = solve_stage2(p)
    assert action.pairs == () and action.rejecting == ()


def test_stage2_matches_bruteforce():
    rng = np.random.default_rng(4)
    for _ in range(300):
        p = random_p(rng)
        action = solve_stage2(p)
        got = action_log_probability(p, action)
        lp = np.log(np.maximum(p.probs, LOG_FLOOR))
        want = brute_stage2_value(lp, p.available)
        assert got == pytest.approx(want, abs=1e-8)


def test_stage2_relabeling_equivariance():
    rng = np.random.default_rng(6)
    for _ in range(50):
        p = random_p(rng, n=4, m=3)
        base = solve_stage2(p)
        prow = rng.permutation(4)
        pcol = np.concatenate([rng.permutation(3), [3]])  # reject column stays last
        permuted = ProbabilityMatrix(p.probs[prow][:, pcol], p.available[prow])
        got = solve_stage2(permuted)
        inv_row = np.argsort(prow)
        inv_col = np.argsort(pcol[:3])
        expected = AssignmentAction.make(
            [(inv_row[w], inv_col[o]) for w, o in base.pairs],
            [inv_row[w] for w in base.rejecting],
        )
        assert got == expected


def test_solvers_are_deterministic():
    rng = np.random.default_rng(8)
    q = random_q(rng, n=4, m=3)
    p = random_p(rng, n=4, m=3)
    assert solve_stage1(q) == solve_stage1(QMatrix(q.values.copy(), q.available.copy()))
    assert solve_stage2(p) == solve_stage2(ProbabilityMatrix(p.probs.copy(), p.available.copy()))


# ---------------------------------------------------------------------------
# matrices


def test_probability_matrix_validation():
    with pytest.raises(ValueError):
        ProbabilityMatrix(np.array([[0.5, 0.4]]), np.array([True]))
    with pytest.raises(ValueError):
        ProbabilityMatrix(np.array([[0.5, 0.5]]), np.array([False]))


def test_qmatrix_validation():
    with pytest.raises(ValueError):
        QMatrix(np.array([[1.0, np.nan]]), np.array([True]))
    with pytest.raises(ValueError):
        QMatrix(np.array([[1.0, 2.0]]), np.array([False]))


def test_probabilities_from_utilities():
    util = UtilityMatrix(np.array([[0.0], [2.0]]), np.array([0.0, 2.0]))
    p = probabilities_from_utilities(util, np.array([True, False]))
    assert p.probs[0] == pytest.approx([0.5, 0.5])
    assert p.probs[1] == pytest.approx([0.0, 1.0])
    assert solve_stage2(p).pairs in (((0, 0),), ())


# ---------------------------------------------------------------------------
# exploration


def test_inject_exploration_counts():
    rng = np.random.default_rng(9)
    q = QMatrix.build(np.zeros((3, 2)), np.array([True, True, False]))
    same = inject_exploration(q, 0.0, rng=rng)
    assert np.array_equal(same.values, q.values)

    full = inject_exploration(q, 1.0, big_q=1e6, rng=rng)
    assert np.all(full.values[full.available] == 1e6)
    assert np.all(full.values[2] == SENTINEL)

    half = inject_exploration(q, 0.5, big_q=1e6, rng=rng)
    assert int((half.values == 1e6).sum()) == 2  # ceil(0.5 * 4)

    with pytest.raises(ConfigError):
        inject_exploration(q, -0.1, rng=rng)
    with pytest.raises(ConfigError):
        inject_exploration(q, 1.5, rng=rng)


def test_inject_exploration_mean_fraction():
    rng = np.random.default_rng(10)
    q = QMatrix.build(np.zeros((4, 4)), np.ones(4, dtype=bool))
    eps = 0.25
    counts = [
        int((inject_exploration(q, eps, rng=rng).values == 1e6).sum())
        for _ in range(200)
    ]
    assert all(c == math.ceil(eps * 16) for c in counts)


def test_perturb_zero_magnitude_is_identity():
    rng = np.random.default_rng(11)
    p = random_p(rng, n=3, m=2)
    for kind in ("gaussian", "uniform", "bsc"):
        out = perturb_probabilities(p, NoiseSpec(kind, 0.0), rng)
        assert np.array_equal(out.probs, p.probs)


def test_perturb_bsc_full_flip_is_uniform():
    rng = np.random.default_rng(12)
    p = ProbabilityMatrix(np.array([[0.9, 0.1]]), np.array([True]))
    out = perturb_probabilities(p, NoiseSpec("bsc", 1.0), rng)
    assert out.probs[0] == pytest.approx([0.5, 0.5])


def test_perturb_leaves_unavailable_rows():
    rng = np.random.default_rng(13)
    p = random_p(rng, n=4, m=3)
    out = perturb_probabilities(p, NoiseSpec("gaussian", 2.0), rng)
    unavail = ~p.available
    assert np.array_equal(out.probs[unavail], p.probs[unavail])


def test_noise_spec_validation():
    with pytest.raises(ConfigError):
        NoiseSpec("gaussian", -1.0)
    with pytest.raises(ConfigError):
        NoiseSpec("bsc", 1.5)
    with pytest.raises(ConfigError):
        NoiseSpec("salt-pepper", 0.1)
    assert NoiseSpec("bsc", 0.2).scaled(0.4).magnitude == 0.4


@settings(max_examples=80, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**31 - 1),
    st.sampled_from(["gaussian", "uniform", "bsc"]),
    st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
)
def test_perturb_rows_always_renormalized(seed, kind, magnitude):
    rng = np.random.default_rng(seed)
    p = random_p(rng)
    out = perturb_probabilities(p, NoiseSpec(kind, magnitude), rng)
    assert np.allclose(out.probs.sum(axis=1), 1.0, atol=1e-9)
    # a second call with a fresh identical stream reproduces the draw
    rng2 = np.random.default_rng(seed)
    p2 = random_p(rng2)
    out2 = perturb_probabilities(p2, NoiseSpec(kind, magnitude), rng2)
    assert np.array_equal(out.probs, out2.probs)

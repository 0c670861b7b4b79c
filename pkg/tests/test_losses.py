import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamxd import autodiff as ad
from siamxd.autodiff import ContractError, Tensor
from siamxd.losses import (
    DEFAULT_ALPHA,
    BatchSplit,
    LossBreakdown,
    classification_loss,
    detaching_loss,
    overall_loss,
    pairing_loss,
    set_distance,
)
from siamxd.model import ConfigError


def oracle_set_distance(A, B):
    total = 0.0
    for a in A:
        for b in B:
            total += math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    return total / (len(A) * len(B))


def split_of(fs_pos, fs_neg, ft_pos, ft_neg):
    return BatchSplit(*(Tensor(np.array(g, dtype=float)) for g in (fs_pos, fs_neg, ft_pos, ft_neg)))


# --- classification loss ------------------------------------------------------------

def test_bce_at_half_is_ln2():
    assert classification_loss(Tensor([[0.5]]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_perfect_prediction_is_near_zero():
    assert classification_loss(Tensor([[1 - 1e-12]]), [1]).item() == pytest.approx(0.0, abs=1e-11)


def test_bce_three_sample_batch():
    expected = -(math.log(0.9) + math.log(1 - 0.2) + math.log(0.6)) / 3
    assert expected == pytest.approx(0.279777, abs=1e-6)
    got = classification_loss(Tensor([[0.9], [0.2], [0.6]]), [1, 0, 1]).item()
    assert got == pytest.approx(expected, abs=1e-15)


def test_bce_clamps_saturated_probabilities():
    v = classification_loss(Tensor([[0.0], [1.0]]), [1, 0]).item()
    assert v == pytest.approx(-math.log(1e-12), rel=1e-9)


def test_bce_contract_errors():
    with pytest.raises(ContractError):
        classification_loss(Tensor(np.zeros((0, 1))), [])
    with pytest.raises(ContractError):
        classification_loss(Tensor([[0.4]]), [2])


# --- set distance ---------------------------------------------------------------------

def test_set_distance_examples():
    assert set_distance(Tensor([[0, 0]]), Tensor([[3, 4]])).item() == 5.0
    assert set_distance(Tensor([[1.5, -2]]), Tensor([[1.5, -2]])).item() == 0.0
    A, B = [[0, 0], [1, 0]], [[0, 1]]
    expected = oracle_set_distance(A, B)
    assert expected == pytest.approx(1.207107, abs=1e-6)
    assert set_distance(Tensor(A), Tensor(B)).item() == pytest.approx(expected, abs=1e-15)


def test_set_distance_empty_group_is_an_error():
    with pytest.raises(ContractError):
        set_distance(Tensor(np.zeros((0, 2))), Tensor([[1.0, 2.0]]))


def test_squared_variant(rng):
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    expected = np.mean([[np.sum((a - b) ** 2) for b in B] for a in A])
    assert set_distance(Tensor(A), Tensor(B), squared=True).item() == pytest.approx(expected, rel=1e-12)


groups = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**32 - 1))


@settings(max_examples=50, deadline=None)
@given(groups)
def test_set_distance_symmetric_and_translation_invariant(g):
    m, n, d, seed = g
    r = np.random.default_rng(seed)
    A, B, c = r.normal(size=(m, d)), r.normal(size=(n, d)), r.normal(scale=10, size=d)
    ab = set_distance(Tensor(A), Tensor(B)).item()
    assert ab == set_distance(Tensor(B), Tensor(A)).item()
    assert set_distance(Tensor(A + c), Tensor(B + c)).item() == pytest.approx(ab, abs=1e-10)


# --- pairing / detaching ----------------------------------------------------------------------

def test_pairing_identical_singletons_is_zero():
    assert pairing_loss(split_of([[1, 2]], [[3, 4]], [[1, 2]], [[3, 4]])).item() == 0.0


def test_pairing_five_plus_one():
    assert pairing_loss(split_of([[0, 0]], [[0, 0]], [[3, 4]], [[0, 1]])).item() == 6.0


def test_detaching_all_same_point_is_zero():
    p = [[0.5, 0.5]]
    assert detaching_loss(split_of(p, p, p, p)).item() == 0.0


def test_detaching_five_plus_one():
    # fs_pos vs ft_neg = 5, fs_neg vs ft_pos = 1
    assert detaching_loss(split_of([[0, 0]], [[0, 1]], [[0, 0]], [[3, 4]])).item() == 6.0


def test_missing_group_names_it():
    s = split_of([[0, 0]], [[0, 1]], np.zeros((0, 2)), [[3, 4]])
    with pytest.raises(ContractError, match="ft_pos"):
        pairing_loss(s)
    with pytest.raises(ContractError, match="ft_pos"):
        detaching_loss(s)


def test_random_groups_match_double_loop(rng):
    gs = [rng.normal(size=(k, 4)) for k in (3, 2, 3, 2)]
    s = split_of(*gs)
    cp = oracle_set_distance(gs[0], gs[2]) + oracle_set_distance(gs[1], gs[3])
    cd = oracle_set_distance(gs[0], gs[3]) + oracle_set_distance(gs[1], gs[2])
    assert abs(pairing_loss(s).item() - cp) < 1e-12
    assert abs(detaching_loss(s).item() - cd) < 1e-12


def test_margin_caps_each_detaching_term():
    s = split_of([[0, 0]], [[0, 1]], [[0, 0]], [[3, 4]])   # terms 5 and 1
    assert detaching_loss(s, margin=2.0).item() == 3.0


@settings(max_examples=50, deadline=None)
@given(groups)
def test_label_flip_exchanges_pairing_and_detaching(g):
    m, n, d, seed = g
    r = np.random.default_rng(seed)
    s = split_of(r.normal(size=(m, d)), r.normal(size=(n, d)), r.normal(size=(n, d)), r.normal(size=(m, d)))
    assert pairing_loss(s.flipped_target()).item() == detaching_loss(s).item()
    assert detaching_loss(s.flipped_target()).item() == pairing_loss(s).item()


def test_split_from_embeddings_routes_rows(rng):
    fs, ft = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(3, 2)))
    s = BatchSplit.from_embeddings(fs, ft, [1, 0, 0, 1], [0, 1, 0])
    npt.assert_array_equal(s.fs_pos.data, fs.data[[0, 3]])
    npt.assert_array_equal(s.fs_neg.data, fs.data[[1, 2]])
    npt.assert_array_equal(s.ft_pos.data, ft.data[[1]])
    npt.assert_array_equal(s.ft_neg.data, ft.data[[0, 2]])


# --- overall objective ---------------------------------------------------------------------

def test_overall_arithmetic():
    assert overall_loss(0.7, 0.4, 0.9, 0.25) == pytest.approx(0.575, abs=1e-15)
    assert overall_loss(0.7, 0.4, 0.9, 0.0) == 0.7
    assert DEFAULT_ALPHA == 0.25


def test_overall_rejects_negative_alpha():
    with pytest.raises(ConfigError):
        overall_loss(1.0, 1.0, 1.0, -0.1)


def test_overall_may_be_negative():
    assert overall_loss(0.1, 0.0, 10.0, 0.25) < 0


def test_breakdown_recomputes_exactly():
    b = LossBreakdown.from_parts(0.31, 1.7, 2.9, 0.25)
    assert b.l_overall == b.l_c + b.alpha * (b.l_cp - b.l_cd)


@pytest.mark.parametrize("alpha", [0.25, 0.5, 1.3])
def test_detaching_weight_is_minus_alpha(alpha):
    l_c, l_cp, l_cd = (Tensor(v, requires_grad=True) for v in (0.6, 1.2, 2.4))
    ad.backward(overall_loss(l_c, l_cp, l_cd, alpha))
    assert l_cd.grad == -alpha
    assert l_cp.grad == alpha
    assert l_c.grad == 1.0


def test_overall_gradient_wrt_embeddings(rng):
    embs = [Tensor(rng.normal(size=(k, 3)), requires_grad=True) for k in (2, 3, 2, 3)]
    probs = Tensor(rng.uniform(0.1, 0.9, size=(4, 1)), requires_grad=True)
    y = [1, 0, 1, 0]

    def f():
        s = BatchSplit(*embs)
        return overall_loss(classification_loss(probs, y), pairing_loss(s), detaching_loss(s), 0.25)

    assert ad.grad_check(f, embs + [probs]) < 1e-4

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import assert_grad_close, central_difference
from mar.agents import (
    AgentBank,
    al_loss,
    init_agents,
    load_agents,
    ral_loss,
    renormalize_agents,
    rj_loss,
    save_agents,
    true_class_logits,
)
from mar.errors import DegenerateVector, LabelOutOfRange, MalformedFile
from mar.geometry import normalize_rows
from mar.softlabel import agreement, soft_multilabels


def _unit(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)))


# --- al_loss -------------------------------------------------------------

def test_al_single_agent_is_zero(rng):
    F = _unit(rng, 4, 3)
    loss, GF, GA = al_loss(F, [0, 0, 0, 0], np.array([[1.0, 0.0, 0.0]]), scale=3.0)
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(GF, 0) and np.allclose(GA, 0)


def test_al_tied_logits_give_ln2():
    A = np.array([[1.0, 0.0], [0.0, 1.0]])
    F = normalize_rows(np.array([[1.0, 1.0]]))
    loss, _, _ = al_loss(F, [1], A, scale=5.0)
    assert loss == pytest.approx(math.log(2), abs=1e-14)


def test_al_label_out_of_range(rng):
    with pytest.raises(LabelOutOfRange):
        al_loss(_unit(rng, 2, 3), [0, 3], _unit(rng, 3, 3))
    with pytest.raises(LabelOutOfRange):
        al_loss(_unit(rng, 2, 3), [-1, 0], _unit(rng, 3, 3))


@pytest.mark.parametrize("scale", [1.0, 7.5])
def test_al_gradients(rng, scale):
    F = rng.standard_normal((5, 4))
    A = rng.standard_normal((3, 4))
    labels = np.array([0, 2, 1, 1, 0])
    _, GF, GA = al_loss(F, labels, A, scale)
    nF, nA = central_difference(lambda: al_loss(F, labels, A, scale)[0], [F, A])
    assert_grad_close(GF, nF)
    assert_grad_close(GA, nA)


def test_al_matches_soft_multilabel_entry(rng):
    F = _unit(rng, 6, 5)
    A = _unit(rng, 4, 5)
    labels = rng.integers(0, 4, size=6)
    Y = soft_multilabels(F, A, 9.0)
    expected = np.mean(-np.log(Y[np.arange(6), labels]))
    assert al_loss(F, labels, A, 9.0)[0] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_al_nonnegative(seed):
    r = np.random.default_rng(seed)
    loss, _, _ = al_loss(_unit(r, 3, 4), r.integers(0, 5, 3), _unit(r, 5, 4), scale=float(r.uniform(0.1, 20)))
    assert loss >= 0.0


def test_true_class_logits():
    A = np.array([[1.0, 0.0], [0.0, 2.0]])
    F = np.array([[3.0, 1.0], [1.0, 1.0]])
    assert np.allclose(true_class_logits(F, [0, 1], A), [3.0, 2.0])


def test_one_hot_agreement_is_identity_indicator():
    eye = np.eye(4)
    for i in range(4):
        for j in range(4):
            assert agreement(eye[i], eye[j]) == (1.0 if i == j else 0.0)


# --- rj_loss -------------------------------------------------------------

def test_rj_hand_example():
    a = np.array([[1.0, 0.0]])
    # |a - x|^2 = 0.5
    x = np.array([[1.0 - math.sqrt(0.5), 0.0]])
    loss, _, _, _ = rj_loss(a, x, a.copy(), [0], m=1.0)
    assert loss == pytest.approx(0.5, abs=1e-14)


def test_rj_no_mined_targets_leaves_center_terms(rng):
    A = _unit(rng, 3, 4)
    far = np.array([[10.0, 10.0, 10.0, 10.0]])
    labels = np.array([0, 1, 2])
    loss, GA, GX, GZ = rj_loss(A, far, A.copy(), labels, m=1.0)
    assert loss == 0.0
    assert np.all(GX == 0) and np.all(GA == 0) and np.all(GZ == 0)
    Z = A + 0.1
    loss, _, _, _ = rj_loss(A, far, Z, labels, m=1.0)
    assert loss == pytest.approx(0.1 ** 2 * 4)


def test_rj_boundary_not_mined():
    a = np.array([[0.0, 0.0]])
    x = np.array([[1.0, 0.0]])  # squared distance exactly m
    loss, GA, GX, _ = rj_loss(a, x, np.zeros((0, 2)), np.zeros(0, dtype=int), m=1.0)
    assert loss == 0.0
    assert np.all(GA == 0) and np.all(GX == 0)


def test_rj_empty_everything():
    loss, GA, GX, GZ = rj_loss(np.eye(2), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=int))
    assert loss == 0.0 and GA.shape == (2, 2) and GX.shape == (0, 2) and GZ.shape == (0, 2)


def test_rj_gradients(rng):
    A = 0.5 * rng.standard_normal((3, 4))
    X = 0.5 * rng.standard_normal((5, 4))
    Z = 0.5 * rng.standard_normal((4, 4))
    labels = np.array([0, 1, 1, 2])
    d = np.sum((A[:, None] - X[None]) ** 2, axis=2)
    assert 0 < (d < 1.0).sum() < d.size
    assert np.min(np.abs(d - 1.0)) > 1e-3  # keep FD away from the hinge kink
    _, GA, GX, GZ = rj_loss(A, X, Z, labels)
    nA, nX, nZ = central_difference(lambda: rj_loss(A, X, Z, labels)[0], [A, X, Z])
    assert_grad_close(GA, nA)
    assert_grad_close(GX, nX)
    assert_grad_close(GZ, nZ)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 3.0))
def test_rj_nonnegative(seed, m):
    r = np.random.default_rng(seed)
    loss = rj_loss(_unit(r, 3, 3), _unit(r, 6, 3), _unit(r, 4, 3), r.integers(0, 3, 4), m)[0]
    assert loss >= 0.0


# --- ral_loss ------------------------------------------------------------

def test_ral_arithmetic():
    assert ral_loss(1.0, 2.0, 0.0) == 1.0
    assert ral_loss(1.0, 2.0, 0.2) == pytest.approx(1.4)


def test_ral_gradient_linearity(rng):
    A = _unit(rng, 3, 4)
    X = _unit(rng, 5, 4)
    Z = _unit(rng, 4, 4)
    labels = np.array([0, 1, 2, 2])
    beta = 0.2
    _, _, GA_al = al_loss(Z, labels, A, 2.0)
    _, GA_rj, _, _ = rj_loss(A, X, Z, labels)
    combined = lambda: ral_loss(al_loss(Z, labels, A, 2.0)[0], rj_loss(A, X, Z, labels)[0], beta)
    (nA,) = central_difference(combined, [A])
    assert_grad_close(GA_al + beta * GA_rj, nA)


# --- renormalization and storage -----------------------------------------

def test_renormalize_examples(rng):
    bank = AgentBank(np.array([[3.0, 4.0]]))
    assert np.allclose(renormalize_agents(bank).agents, [[0.6, 0.8]], atol=1e-15)
    unit = AgentBank(_unit(rng, 5, 3))
    out = renormalize_agents(unit)
    assert out.constrained
    assert np.max(np.abs(out.agents - unit.agents)) <= 1e-12
    with pytest.raises(DegenerateVector):
        renormalize_agents(AgentBank(np.zeros((1, 3))))


def test_init_agents_unit(rng):
    bank = init_agents(7, 5, rng)
    assert bank.agents.shape == (7, 5) and not bank.constrained
    assert np.allclose(np.linalg.norm(bank.agents, axis=1), 1.0)


def test_agent_checkpoint_round_trip(tmp_path, rng):
    bank = AgentBank(rng.standard_normal((6, 3)))
    path = tmp_path / "agents.bin"
    save_agents(str(path), bank)
    back = load_agents(str(path))
    assert np.array_equal(back.agents, bank.agents)
    raw = path.read_bytes()
    assert raw[:8] == b"MARAGT01" and len(raw) == 16 + 8 * 18
    path.write_bytes(raw[:-3])
    with pytest.raises(MalformedFile):
        load_agents(str(path))
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(MalformedFile):
        load_agents(str(path))

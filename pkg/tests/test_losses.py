import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sodnet import tensor as T
from sodnet.losses import LOG_EPS, bce_loss, iou_loss, joint_loss, multilevel_loss
from sodnet.tensor import DimensionError, Tensor


def blob(n=32):
    G = np.zeros((n, n))
    G[n // 4 : 3 * n // 4, n // 3 : 2 * n // 3] = 1.0
    return G


def bce_oracle(P, G):
    terms = []
    for p, g in zip(P.ravel().tolist(), G.ravel().tolist()):
        a = math.log(max(p, LOG_EPS))
        b = math.log(max(1 - p, LOG_EPS))
        terms.append(-(g * a + (1 - g) * b))
    return math.fsum(terms) / len(terms)


def iou_oracle(P, G, smooth=1.0):
    inter = math.fsum(p * g for p, g in zip(P.ravel().tolist(), G.ravel().tolist()))
    union = math.fsum(p + g - p * g for p, g in zip(P.ravel().tolist(), G.ravel().tolist()))
    return 1 - (inter + smooth) / (union + smooth)


def test_bce_zero_at_target():
    G = blob()
    assert bce_loss(G, G).item() == pytest.approx(0, abs=1e-6)


def test_bce_half_is_ln2():
    G = blob(8)
    assert bce_loss(np.full((8, 8), 0.5), G).item() == pytest.approx(math.log(2), rel=1e-14)


def test_bce_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    P = rng.random((3, 3))
    G = (rng.random((3, 3)) > 0.5).astype(float)
    assert bce_loss(P, G).item() == pytest.approx(bce_oracle(P, G), rel=1e-13)


def test_bce_sum_reduction_and_bad_reduction():
    rng = np.random.default_rng(1)
    P, G = rng.random((4, 4)), (rng.random((4, 4)) > 0.5).astype(float)
    assert bce_loss(P, G, "sum").item() == pytest.approx(16 * bce_loss(P, G).item(), rel=1e-13)
    with pytest.raises(ValueError):
        bce_loss(P, G, "max")


def test_iou_examples():
    G = blob()
    assert 0 <= iou_loss(G, G).item() <= 1e-3
    G2 = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert iou_loss(np.ones((2, 2)), G2).item() == pytest.approx(0.4, abs=1e-15)
    assert iou_loss(np.zeros((3, 3)), np.zeros((3, 3))).item() == 0


def test_iou_matches_oracle():
    rng = np.random.default_rng(2)
    P = rng.random((5, 7))
    G = (rng.random((5, 7)) > 0.4).astype(float)
    assert iou_loss(P, G).item() == pytest.approx(iou_oracle(P, G), rel=1e-13)


def test_iou_batches_average_per_image():
    rng = np.random.default_rng(3)
    P = rng.random((3, 4, 4))
    G = (rng.random((3, 4, 4)) > 0.5).astype(float)
    ref = np.mean([iou_oracle(P[i], G[i]) for i in range(3)])
    assert iou_loss(P, G).item() == pytest.approx(ref, rel=1e-13)


def test_joint_is_exact_sum():
    rng = np.random.default_rng(4)
    P = rng.random((6, 6))
    G = (rng.random((6, 6)) > 0.5).astype(float)
    assert joint_loss(P, G).item() == bce_loss(P, G).item() + iou_loss(P, G).item()
    G = blob()
    assert joint_loss(G, G).item() <= 1e-3


def test_multilevel_examples():
    rng = np.random.default_rng(5)
    m = Tensor(rng.normal(size=(2, 4, 4)))
    G = (rng.random((2, 4, 4)) > 0.5).astype(float)
    single = joint_loss(T.sigmoid(m), G).item()
    assert multilevel_loss([m], G).item() == single
    assert multilevel_loss([m, m, m], G).item() == pytest.approx(3 * single, rel=1e-15)
    with pytest.raises(ValueError):
        multilevel_loss([], G)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        iou_loss(np.zeros((2, 2)), np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    P = Tensor(rng.uniform(0.05, 0.95, size=(2, 4, 4)), requires_grad=True)
    G = Tensor((rng.random((2, 4, 4)) > 0.5).astype(float))
    for fn in (bce_loss, iou_loss, joint_loss):
        assert T.grad_check(lambda p: fn(p, G), P) <= 1e-4
    logits = [Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True) for _ in range(3)]
    assert T.grad_check_many(lambda: multilevel_loss(logits, G), logits) <= 1e-4


def test_joint_gradient_is_sum_of_parts():
    rng = np.random.default_rng(6)
    P = Tensor(rng.uniform(0.1, 0.9, size=(4, 4)), requires_grad=True)
    G = (rng.random((4, 4)) > 0.5).astype(float)
    grads = []
    for fn in (joint_loss, bce_loss, iou_loss):
        P.grad = None
        with T.Tape() as tape:
            tape.backward(fn(P, G))
        grads.append(P.grad.copy())
    np.testing.assert_allclose(grads[0], grads[1] + grads[2], atol=1e-15)


probs = hnp.arrays(np.float64, (5, 5), elements=st.floats(0, 1, allow_nan=False))
masks = hnp.arrays(np.bool_, (5, 5)).map(lambda a: a.astype(np.float64))


@settings(max_examples=50, deadline=None)
@given(probs, masks)
def test_loss_ranges(P, G):
    assert bce_loss(P, G).item() >= 0
    assert 0 <= iou_loss(P, G).item() < 1


@settings(max_examples=30, deadline=None)
@given(probs, masks, st.permutations(list(range(25))))
def test_iou_permutation_invariant(P, G, perm):
    perm = np.array(perm)
    Pp = P.ravel()[perm].reshape(5, 5)
    Gp = G.ravel()[perm].reshape(5, 5)
    assert iou_loss(Pp, Gp).item() == pytest.approx(iou_loss(P, G).item(), abs=1e-14)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import check_grads
from tdsnet import metric as M
from tdsnet.tensor import Tensor, precision

rng = np.random.default_rng(0)


def np_cos(u, v):
    return float(np.clip(u @ v / (np.linalg.norm(u) * np.linalg.norm(v) + 1e-8), -1, 1))


def test_cosine_basic_cases():
    with precision("float64"):
        assert float(M.cosine(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data) == 0.0
        assert float(M.cosine(Tensor([2.0, 2.0]), Tensor([1.0, 1.0])).data) == pytest.approx(1.0)
        assert float(M.cosine(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).data) == 0.0


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (2, 5), elements=st.floats(-1e3, 1e3)))
def test_cosine_bounded_and_symmetric(x):
    with precision("float64"):
        a = float(M.cosine(Tensor(x[0]), Tensor(x[1])).data)
        b = float(M.cosine(Tensor(x[1]), Tensor(x[0])).data)
    assert -1.0 <= a <= 1.0 and a == pytest.approx(b)


def test_cosine_matrix_matches_pairs():
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    with precision("float64"):
        out = M.cosine_matrix(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, [[np_cos(x, y) for y in b] for x in a], atol=1e-12)


def test_prototypes_are_class_means():
    s = rng.normal(size=(6, 2, 2, 3))
    labels = np.array([1, 0, 1, 0, 2, 2])
    with precision("float64"):
        p = M.prototypes(Tensor(s), labels, 3).data
    for n in range(3):
        np.testing.assert_allclose(p[n], s[labels == n].mean(0), atol=1e-12)
    with pytest.raises(ValueError):
        M.prototypes(Tensor(s), labels, 4)


def test_global_similarity_identical_query():
    p = rng.normal(size=(3, 2, 2, 4))
    with precision("float64"):
        s = M.global_similarity(Tensor(p), Tensor(p[1:2])).data
    assert s[0, 1] == pytest.approx(1.0) and s.shape == (1, 3)


def test_similarity_matrix_matches_pairwise_oracle():
    q, p = rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(3, 2, 2, 3))
    with precision("float64"):
        m = M.build_similarity_matrix(M.descriptors(Tensor(q)), M.support_descriptors(Tensor(p))).data
    qd, sd = q.reshape(2, 4, 3), p.reshape(12, 3)
    for b in range(2):
        for i in range(4):
            for j in range(12):
                assert abs(m[b, i, j] - np_cos(qd[b, i], sd[j])) <= 1e-6


def test_hard_attention_hand_case():
    with precision("float64"):
        a = M.task_attention(Tensor(np.array([[0.9, 0.5, 0.1]])), k=2, mode="hard").data
    np.testing.assert_array_equal(a, [[1.0, 0.0, 0.0]])


def test_hard_attention_without_survivor_falls_back_to_uniform():
    with precision("float64"):
        a = M.task_attention(Tensor(np.array([[0.4, 0.4, 0.4, 0.4]])), k=2, mode="hard").data
    np.testing.assert_allclose(a, 0.25)


def test_smooth_attention_limit_is_hard():
    x = np.array([[0.9, 0.5, 0.1, 0.3]])
    with precision("float64"):
        soft = M.task_attention(Tensor(x), k=2, t=1e4, mode="smooth").data
        hard = M.task_attention(Tensor(x), k=2, mode="hard").data
    # at large t the threshold entry keeps weight 1/2 while hard drops it
    np.testing.assert_allclose(soft, [[0.9 / (0.9 + 0.25), 0.25 / (0.9 + 0.25), 0, 0]], atol=1e-6)
    np.testing.assert_array_equal(hard, [[1, 0, 0, 0]])


def test_per_class_normalisation_rows_sum_per_block():
    x = rng.uniform(0, 1, size=(2, 3, 8))
    with precision("float64"):
        a = M.task_attention(Tensor(x), k=3, mode="smooth", n_classes=2, normalize="class").data
    np.testing.assert_allclose(a.reshape(2, 3, 2, 4).sum(-1), 1.0, atol=1e-12)


def test_uniform_mode_weights():
    x = Tensor(np.zeros((1, 2, 6)))
    assert np.allclose(M.task_attention(x, mode="uniform").data, 1 / 6)
    assert np.allclose(M.task_attention(x, mode="uniform", n_classes=3, normalize="class").data, 1 / 2)


def test_attention_rejects_bad_k():
    with pytest.raises(ValueError):
        M.task_attention(Tensor(np.zeros((1, 3))), k=4)


def test_attention_gradient_with_detached_threshold():
    x = rng.uniform(0.1, 1, size=(2, 5))
    beta = np.sort(x, axis=-1)[:, -3:-2]
    check_grads(lambda a: (M.task_attention(a, k=3, t=5.0, beta=beta) * Tensor(np.arange(5.0))).sum(), [x])


def test_attention_gradient_through_threshold():
    x = rng.uniform(0.1, 1, size=(2, 5))
    check_grads(lambda a: (M.task_attention(a, k=3, t=5.0, detach_threshold=False) * Tensor(np.arange(5.0))).sum(), [x])


def test_local_similarity_matches_loops():
    Mx, A = rng.normal(size=(2, 4, 6)), rng.random(size=(2, 4, 6))
    with precision("float64"):
        s = M.local_similarity(Tensor(Mx), Tensor(A), 3).data
    for q in range(2):
        for n in range(3):
            assert s[q, n] == pytest.approx(sum(A[q, i, j] * Mx[q, i, j] for i in range(4) for j in range(2 * n, 2 * n + 2)) / 4)


def test_fuse_is_mean():
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    with precision("float64"):
        np.testing.assert_allclose(M.fuse(Tensor(a), Tensor(b)).data, (a + b) / 2)

import numpy as np
import pytest

from tdsnet.config import RunConfig, tiny_config
from tdsnet.model import TDSNet
from tdsnet.nn import load_module_state, module_state
from tdsnet.tensor import Tensor, no_grad, precision

rng = np.random.default_rng(0)


def episode(cfg, n_query=None):
    s = cfg.image_size
    support = rng.normal(size=(cfg.n_way * cfg.k_shot, s, s, 3))
    query = rng.normal(size=(n_query or cfg.n_way * cfg.q_per, s, s, 3))
    return support, np.repeat(np.arange(cfg.n_way), cfg.k_shot), query


def build(cfg, seed=0):
    with precision(cfg.precision):
        return TDSNet(cfg, np.random.default_rng(seed))


def run(model, support, labels, query):
    with precision(model.cfg.precision):
        return model(Tensor(support), labels, Tensor(query))


def test_default_feature_shape():
    cfg = RunConfig()
    model = build(cfg)
    with precision("float32"):
        out = model.extract_features(Tensor(rng.normal(size=(10, 84, 84, 3))))
    assert out.shape == (10, 5, 5, 64)
    with pytest.raises(ValueError):
        model.extract_features(Tensor(np.zeros((1, 80, 80, 3))))


def test_identical_query_and_prototype_scores_one():
    cfg = tiny_config(hconv="identity", k_shot=1)
    model = build(cfg)
    support, labels, _ = episode(cfg)
    out = run(model, support, labels, support[1:2])
    assert out.bundle.S_g.data[0, 1] == pytest.approx(1.0, abs=1e-9)


def test_class_permutation_equivariance():
    cfg = tiny_config(q_per=2)
    model = build(cfg)
    support, labels, query = episode(cfg)
    a = run(model, support, labels, query).bundle
    b = run(model, support[::-1], labels, query).bundle  # swaps the two classes (k_shot=1)
    for name in ("S_g", "S_l", "S_total"):
        np.testing.assert_allclose(getattr(a, name).data, getattr(b, name).data[:, ::-1], atol=1e-12)


def test_lfe_does_not_change_predictions_or_running_stats():
    with_lfe, without = tiny_config(), tiny_config(use_lfe=False)
    m1, m2 = build(with_lfe), build(without)
    state = {k: v for k, v in module_state(m1).items() if not k.startswith("lfe/")}
    load_module_state(m2, state)
    support, labels, query = episode(with_lfe)
    o1, o2 = run(m1, support, labels, query), run(m2, support, labels, query)
    np.testing.assert_array_equal(o1.bundle.S_total.data, o2.bundle.S_total.data)
    for (k, a, _), (_, b, _) in zip(m1.children["hconv"].named_buffers(), m2.children["hconv"].named_buffers()):
        np.testing.assert_array_equal(a, b, err_msg=k)
    assert o1.p_a is not None and o2.p_a is None


def test_global_only_ablation():
    cfg = tiny_config(use_local=False, use_lfe=False)
    model = build(cfg)
    assert "relation" not in model.children and "lfe" not in model.children
    out = run(model, *episode(cfg))
    assert out.bundle.S_l is None
    np.testing.assert_array_equal(out.bundle.S_total.data, out.bundle.S_g.data)


@pytest.mark.parametrize("norm", ["class", "task"])
def test_uniform_attention_equals_block_mean_oracle(norm):
    cfg = tiny_config(attention="uniform", attention_norm=norm, n_way=3, q_per=2)
    model = build(cfg)
    out = run(model, *episode(cfg))
    M = out.bundle.M.data
    hw = M.shape[1]
    for q in range(M.shape[0]):
        for n in range(3):
            block = [M[q, i, j] for i in range(hw) for j in range(n * hw, (n + 1) * hw)]
            expect = np.mean(block) / (3 if norm == "task" else 1)
            assert abs(out.bundle.S_l.data[q, n] - expect) <= 1e-6


def test_eval_output_independent_of_batch_composition():
    cfg = tiny_config(q_per=3)
    model = build(cfg)
    support, labels, query = episode(cfg)
    run(model, support, labels, query)  # populate running statistics
    model.eval()
    with no_grad():
        full = run(model, support, labels, query).bundle.S_total.data
        single = np.concatenate([run(model, support, labels, query[i:i + 1]).bundle.S_total.data
                                 for i in range(len(query))])
    np.testing.assert_allclose(full, single, atol=1e-12)


def test_determinism():
    cfg = tiny_config()
    support, labels, query = episode(cfg)
    a = run(build(cfg, 3), support, labels, query).bundle.S_total.data
    b = run(build(cfg, 3), support, labels, query).bundle.S_total.data
    np.testing.assert_array_equal(a, b)


def test_score_gradient_wrt_input_matches_finite_differences():
    cfg = tiny_config()
    model = build(cfg)
    support, labels, query = episode(cfg)
    cache = {}
    with precision("float64"):
        x = Tensor(query, requires_grad=True)
        weights = Tensor(rng.normal(size=(cfg.n_way * cfg.q_per, cfg.n_way)))
        f = lambda: (model(Tensor(support), labels, x, stop_grad_cache=cache).bundle.S_total * weights).sum()
        f().backward()
        picks = [tuple(int(v) for v in rng.integers(0, d)) for d in [x.shape] * 40]
        num = []
        for idx in picks:
            orig = x.data[idx]
            x.data[idx] = orig + 1e-5
            up = float(f().data)
            x.data[idx] = orig - 1e-5
            down = float(f().data)
            x.data[idx] = orig
            num.append((up - down) / 2e-5)
    ana = np.array([x.grad[idx] for idx in picks])
    num = np.array(num)
    err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
    assert err.max() <= 1e-3

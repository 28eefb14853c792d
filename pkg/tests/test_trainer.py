import sys
from pathlib import Path

import numpy as np
import orjson
import pytest
from scipy.special import erf

# Add project root to sys.path
project_root = str(Path(__file__).parent.parent)
sys.path.insert(0, project_root)

from src.guard.config import TrainConfig
from src.guard.domain import EmbeddingDataset, HeadParams
from src.guard.errors import EmptyClass, NonFiniteLoss, OutOfRange, TooFewSamples
from src.guard.evaluation import stratified_kfold, stratified_split
from src.guard.head import dropout_mask, head_forward, init_head, predict_proba, softmax
from src.guard.trainer import (
    OptimizerState,
    _BatchStream,
    _update,
    adamw_step,
    class_weights,
    head_backward,
    head_loss,
    lr_schedule,
    merge_datasets,
    run_cross_validation,
    train_final,
    train_head,
    weighted_cross_entropy,
    write_history,
)
from utils.splitmix import SplitMix64
from utils.synthetic import two_gaussian_dataset

SMALL_DIMS = (512, 8, 2)


@pytest.fixture(scope="module")
def synthetic_splits():
    ds = two_gaussian_dataset(1000, seed=0)
    train_idx, val_idx, test_idx = stratified_split(ds.labels, seed=0)
    return ds, ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)


@pytest.fixture(scope="module")
def trained(synthetic_splits):
    _, ds_train, ds_val, _ = synthetic_splits
    return train_head(ds_train, ds_val, TrainConfig(seed=0))


def test_class_weights_match_corpus():
    safe, malicious = class_weights(4310, 2000)
    assert safe == pytest.approx(0.732, abs=5e-4)
    assert safe == pytest.approx(6310 / 8620)
    assert malicious == pytest.approx(6310 / 4000)


def test_class_weights_need_both_classes():
    with pytest.raises(EmptyClass):
        class_weights(10, 0)


def test_weighted_cross_entropy_is_weighted_mean():
    logits = np.array([[2.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 1])
    nll = np.array([np.log1p(np.exp(-2.0)), np.log1p(np.exp(-1.0))])
    expected = (0.5 * nll[0] + 2.0 * nll[1]) / 2.5
    assert weighted_cross_entropy(logits, labels, (0.5, 2.0)) == pytest.approx(expected)


def test_lr_schedule_anchors():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(100, cfg) == pytest.approx(1.5e-5, rel=1e-12)
    assert lr_schedule(200, cfg) == 3.0e-5
    assert lr_schedule(1600, cfg) == pytest.approx(1.5e-5, rel=1e-12)
    assert lr_schedule(3000, cfg) == 0.0


def test_lr_schedule_shape():
    cfg = TrainConfig()
    warmup = [lr_schedule(s, cfg) for s in range(0, 201)]
    decay = [lr_schedule(s, cfg) for s in range(200, 3001)]
    assert all(a < b for a, b in zip(warmup, warmup[1:]))
    assert all(a >= b for a, b in zip(decay, decay[1:]))
    with pytest.raises(OutOfRange):
        lr_schedule(3001, cfg)


def _gradient_case(seed: int, dtype):
    rng = np.random.default_rng(seed)
    params = init_head(SplitMix64(seed), SMALL_DIMS, dtype=np.float64)
    h = rng.normal(size=(6, 512))
    labels = rng.integers(0, 2, size=6)
    labels[:2] = [0, 1]
    mask = dropout_mask(SplitMix64(seed + 100), (6, 8), 0.1, np.float64)
    weights = (0.7, 1.6)
    loss, grads = head_backward(h.astype(dtype), labels, params.astype(dtype), weights,
                                mask=mask.astype(dtype))
    return params, h, labels, mask, weights, grads


def _finite_difference(params, h, labels, mask, weights, name, index, eps=1e-6):
    plus, minus = params.copy(), params.copy()
    getattr(plus, name)[index] += eps
    getattr(minus, name)[index] -= eps
    return (head_loss(h, labels, plus, weights, mask) - head_loss(h, labels, minus, weights, mask)) / (2 * eps)


def _max_relative_error(dtype, seeds=range(20)):
    worst = 0.0
    for seed in seeds:
        params, h, labels, mask, weights, grads = _gradient_case(seed, dtype)
        coord_rng = np.random.default_rng(1000 + seed)
        for name in HeadParams.NAMES:
            tensor = getattr(params, name)
            flat = np.arange(tensor.size)
            if name == "w1":
                flat = coord_rng.choice(tensor.size, size=64, replace=False)
            indices = [np.unravel_index(i, tensor.shape) for i in flat]
            analytic = np.array([getattr(grads, name)[i] for i in indices], dtype=np.float64)
            numeric = np.array([_finite_difference(params, h, labels, mask, weights, name, i)
                                for i in indices])
            scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
            worst = max(worst, np.linalg.norm(analytic - numeric) / scale)
    return worst


def test_gradients_float64():
    assert _max_relative_error(np.float64) < 1e-6


def test_gradients_float32():
    assert _max_relative_error(np.float32) < 1e-3


def test_adamw_first_step_oracle():
    cfg = TrainConfig(weight_decay=0.01)
    params = HeadParams(*(np.full(s, 0.5) for s in [(2, 3), (2,), (2, 2), (2,)]))
    grads = HeadParams(*(np.full(s, g) for s, g in zip([(2, 3), (2,), (2, 2), (2,)], [0.1, -0.2, 0.3, 0.0])))
    new, state = adamw_step(params, grads, OptimizerState.for_params(params), cfg, lr=1e-3)

    for theta, g, out in zip(params.arrays(), grads.arrays(), new.arrays()):
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = theta - 1e-3 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * theta)
        assert np.allclose(out, expected, rtol=1e-12, atol=0)
    assert state.step_count == 1
    # decoupled decay still shrinks parameters whose gradient is zero
    assert np.allclose(new.b2, 0.5 * (1 - 1e-3 * 0.01))


def test_adamw_two_steps_oracle():
    cfg = TrainConfig()
    params = HeadParams(*(np.full(s, 1.0) for s in [(1, 1), (1,), (1, 1), (1,)]))
    g1 = HeadParams(*(np.full(s, 0.2) for s in [(1, 1), (1,), (1, 1), (1,)]))
    g2 = HeadParams(*(np.full(s, -0.1) for s in [(1, 1), (1,), (1, 1), (1,)]))
    state = OptimizerState.for_params(params)
    p1, state = adamw_step(params, g1, state, cfg, lr=0.01)
    p2, state = adamw_step(p1, g2, state, cfg, lr=0.005)

    theta, m, v = 1.0, 0.0, 0.0
    for t, (g, lr) in enumerate([(0.2, 0.01), (-0.1, 0.005)], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= lr * ((m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) + 0.01 * theta)
    assert float(p2.w1[0, 0]) == pytest.approx(theta, rel=1e-12)
    assert state.step_count == 2


def test_single_step_decreases_loss():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(16, 512))
    labels = np.tile([0, 1], 8)
    params = init_head(SplitMix64(3), SMALL_DIMS, dtype=np.float64)
    weights = (1.0, 1.0)
    before, grads = head_backward(h, labels, params, weights)
    params, _ = adamw_step(params, grads, OptimizerState.for_params(params), TrainConfig(), lr=1e-4)
    assert head_loss(h, labels, params, weights) < before


def test_weighted_cross_entropy_examples():
    weights = (0.732, 1.577)
    loss = weighted_cross_entropy(np.array([[0.0, 0.0]]), np.array([1]), weights)
    # a lone sample's weight cancels in the normalization
    assert loss == pytest.approx(0.6931, abs=5e-5)
    assert weights[1] * loss == pytest.approx(1.0931, abs=5e-5)
    assert weighted_cross_entropy(np.array([[-50.0, 50.0]]), np.array([0])) == pytest.approx(100.0, rel=1e-12)
    confident = weighted_cross_entropy(np.array([[-50.0, 50.0]]), np.array([1]))
    assert np.isfinite(confident) and 0.0 <= confident < 1e-40


def test_b2_gradient_closed_form():
    rng = np.random.default_rng(5)
    params = init_head(SplitMix64(5), SMALL_DIMS, dtype=np.float64)
    h = rng.normal(size=(5, 512))
    labels = np.array([0, 1, 1, 0, 1])
    weights = (0.732, 1.577)
    _, grads = head_backward(h, labels, params, weights)

    probs = softmax(head_forward(h, params))
    one_hot = np.eye(2)[labels]
    w = np.asarray(weights)[labels]
    expected = (w[:, None] * (probs - one_hot)).sum(axis=0) / w.sum()
    assert np.allclose(grads.b2, expected, rtol=1e-12, atol=1e-15)

    _, single = head_backward(h[:1], labels[:1], params, weights)
    assert np.allclose(single.b2, probs[0] - one_hot[0], rtol=1e-12, atol=1e-15)


def test_loss_decreases_over_first_ten_steps():
    ds = two_gaussian_dataset(64, seed=0)
    cfg = TrainConfig(lr_max=1e-3, dropout_p=0.0)
    params = init_head(SplitMix64(0), SMALL_DIMS, dtype=np.float64)
    state = OptimizerState.for_params(params)
    batch = np.arange(32)  # labels alternate, so the batch is balanced
    losses = []
    for step in range(1, 12):
        params, state, loss = _update(params, state, ds, batch, (1.0, 1.0), cfg, SplitMix64(0),
                                      lr=lr_schedule(step, cfg))
        losses.append(loss)
    assert all(after < before for before, after in zip(losses, losses[1:]))


def _reference_adam(h, labels, params, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Plain Adam on mean cross-entropy with a hand-written backward pass"""
    theta = {name: getattr(params, name).astype(np.float64).copy() for name in HeadParams.NAMES}
    m = {name: np.zeros_like(value) for name, value in theta.items()}
    v = {name: np.zeros_like(value) for name, value in theta.items()}
    one_hot = np.eye(2)[labels]
    for t in range(1, steps + 1):
        z1 = h @ theta["w1"].T + theta["b1"]
        cdf = 0.5 * (1.0 + erf(z1 / np.sqrt(2.0)))
        a1 = z1 * cdf
        logits = a1 @ theta["w2"].T + theta["b2"]
        exp = np.exp(logits - logits.max(axis=1, keepdims=True))
        d_logits = (exp / exp.sum(axis=1, keepdims=True) - one_hot) / len(labels)
        d_z1 = (d_logits @ theta["w2"]) * (cdf + z1 * np.exp(-0.5 * z1 ** 2) / np.sqrt(2.0 * np.pi))
        grads = {"w1": d_z1.T @ h, "b1": d_z1.sum(axis=0),
                 "w2": d_logits.T @ a1, "b2": d_logits.sum(axis=0)}
        for name, g in grads.items():
            m[name] = beta1 * m[name] + (1.0 - beta1) * g
            v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
            m_hat = m[name] / (1.0 - beta1 ** t)
            v_hat = v[name] / (1.0 - beta2 ** t)
            theta[name] = theta[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta


def test_adamw_without_decay_is_plain_adam():
    rng = np.random.default_rng(11)
    h = rng.normal(size=(12, 512))
    labels = np.tile([0, 1], 6)
    params = init_head(SplitMix64(11), SMALL_DIMS, dtype=np.float64)
    cfg = TrainConfig(weight_decay=0.0)

    expected = _reference_adam(h, labels, params, lr=1e-3, steps=10)
    state = OptimizerState.for_params(params)
    for _ in range(10):
        _, grads = head_backward(h, labels, params, (1.0, 1.0))
        params, state = adamw_step(params, grads, state, cfg, lr=1e-3)
    for name in HeadParams.NAMES:
        assert np.allclose(getattr(params, name), expected[name], rtol=1e-9, atol=1e-10)


def test_batch_stream_covers_each_epoch_once():
    stream = _BatchStream(10, 4, SplitMix64(2))
    first_epoch = [stream.next() for _ in range(3)]
    assert [len(b) for b in first_epoch] == [4, 4, 2]
    assert sorted(np.concatenate(first_epoch).tolist()) == list(range(10))
    second_epoch = [stream.next() for _ in range(3)]
    assert sorted(np.concatenate(second_epoch).tolist()) == list(range(10))


def test_training_reaches_high_f1(trained):
    params, history = trained
    assert params.n_parameters == 131842
    assert history.best_val_f1 >= 0.99
    assert 1 <= history.best_step <= 3000
    assert [e.step for e in history.entries] == list(range(100, 3001, 100))
    assert history.class_weights == pytest.approx((1.0, 1.0))


def test_trained_head_generalizes(trained, synthetic_splits):
    params, _ = trained
    _, _, _, ds_test = synthetic_splits
    predictions = predict_proba(ds_test.embeddings, params) >= 0.5
    assert np.mean(predictions == ds_test.labels.astype(bool)) >= 0.98


def test_training_is_deterministic(synthetic_splits):
    _, ds_train, ds_val, _ = synthetic_splits
    cfg = TrainConfig(seed=7, max_steps=60, warmup_steps=10, eval_every=20)
    first, h1 = train_head(ds_train, ds_val, cfg)
    second, h2 = train_head(ds_train, ds_val, cfg)
    for a, b in zip(first.arrays(), second.arrays()):
        assert a.tobytes() == b.tobytes()
    assert h1 == h2


def test_micro_batches_accumulate_to_full_batch(synthetic_splits):
    _, ds_train, _, _ = synthetic_splits
    params = init_head(SplitMix64(1), SMALL_DIMS, dtype=np.float64)
    batch = np.arange(32)
    weights = (1.0, 1.0)
    results = []
    for micro in (32, 8):
        cfg = TrainConfig(batch_size=32, micro_batch_size=micro, dropout_p=0.0)
        results.append(_update(params, OptimizerState.for_params(params), ds_train, batch,
                               weights, cfg, SplitMix64(0), lr=1e-3))
    (full, _, full_loss), (accumulated, _, accumulated_loss) = results
    assert accumulated_loss == pytest.approx(full_loss, rel=1e-12)
    for a, b in zip(full.arrays(), accumulated.arrays()):
        assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_training_rejects_single_class():
    ds = two_gaussian_dataset(20, seed=1)
    safe_only = ds.subset(np.flatnonzero(ds.labels == 0))
    with pytest.raises(EmptyClass):
        train_head(safe_only, ds, TrainConfig(max_steps=10, warmup_steps=1))


def test_training_detects_divergence():
    ds = two_gaussian_dataset(4, seed=2)
    embeddings = ds.embeddings.copy()
    embeddings[0] = np.inf
    broken = EmbeddingDataset(embeddings, ds.labels)
    with pytest.raises(NonFiniteLoss):
        train_head(broken, ds, TrainConfig(max_steps=10, warmup_steps=1))


def test_history_export(tmp_path, synthetic_splits):
    _, ds_train, ds_val, _ = synthetic_splits
    _, history = train_head(ds_train, ds_val, TrainConfig(max_steps=40, warmup_steps=5, eval_every=20))
    path = tmp_path / "history.jsonl"
    write_history(history, path)
    lines = [orjson.loads(line) for line in path.read_bytes().splitlines()]
    assert [line["step"] for line in lines] == [20, 40]
    assert set(lines[0]) == {"step", "lr", "train_loss", "val_loss", "val_f1"}


def test_train_final_uses_merged_data(synthetic_splits):
    _, ds_train, ds_val, _ = synthetic_splits
    cfg = TrainConfig(seed=4, max_steps=50, warmup_steps=5)
    assert len(merge_datasets(ds_train, ds_val)) == len(ds_train) + len(ds_val)
    first = train_final(ds_train, ds_val, cfg, stop_step=30)
    second = train_final(ds_train, ds_val, cfg, stop_step=30)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(first.arrays(), second.arrays()))
    with pytest.raises(OutOfRange):
        train_final(ds_train, ds_val, cfg, stop_step=51)


def test_cross_validation_on_synthetic_data():
    ds = two_gaussian_dataset(1000, seed=3)
    report = run_cross_validation(ds, k=5, cfg=TrainConfig(seed=0))
    assert [r.fold for r in report.folds] == [0, 1, 2, 3, 4]
    assert sum(r.n_validation for r in report.folds) == len(ds)
    assert all(r.n_train + r.n_validation == len(ds) for r in report.folds)
    assert report.summary["f1"].std <= 0.02
    assert report.summary["f1"].mean >= 0.98

    folds = stratified_kfold(ds.labels, 5, 0)
    assert [len(f) for f in folds] == [r.n_validation for r in report.folds]


def test_cross_validation_needs_enough_samples():
    ds = two_gaussian_dataset(3, seed=0)
    with pytest.raises(TooFewSamples):
        run_cross_validation(ds, k=5)

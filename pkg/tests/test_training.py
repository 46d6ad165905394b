import math

import numpy as np
import pytest

from hopflow.autodiff import Tape
from hopflow.errors import ConfigError, NumericError
from hopflow.hops import HopTensor
from hopflow.losses import LossConfig, barlow_loss
from hopflow.model import ModelConfig, forward, init_params
from hopflow.training import (
    AdamState,
    TrainConfig,
    _iter_batches,
    adam_step,
    evaluate,
    train,
)


def adam_oracle(x0, grad_seq, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Hand-rolled scalar Adam, independent of the production implementation."""
    x = float(x0)
    m = v = 0.0
    for t, g in enumerate(grad_seq, start=1):
        g = g + weight_decay * x
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        mhat = m / (1 - betas[0] ** t)
        vhat = v / (1 - betas[1] ** t)
        x -= lr * mhat / (math.sqrt(vhat) + eps)
    return x


def single_param_store(value):
    from hopflow.model import ParamStore

    store = ParamStore()
    store.add("w", np.array([value], dtype=np.float64))
    return store


class TestAdam:
    def test_zero_gradient_no_change(self):
        store = single_param_store(1.25)
        state = AdamState(store)
        adam_step(store, state, lr=0.1)
        assert store["w"].data[0] == 1.25

    def test_first_step_magnitude_is_lr(self):
        store = single_param_store(0.0)
        state = AdamState(store)
        store["w"].grad[...] = 0.7
        adam_step(store, state, lr=0.1)
        assert store["w"].data[0] == pytest.approx(-0.1, abs=1e-6)

    def test_two_steps_match_scalar_oracle(self):
        grads = [0.31, -1.7]
        store = single_param_store(0.5)
        state = AdamState(store)
        for g in grads:
            store.zero_grad()
            store["w"].grad[...] = g
            adam_step(store, state, lr=0.05, weight_decay=0.0)
        expected = adam_oracle(0.5, grads, lr=0.05)
        assert abs(store["w"].data[0] - expected) < 1e-12

    def test_coupled_weight_decay_matches_oracle(self):
        grads = [0.2, 0.4, -0.1]
        store = single_param_store(2.0)
        state = AdamState(store)
        xs = [2.0]
        for g in grads:
            store.zero_grad()
            store["w"].grad[...] = g
            adam_step(store, state, lr=0.01, weight_decay=0.3)
            xs.append(float(store["w"].data[0]))
        # the oracle must see the same parameter trajectory for its L2 term
        x = 2.0
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            g = g + 0.3 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(xs[-1] - x) < 1e-12

    def test_non_finite_gradient_names_parameter(self):
        store = single_param_store(0.0)
        state = AdamState(store)
        store["w"].grad[...] = np.nan
        with pytest.raises(NumericError, match="'w'"):
            adam_step(store, state, lr=0.1)


class TestBatching:
    def test_plain_chunks(self):
        ids = np.arange(10)
        chunks = _iter_batches(ids, 4, min_size=1)
        assert [len(c) for c in chunks] == [4, 4, 2]

    def test_undersized_tail_folds_when_required(self):
        ids = np.arange(9)
        chunks = _iter_batches(ids, 4, min_size=2)
        assert [len(c) for c in chunks] == [4, 5]

    def test_single_small_batch_kept(self):
        chunks = _iter_batches(np.arange(3), 10, min_size=2)
        assert [len(c) for c in chunks] == [3]


def linsep_problem(n=60, dim=4, seed=0):
    """Linearly separable 2-class point cloud wrapped as a single-hop tensor."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    x = rng.standard_normal((n, dim)).astype(np.float32) * 0.2
    x[:, 0] += np.where(labels == 0, 2.0, -2.0)
    order = rng.permutation(n)
    x, labels = x[order], labels[order]
    hops = HopTensor(x[:, None, :])

    class Ids:
        train = np.arange(0, 40)
        val = np.arange(40, 50)
        test = np.arange(50, 60)

    return hops, labels.astype(np.int64), Ids()


def linsep_config(**kwargs):
    model = ModelConfig(
        in_dim=4, num_classes=2, hops=0, interaction_kind="none",
        hidden=8, dropout=0.0,
    )
    base = dict(
        lr=0.05, weight_decay=0.0, batch_size=3000, max_epochs=200,
        patience=200, seed=0, model=model, loss=LossConfig(),
    )
    base.update(kwargs)
    return TrainConfig(**base)


class TestTrain:
    def test_linear_problem_reaches_full_train_accuracy(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config()
        store, report = train(hops, labels, split, cfg)
        result = evaluate(store, cfg.model, hops, split.train, labels)
        assert result.accuracy == 1.0
        assert report.epochs_run <= 200

    def test_same_seed_identical_reports(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config(max_epochs=30, patience=30)
        _, r1 = train(hops, labels, split, cfg)
        store2, r2 = train(hops, labels, split, cfg)
        assert r1.train_loss == r2.train_loss
        assert r1.val_acc == r2.val_acc
        assert r1.to_json() == r2.to_json()

    def test_best_val_is_max_over_epochs(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config(max_epochs=40, patience=40)
        _, report = train(hops, labels, split, cfg)
        assert report.best_val_acc == max(report.val_acc)

    def test_early_stopping_triggers(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config(max_epochs=150, patience=5, lr=0.2)
        _, report = train(hops, labels, split, cfg)
        assert report.stopped_early or report.epochs_run == 150

    def test_empty_train_split_rejected(self):
        hops, labels, split = linsep_problem()
        labels = labels.copy()
        labels[split.train] = -1
        with pytest.raises(ValueError, match="train split"):
            train(hops, labels, split, linsep_config())

    def test_nan_loss_aborts_with_location(self):
        hops, labels, split = linsep_problem()
        bad = hops.data.copy()
        bad[0, 0, 0] = np.nan
        with pytest.raises(NumericError, match="epoch 0"):
            train(HopTensor(bad), labels, split, linsep_config())

    def test_cache_dim_mismatch(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config()
        cfg.model.in_dim = 9
        with pytest.raises(ValueError, match="in_dim"):
            train(hops, labels, split, cfg)

    def test_cache_hops_insufficient(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config()
        cfg.model.hops = 3
        cfg.model.interaction_kind = "attention"
        with pytest.raises(ValueError, match="slices"):
            train(hops, labels, split, cfg)

    def test_barlow_views_identical_without_dropout(self):
        # dropout off -> the two stochastic views coincide bit for bit and the
        # invariance part of the auxiliary loss is numerically negligible
        rng = np.random.default_rng(0)
        cfg = ModelConfig(in_dim=4, num_classes=2, hops=2, hidden=8, dropout=0.0)
        store = init_params(cfg, rng)
        batch = rng.standard_normal((12, 3, 4)).astype(np.float32)
        tape = Tape(training=True, rng=np.random.default_rng(1))
        view_a = forward(batch, store, cfg, tape)
        view_b = forward(batch, store, cfg, tape)
        assert np.array_equal(view_a.hidden_tokens.data, view_b.hidden_tokens.data)
        inv = barlow_loss(tape, view_a.hidden_tokens, view_b.hidden_tokens, alpha=0.0)
        assert float(inv.data) < 1e-4

    def test_ssl_smoke_runs_and_improves_nothing_weird(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config(max_epochs=30, patience=30)
        cfg.loss = LossConfig(ssl_kind="barlow", lam=1e-3, alpha=0.1)
        cfg.model.dropout = 0.3
        store, report = train(hops, labels, split, cfg)
        assert np.isfinite(report.train_loss).all()
        result = evaluate(store, cfg.model, hops, split.test, labels)
        assert result.accuracy > 0.8

    def test_scl_smoke(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config(max_epochs=20, patience=20)
        cfg.loss = LossConfig(ssl_kind="scl", lam=1e-2, tau=0.5)
        cfg.model.dropout = 0.2
        _, report = train(hops, labels, split, cfg)
        assert np.isfinite(report.train_loss).all()


class TestEndToEndQuality:
    """Medium-scale integration net: on a homophilous block-model graph with
    weak raw features, the hop-interaction model must clearly beat the
    graph-free baseline. Catches training-quality regressions that unit
    tests cannot see."""

    def test_propagation_beats_raw_features_on_sbm(self):
        from hopflow.graph import (
            LabeledNodes,
            edge_homophily,
            graph_from_edges,
            make_splits,
            normalize,
        )
        from hopflow.hops import precompute_hops

        rng = np.random.default_rng(42)
        n, c, dim = 400, 4, 48
        labels = np.arange(n) % c
        rng.shuffle(labels)
        prob = np.where(labels[:, None] == labels[None, :], 0.035, 0.002)
        graph = graph_from_edges(n, np.argwhere(np.triu(rng.random((n, n)) < prob, 1)))
        labeled = LabeledNodes(labels.astype(np.int64), c)
        assert edge_homophily(graph, labeled) > 0.8
        protos = rng.normal(0, 1, (c, dim))
        feats = (0.3 * protos[labels] + rng.normal(0, 1, (n, dim))).astype(np.float32)
        hops = precompute_hops(normalize(graph, "sym", True), feats, 3)
        splits = make_splits(n, seed=0, k=2)

        def mean_acc(model_cfg, hop_view):
            accs = []
            for i, split in enumerate(splits):
                cfg = TrainConfig(
                    lr=0.005, weight_decay=5e-4, max_epochs=200, patience=60,
                    seed=i, model=model_cfg, loss=LossConfig(),
                )
                _, report = train(hop_view, labeled.labels, split, cfg)
                accs.append(report.test_acc)
            return float(np.mean(accs))

        full = mean_acc(
            ModelConfig(in_dim=dim, num_classes=c, hops=3, hidden=48, dropout=0.5),
            hops,
        )
        baseline = mean_acc(
            ModelConfig(in_dim=dim, num_classes=c, hops=0, hidden=48, dropout=0.5,
                        interaction_kind="none"),
            hops.truncated(1),
        )
        assert full >= 0.85, f"hop-interaction accuracy {full:.3f}"
        assert full >= baseline + 0.05, f"no gain over raw features: {full:.3f} vs {baseline:.3f}"


class TestEvaluate:
    def test_perfect_predictions(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config()
        store, _ = train(hops, labels, split, cfg)
        result = evaluate(store, cfg.model, hops, split.train, labels)
        assert result.accuracy == 1.0
        assert all(v == 1.0 for v in result.per_class.values())

    def test_uniform_model_near_chance(self):
        rng = np.random.default_rng(5)
        n, c = 400, 4
        labels = rng.integers(0, c, size=n)
        hops = HopTensor(rng.standard_normal((n, 1, 6)).astype(np.float32))
        cfg = ModelConfig(in_dim=6, num_classes=c, hops=0, interaction_kind="none", hidden=8)
        store = init_params(cfg, rng)
        store["head.weight"].data[...] = 0.0
        store["head.bias"].data[...] = 0.0
        # uniform probabilities -> argmax is class 0 everywhere
        result = evaluate(store, cfg, hops, np.arange(n), labels)
        assert result.accuracy == pytest.approx((labels == 0).mean())
        assert abs(result.accuracy - 1.0 / c) < 0.1

    def test_accuracy_invariant_to_eval_batch_size(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config(max_epochs=10, patience=10)
        store, _ = train(hops, labels, split, cfg)
        accs = {
            evaluate(store, cfg.model, hops, split.test, labels, batch_size=bs).accuracy
            for bs in (1, 3, 7, 1000)
        }
        assert len(accs) == 1

    def test_unlabeled_node_rejected(self):
        hops, labels, split = linsep_problem()
        labels = labels.copy()
        labels[split.test[0]] = -1
        cfg = linsep_config()
        store = init_params(cfg.model, np.random.default_rng(0))
        with pytest.raises(ValueError, match="unlabeled"):
            evaluate(store, cfg.model, hops, split.test, labels)


class TestConfigValidation:
    def test_patience_cannot_exceed_epochs(self):
        with pytest.raises(ConfigError, match="patience"):
            linsep_config(patience=300, max_epochs=100).validate()

    def test_barlow_needs_batch_of_two(self):
        cfg = linsep_config(batch_size=1)
        cfg.loss = LossConfig(ssl_kind="barlow")
        with pytest.raises(ConfigError, match="batch_size"):
            cfg.validate()

    def test_roundtrip_dict(self):
        cfg = linsep_config()
        doc = cfg.to_dict()
        assert TrainConfig.from_dict(doc) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 0.1})


class TestReportSerialization:
    def test_timings_zeroed_under_determinism(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config(max_epochs=5, patience=5, determinism=True)
        _, report = train(hops, labels, split, cfg)
        doc = report.to_dict()
        assert all(v == 0.0 for v in doc["timings"].values())
        assert report.timings["train_s"] > 0.0  # measured in memory regardless

    def test_timings_kept_otherwise(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config(max_epochs=5, patience=5, determinism=False)
        _, report = train(hops, labels, split, cfg)
        assert report.to_dict()["timings"]["train_s"] > 0.0

    def test_peak_bytes_positive_and_stable(self):
        hops, labels, split = linsep_problem()
        cfg = linsep_config(max_epochs=5, patience=5)
        _, r1 = train(hops, labels, split, cfg)
        _, r2 = train(hops, labels, split, cfg)
        assert r1.peak_bytes > 0
        assert r1.peak_bytes == r2.peak_bytes

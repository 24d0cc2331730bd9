import numpy as np
import pytest

from expertnet.data import Dataset, Sample, ingest_dataset, split_dataset
from expertnet.errors import NumericError, ShapeError
from expertnet.model import build_network, parse_config
from expertnet.presets import desk_config
from expertnet.tensor import SeededRng
from expertnet.train import (TrainConfig, crossvalidate, evaluate, sgd_step,
                             train_loop)

TINY_NET = ("input c=3 h=16 w=16\n"
            "conv name=C1 k=3 out=4 stride=2 act=relu\n"
            "fc name=F1 out=8 act=relu\n"
            "classifier classes=7\n")


def constant_predictor(num_classes, predicted):
    """A network whose classifier always argmaxes one fixed class."""
    text = (f"input c=1 h=16 w=16\nconv name=C k=1 out=1\n"
            f"classifier classes={num_classes}\n")
    net = build_network(parse_config(text), rng=SeededRng(0))
    net.params["C"].weights[...] = 0.0
    net.params["Classifier"].weights[...] = 0.0
    net.params["Classifier"].bias[...] = 0.0
    net.params["Classifier"].bias[predicted] = 1.0
    return net


def make_samples(labels, h=16, w=16, channels=1):
    return [Sample(np.zeros((channels, h, w), dtype=np.float32), int(l), str(i))
            for i, l in enumerate(labels)]


class TestTrainConfig:
    def test_defaults_follow_protocol(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-3
        assert cfg.batch_size == 35
        assert cfg.epochs == 200
        assert cfg.momentum == 0.0

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)


class TestSgdStep:
    def test_plain_update(self):
        w = np.array([1.0], dtype=np.float32)
        g = np.array([0.5], dtype=np.float32)
        v = np.zeros(1, dtype=np.float32)
        sgd_step([w], [g], [v], TrainConfig(lr=0.1, momentum=0.0))
        assert w[0] == pytest.approx(0.95)

    def test_zero_gradient_freezes(self):
        w = np.array([1.0, -2.0], dtype=np.float32)
        before = w.copy()
        sgd_step([w], [np.zeros_like(w)], [np.zeros_like(w)],
                 TrainConfig(lr=0.1))
        assert np.array_equal(w, before)

    def test_momentum_two_steps(self):
        w = np.array([0.0])
        v = np.zeros(1)
        cfg = TrainConfig(lr=0.1, momentum=0.9)
        sgd_step([w], [np.ones(1)], [v], cfg)
        assert w[0] == pytest.approx(-0.1)
        sgd_step([w], [np.ones(1)], [v], cfg)
        assert v[0] == pytest.approx(1.9)
        assert w[0] == pytest.approx(-0.29)

    def test_momentum_zero_is_textbook_bitwise(self):
        rng = SeededRng(5)
        w1 = rng.normal(100).astype(np.float32)
        g = rng.normal(100).astype(np.float32)
        w2 = w1.copy()
        sgd_step([w1], [g], [np.zeros_like(w1)],
                 TrainConfig(lr=1e-3, momentum=0.0))
        w2 -= np.float32(1e-3) * g
        assert np.array_equal(w1, w2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], TrainConfig())


class TestEvaluate:
    def test_three_of_four(self):
        net = constant_predictor(2, predicted=0)
        acc, matrix = evaluate(net, make_samples([0, 0, 0, 1]))
        assert acc == 75.0
        assert matrix.counts.tolist() == [[3, 0], [1, 0]]

    def test_all_correct(self):
        net = constant_predictor(3, predicted=2)
        acc, _ = evaluate(net, make_samples([2, 2, 2, 2, 2]))
        assert acc == 100.0

    def test_accuracy_equals_trace_over_total(self):
        net = constant_predictor(4, predicted=1)
        acc, matrix = evaluate(net, make_samples([0, 1, 1, 2, 3, 1]))
        assert acc == 100.0 * matrix.correct / matrix.total
        assert matrix.counts.sum(axis=1).tolist() == [1, 3, 1, 1]

    def test_uniform_predictor_near_chance(self):
        # untrained net on noise images with independent labels: correctness
        # probability is exactly 1/7 per sample
        net = build_network(parse_config(TINY_NET), rng=SeededRng(9))
        rng = SeededRng(10)
        images = rng.normal(7000 * 3 * 16 * 16).reshape(7000, 3, 16, 16)
        samples = [Sample(images[i].astype(np.float32), int(rng.integer(7)), str(i))
                   for i in range(7000)]
        acc, _ = evaluate(net, samples)
        assert 12.0 <= acc <= 16.6

    def test_empty_samples(self):
        net = constant_predictor(2, predicted=0)
        with pytest.raises(ValueError):
            evaluate(net, [])

    def test_batching_invariance(self):
        net = build_network(parse_config(TINY_NET), rng=SeededRng(4))
        rng = SeededRng(6)
        samples = [Sample(0.5 + 0.2 * rng.normal(3 * 16 * 16)
                          .reshape(3, 16, 16).astype(np.float32),
                          int(rng.integer(7)), str(i)) for i in range(33)]
        acc_one, m_one = evaluate(net, samples, batch_size=1)
        acc_big, m_big = evaluate(net, samples, batch_size=64)
        assert acc_one == acc_big
        assert np.array_equal(m_one.counts, m_big.counts)


def _tiny_tagged_dataset(tree, seed=1):
    ds = ingest_dataset(tree, size=(32, 32))
    return split_dataset(ds, seed)


class TestTrainLoop:
    def test_deterministic_epoch_losses(self, tiny_tree):
        ds = _tiny_tagged_dataset(tiny_tree)
        runs = []
        for _ in range(2):
            net = build_network(desk_config(num_classes=2), rng=SeededRng(2))
            cfg = TrainConfig(lr=1e-3, batch_size=8, epochs=3, seed=2)
            metrics = train_loop(net, ds, cfg)
            runs.append([r.train_loss for r in metrics.epochs])
        assert runs[0] == runs[1]

    def test_lr_zero_freezes_parameters(self, tiny_tree):
        ds = _tiny_tagged_dataset(tiny_tree)
        net = build_network(desk_config(num_classes=2), rng=SeededRng(2))
        before = [p.copy() for p in net.parameters()]
        train_loop(net, ds, TrainConfig(lr=0.0, batch_size=8, epochs=2, seed=0))
        assert all(np.array_equal(b, p)
                   for b, p in zip(before, net.parameters()))

    def test_empty_train_split(self):
        ds = Dataset(make_samples([0, 1], channels=3, h=32, w=32),
                     ["a", "b"], ["test", "test"])
        net = build_network(desk_config(num_classes=2), rng=SeededRng(0))
        with pytest.raises(ValueError):
            train_loop(net, ds, TrainConfig(epochs=1))

    def test_divergence_raises_numeric_error(self, tiny_tree):
        ds = _tiny_tagged_dataset(tiny_tree)
        net = build_network(desk_config(num_classes=2), rng=SeededRng(2))
        with pytest.raises(NumericError):
            train_loop(net, ds, TrainConfig(lr=1e12, batch_size=8,
                                            epochs=50, seed=0))

    def test_metrics_log_format(self, tiny_tree, tmp_path):
        ds = _tiny_tagged_dataset(tiny_tree)
        net = build_network(desk_config(num_classes=2), rng=SeededRng(2))
        log = tmp_path / "metrics.tsv"
        train_loop(net, ds, TrainConfig(lr=1e-3, batch_size=8, epochs=2,
                                        seed=2), log_path=log)
        lines = log.read_text().splitlines()
        assert lines[0].startswith("# lr=0.001 batch=8 epochs=2")
        rows = [l for l in lines if not l.startswith("#")]
        assert len(rows) == 2
        assert len(rows[0].split("\t")) == 4


class TestCrossValidate:
    def test_two_folds_reproducible(self, tiny_tree):
        ds = ingest_dataset(tiny_tree, size=(32, 32))
        config = desk_config(num_classes=2)
        cfg = TrainConfig(lr=1e-3, batch_size=8, epochs=2, seed=5)
        first = crossvalidate(config, ds, 2, cfg)
        second = crossvalidate(config, ds, 2, cfg)
        assert [a for _, a in first[0]] == [a for _, a in second[0]]
        assert first[1] == second[1]

    def test_fold_test_sets_disjoint(self, tiny_tree):
        ds = ingest_dataset(tiny_tree, size=(32, 32))
        from expertnet.data import kfold_partition
        folds = kfold_partition(ds, 3, 1)
        seen = [i for _, test in folds for i in test]
        assert sorted(seen) == list(range(len(ds.samples)))

    def test_too_many_folds_propagates(self, tiny_tree):
        from expertnet.errors import DataError
        ds = ingest_dataset(tiny_tree, size=(32, 32))
        with pytest.raises(DataError):
            crossvalidate(desk_config(num_classes=2), ds, 13,
                          TrainConfig(epochs=1))

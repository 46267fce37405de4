import math
from dataclasses import replace

import numpy as np
import pytest

from okapi.core import ConfigError, FormatError
from okapi.matcher import CaliperParams
from okapi.toytrain import (
    METRIC_COLUMNS,
    Batch,
    SynthConfig,
    ToyModel,
    TrainConfig,
    Trainer,
    flat_grads,
    forward_backward,
    gen_synth,
    history_to_csv,
    read_checkpoint,
    train_erm,
)


def numeric_grad(model, batch, lam, task, h=1e-5):
    base = model.flat()
    out = np.zeros_like(base)
    for i in range(len(base)):
        for sign in (1, -1):
            v = base.copy()
            v[i] += sign * h
            m = model.copy()
            m.set_flat(v)
            out[i] += sign * forward_backward(m, batch, lam, task)[0].total
        out[i] /= 2 * h
    return out


def random_batch(rng, shape, task, with_neighbors):
    d_in, hidden, d_z = shape
    n = int(rng.integers(3, 9))
    x = rng.normal(size=(n, d_in))
    if task == "classification":
        y = rng.integers(0, 2, n).astype(float)
    else:
        y = rng.normal(size=n)
    y[rng.random(n) < 0.3] = np.nan
    nb = None
    if with_neighbors:
        nb = [rng.normal(size=(int(rng.integers(0, 3)), d_z)) for _ in range(n)]
    return Batch(x, y, nb)


class TestGradients:
    @pytest.mark.parametrize("shape", [(2, 8, 4), (2, 16, 8)])
    @pytest.mark.parametrize("task", ["classification", "regression"])
    def test_matches_finite_differences(self, shape, task):
        rng = np.random.default_rng([shape[1], len(task)])
        n_out = 2 if task == "classification" else 1
        worst = 0.0
        for i in range(50):
            model = ToyModel(*shape, n_out, seed=i)
            batch = random_batch(rng, shape, task, with_neighbors=True)
            lam = float(rng.uniform(0.1, 2.0))
            analytic = flat_grads(forward_backward(model, batch, lam, task)[1])
            fd = numeric_grad(model, batch, lam, task)
            rel = np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
            worst = max(worst, rel.max())
        assert worst < 1e-4

    def test_zero_lambda_is_supervised_only(self):
        rng = np.random.default_rng(1)
        model = ToyModel(2, 8, 4, 2, seed=0)
        b = random_batch(rng, (2, 8, 4), "classification", with_neighbors=True)
        plain = forward_backward(model, Batch(b.x, b.y), 0.0)
        with_nb = forward_backward(model, b, 0.0)
        assert plain[0].total == with_nb[0].total == with_nb[0].sup
        assert flat_grads(plain[1]).tobytes() == flat_grads(with_nb[1]).tobytes()

    def test_unmatched_batch_adds_nothing(self):
        rng = np.random.default_rng(2)
        model = ToyModel(2, 8, 4, 2, seed=0)
        b = random_batch(rng, (2, 8, 4), "classification", with_neighbors=False)
        empty = [np.zeros((0, 4))] * len(b.x)
        a = forward_backward(model, b, 0.0)
        c = forward_backward(model, Batch(b.x, b.y, empty), 3.0)
        assert c[0].unsup == 0.0 and c[0].total == a[0].total
        assert flat_grads(a[1]).tobytes() == flat_grads(c[1]).tobytes()

    def test_no_labels(self):
        model = ToyModel(2, 4, 3, 2, seed=0)
        losses, grads = forward_backward(model, Batch(np.ones((3, 2)), np.full(3, np.nan)))
        assert losses.sup == 0.0 and not flat_grads(grads).any()


class TestSynth:
    def test_deterministic(self):
        a, b = gen_synth(SynthConfig(seed=3)), gen_synth(SynthConfig(seed=3))
        assert a.train.equals(b.train) and a.ood_test.equals(b.ood_test)

    def test_splits(self):
        d = gen_synth(SynthConfig(samples_per_domain=50, test_samples_per_domain=20))
        assert set(d.labeled.domains.tolist()) == {0, 1}
        assert set(d.unlabeled.domains.tolist()) == {2, 3}
        assert set(d.ood_test.domains.tolist()) == {4, 5}
        assert np.isnan(d.unlabeled.targets).all() and not np.isnan(d.labeled.targets).any()
        assert len(np.unique(d.train.ids)) == len(d.train)

    def test_overlap_rejected(self):
        with pytest.raises(ConfigError):
            gen_synth(SynthConfig(labeled_domains=(0, 1), unlabeled_domains=(1, 2)))
        with pytest.raises(ConfigError):
            gen_synth(SynthConfig(n_ood_domains=0))

    def test_zero_rotation_same_distribution(self):
        d = gen_synth(SynthConfig(rotation_per_domain=0.0, samples_per_domain=2000, n_ood_domains=1))
        z = d.train.embeddings
        for s in range(1, 4):
            sel = d.train.domains == s
            ref = d.train.domains == 0
            np.testing.assert_allclose(np.abs(z[sel]).mean(axis=0), np.abs(z[ref]).mean(axis=0), atol=0.1)

    def test_linear_probe_in_distribution(self):
        d = gen_synth(SynthConfig(samples_per_domain=400))
        x, y = d.labeled.embeddings.astype(float), d.labeled.targets
        from sklearn.linear_model import LogisticRegression

        clf = LogisticRegression().fit(x, y)
        assert clf.score(d.id_test.embeddings, d.id_test.targets) > 0.99


SMALL = TrainConfig(total_steps=200, batch_size=32, eval_every=50, bank_capacity=64)


@pytest.fixture(scope="module")
def small_data():
    return gen_synth(SynthConfig(samples_per_domain=100, test_samples_per_domain=100))


class TestTraining:
    def test_zero_lr_leaves_params(self, small_data):
        tr = Trainer(small_data, replace(SMALL, lr=0.0, total_steps=20), "erm")
        before = tr.model.flat()
        tr.run()
        assert tr.model.flat().tobytes() == before.tobytes()

    def test_erm_learns_in_distribution(self, small_data):
        _, hist = train_erm(small_data, SMALL)
        assert hist[-1]["id_acc"] >= 0.95
        assert [h["step"] for h in hist] == [50, 100, 150, 200]

    def test_deterministic(self, small_data):
        a = Trainer(small_data, replace(SMALL, total_steps=60), "okapi").run()
        b = Trainer(small_data, replace(SMALL, total_steps=60), "okapi").run()
        assert a.model.flat().tobytes() == b.model.flat().tobytes()

    def test_zero_lambda_reduces_to_erm(self, small_data):
        cfg = replace(SMALL, total_steps=80, lambda_final=0.0, record_trajectory=True)
        erm = Trainer(small_data, cfg, "erm").run()
        ok = Trainer(small_data, cfg, "okapi").run()
        assert len(erm.trajectory) == len(ok.trajectory) == 80
        for a, b in zip(erm.trajectory, ok.trajectory):
            assert a.tobytes() == b.tobytes()

    def test_strict_caliper_reduces_to_erm(self, small_data):
        cfg = replace(SMALL, total_steps=80, caliper=CaliperParams(0.5 - 1e-12, math.inf, 1.0), record_trajectory=True)
        erm = Trainer(small_data, cfg, "erm").run()
        ok = Trainer(small_data, cfg, "okapi").run()
        assert max(ok.stats.retention) == 0.0
        for a, b in zip(erm.trajectory, ok.trajectory):
            assert a.tobytes() == b.tobytes()

    def test_pairs_cross_domain(self, small_data):
        for binary in (True, False):
            tr = Trainer(small_data, replace(SMALL, total_steps=40, binary=binary, k=2), "okapi").run()
            assert tr.stats.pairs > 0 and tr.stats.pairs == tr.stats.cross_domain_pairs

    def test_invalid_config(self, small_data):
        with pytest.raises(ConfigError):
            Trainer(small_data, replace(SMALL, batch_size=128), "okapi")
        with pytest.raises(ConfigError):
            Trainer(small_data, SMALL, "dino")

    def test_history_csv(self, small_data):
        _, hist = train_erm(small_data, replace(SMALL, total_steps=50))
        lines = history_to_csv(hist).splitlines()
        assert lines[0] == ",".join(METRIC_COLUMNS) and len(lines) == 2


class TestCheckpoint:
    @pytest.mark.parametrize("method", ["erm", "okapi"])
    def test_resume_is_bitwise(self, small_data, tmp_path, method):
        cfg = replace(SMALL, total_steps=100)
        straight = Trainer(small_data, cfg, method).run()
        half = Trainer(small_data, cfg, method).run(45)
        half.save_checkpoint(tmp_path / "c.okck")
        resumed = Trainer.from_checkpoint(tmp_path / "c.okck", small_data).run()
        assert resumed.model.flat().tobytes() == straight.model.flat().tobytes()
        assert resumed.ps_model.weights.tobytes() == straight.ps_model.weights.tobytes()
        assert resumed.history == straight.history

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            read_checkpoint(p)

    def test_trailing_bytes(self, small_data, tmp_path):
        p = tmp_path / "c"
        Trainer(small_data, replace(SMALL, total_steps=5), "erm").run().save_checkpoint(p)
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            read_checkpoint(p)

import json
import os

import numpy as np
import pytest

from xsit import surface as surf
from xsit import synth
from xsit import train
from xsit.config import load_config


def small_config(**train_over):
    cfg = load_config()
    cfg["encoder"].update({"dim": 16, "depth": 1, "heads": 2, "dropout": 0.0})
    cfg["train"].update({"epochs": 3, "batch_size": 8, "lr": 1e-3,
                         "projection_period": 2})
    cfg["train"].update(train_over)
    return cfg


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("traindata")
    spec = synth.SynthSpec(mesh_order=2, patch_order=1, channels=2,
                           lesion_patches=[3, 11, 19], delta=4.0,
                           counts={"train": 16, "val": 8, "test": 8}, seed=1)
    manifest, samples = surf.load_dataset(synth.generate(spec, str(out)))
    return manifest, samples


class TestMetrics:
    def test_perfect(self):
        m = train.compute_metrics(np.array([0.9, 0.8, 0.1, 0.2]),
                                  np.array([1, 1, 0, 0]))
        assert m.bacc == 1.0 and m.f1 == 1.0
        assert (m.tp, m.fp, m.tn, m.fn) == (2, 0, 2, 0)

    def test_chance(self):
        m = train.compute_metrics(np.array([0.9, 0.9, 0.9, 0.9]),
                                  np.array([1, 1, 0, 0]))
        assert m.bacc == 0.5

    def test_against_sklearn_formulae(self):
        rng = np.random.default_rng(0)
        probs = rng.uniform(size=50)
        labels = rng.integers(0, 2, size=50)
        m = train.compute_metrics(probs, labels)
        pred = probs >= 0.5
        tpr = np.mean(pred[labels == 1])
        tnr = np.mean(~pred[labels == 0])
        assert m.bacc == pytest.approx((tpr + tnr) / 2)

    def test_threshold(self):
        m = train.compute_metrics(np.array([0.4, 0.6]), np.array([1, 0]),
                                  threshold=0.3)
        assert m.tp == 1 and m.fp == 1


class TestClassWeights:
    def test_balanced_is_unit(self):
        assert train.class_weights([0, 0, 1, 1]) == (1.0, 1.0)

    def test_inverse_frequency(self):
        c0, c1 = train.class_weights([0] * 9 + [1])
        assert c0 == pytest.approx(10 / 18)
        assert c1 == pytest.approx(10 / 2)

    def test_single_class_rejected(self):
        with pytest.raises(train.TrainError, match="both classes"):
            train.class_weights([1, 1, 1])


class TestWeightedBCE:
    def test_matches_manual(self):
        from xsit.tensor import Tensor
        p = np.array([0.9, 0.2, 0.7])
        y = np.array([1, 0, 0])
        loss = train.weighted_bce(Tensor(p), y, (2.0, 3.0)).item()
        manual = -(3.0 * np.log(0.9) + 2.0 * np.log(0.8)
                   + 2.0 * np.log(0.3)) / 3
        assert loss == pytest.approx(manual, rel=1e-5)

    def test_clamps_extremes(self):
        from xsit.tensor import Tensor
        loss = train.weighted_bce(Tensor(np.array([0.0])), np.array([1]))
        assert np.isfinite(loss.item())

    def test_gradient_direction(self):
        from xsit.tensor import Tensor
        p = Tensor(np.array([0.3]), requires_grad=True)
        train.weighted_bce(p, np.array([1])).backward()
        assert p.grad[0] < 0  # push probability up for a positive


class TestTrainRun:
    def test_loss_decreases_and_history(self, tiny_data, tmp_path):
        manifest, samples = tiny_data
        cfg = small_config(epochs=4)
        model, history = train.train_run(cfg, manifest, samples,
                                         str(tmp_path))
        epochs = [h for h in history if h[0] != "final"]
        assert len(epochs) == 4
        assert history[-1][0] == "final"
        assert epochs[-1][1] < epochs[0][1]
        for f in ("model.xck", "metrics.csv", "config.resolved.json",
                  "model.xck.provenance.json"):
            assert os.path.exists(tmp_path / f)

    def test_deterministic_given_seed(self, tiny_data):
        manifest, samples = tiny_data
        cfg = small_config(epochs=2)
        m1, h1 = train.train_run(cfg, manifest, samples)
        m2, h2 = train.train_run(cfg, manifest, samples)
        assert h1 == h2
        for k, t in m1.trainable().items():
            assert t.data.tobytes() == m2.trainable()[k].data.tobytes()

    def test_seed_changes_outcome(self, tiny_data):
        manifest, samples = tiny_data
        m1, _ = train.train_run(small_config(epochs=1), manifest, samples)
        m2, _ = train.train_run(small_config(epochs=1, seed=9), manifest,
                                samples)
        assert m1.params["patch_proj.w"].data.tobytes() != \
            m2.params["patch_proj.w"].data.tobytes()

    def test_prototypes_are_real_patches(self, tiny_data):
        # after training, every prototype equals some positive training
        # subject's embedded patch exactly
        manifest, samples = tiny_data
        model, _ = train.train_run(small_config(), manifest, samples)
        from xsit import psp
        pos = sorted([surf.normalize(s, model.stats, model.channels)
                      for s in samples["train"] if s.label == 1],
                     key=lambda s: s.subject_id)
        emb = psp.encode_samples(pos, model.params, model.enc_cfg,
                                 model.partition(), model.hemispheres)
        ids = [s.subject_id for s in pos]
        for i, prov in enumerate(model.bank.provenance):
            assert prov is not None
            c = ids.index(prov[0])
            np.testing.assert_array_equal(model.bank.xi.data[i], emb[c, i])

    def test_provenance_restricted_to_positives(self, tiny_data):
        manifest, samples = tiny_data
        model, _ = train.train_run(small_config(), manifest, samples)
        pos_ids = {s.subject_id for s in samples["train"] if s.label == 1}
        assert {p[0] for p in model.bank.provenance} <= pos_ids

    def test_zero_epoch_run(self, tiny_data):
        manifest, samples = tiny_data
        model, history = train.train_run(small_config(epochs=0), manifest,
                                         samples)
        assert history == []
        assert all(p is None for p in model.bank.provenance)

    def test_empty_train_split_rejected(self, tiny_data):
        manifest, samples = tiny_data
        with pytest.raises(train.TrainError, match="nonempty"):
            train.train_run(small_config(), manifest,
                            {"train": [], "val": samples["val"]})

    def test_evaluate_learns_separation(self, tiny_data):
        # delta=4 planted effect: even a tiny model should beat chance on val
        manifest, samples = tiny_data
        cfg = small_config(epochs=6)
        model, _ = train.train_run(cfg, manifest, samples)
        rep = train.evaluate(model, samples["test"])
        assert rep.bacc > 0.5


class TestHistoryCsv:
    def test_roundtrip_floats(self, tmp_path):
        path = str(tmp_path / "h.csv")
        train.write_history_csv(path, [(0, 0.5, 0.75, 0.8),
                                       ("final", "", 1.0, 1.0)])
        with open(path) as f:
            lines = f.read().splitlines()
        assert lines[0] == "epoch,train_loss,val_bacc,val_f1"
        assert float(lines[1].split(",")[1]) == 0.5
        assert lines[2].startswith("final,")


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tiny_data, tmp_path):
        manifest, samples = tiny_data
        model, _ = train.train_run(small_config(), manifest, samples)
        path = str(tmp_path / "m.xck")
        train.save_checkpoint(path, model)
        again = train.load_checkpoint(path)
        for k, t in model.trainable().items():
            assert t.data.tobytes() == again.trainable()[k].data.tobytes()
        assert again.bank.provenance == model.bank.provenance
        assert again.stats == model.stats
        p1 = train.predict_probs(model,
                                 [surf.normalize(s, model.stats,
                                                 model.channels)
                                  for s in samples["test"]])
        p2 = train.predict_probs(again,
                                 [surf.normalize(s, again.stats,
                                                 again.channels)
                                  for s in samples["test"]])
        assert p1.tobytes() == p2.tobytes()

    def test_provenance_sidecar_is_json(self, tiny_data, tmp_path):
        manifest, samples = tiny_data
        model, _ = train.train_run(small_config(), manifest, samples)
        path = str(tmp_path / "m.xck")
        train.save_checkpoint(path, model)
        with open(path + ".provenance.json") as f:
            side = json.load(f)
        assert len(side) == model.bank.xi.data.shape[0]

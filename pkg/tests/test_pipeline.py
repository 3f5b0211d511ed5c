import numpy as np
import pytest

from sarbench.attacks import AttackConfig
from sarbench.augment import RandomizationConfig
from sarbench.dataset import GeometryGrid, SarDataset
from sarbench.errors import TrainingDivergedError, ValidationError
from sarbench.nn import LossConfig, Model, ModelConfig
from sarbench.pipeline import (
    Ensemble,
    EvalResult,
    ExperimentConfig,
    PreparedDataset,
    ScheduleConfig,
    bag_predict,
    evaluate,
    make_predictor,
    prepare_plain_images,
    train_ensemble,
    train_model,
    ttda_predict,
    write_predictions,
    write_train_log,
)
from sarbench.scene import SensorModel, default_sensor

TOY_MODEL = ModelConfig(
    input_hw=(16, 16), n_classes=2, stages=((4, 2), (8, 2)),
    skip_connections=False, dropout_rate=0.4, norm=True,
)


def toy_dataset(n_per_class=24, seed=0):
    """Linearly separable 2-class set: bright blob top-left vs bottom-right."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per_class
    sigs = np.zeros((n, 16, 16), dtype=np.complex64)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        label = i % 2
        labels[i] = label
        img = 0.05 * rng.random((16, 16))
        r0, c0 = (2, 2) if label == 0 else (10, 10)
        img[r0 : r0 + 4, c0 : c0 + 4] += 1.0 + 0.2 * rng.random((4, 4))
        sigs[i] = img.astype(np.complex64)
    sensor = SensorModel(image_height=16, image_width=16)
    return SarDataset(
        signatures=sigs,
        masks=np.zeros((n, 16, 16), dtype=bool),
        labels=labels,
        azimuths_deg=np.zeros(n, dtype=np.float32),
        depressions_deg=np.full(n, 17.0, dtype=np.float32),
        class_names=["class_00", "class_01"],
        sensor=sensor,
    )


def base_config(**kw):
    defaults = dict(
        model=TOY_MODEL,
        epochs=5,
        batch_size=16,
        bag_size=1,
        ttda_variants=0,
        schedule=ScheduleConfig(lr_max=0.02),
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestExperimentConfig:
    def test_paper_defaults(self):
        cfg = ExperimentConfig(model=TOY_MODEL)
        assert cfg.epochs == 150
        assert cfg.batch_size == 128
        assert cfg.weight_decay == 1e-4
        assert cfg.bag_size == 10
        assert cfg.ttda_variants == 20

    def test_flags_drive_effective_loss(self):
        cfg = base_config(cosine_loss=True, label_smoothing=True)
        eff = cfg.effective_loss()
        assert eff.kind == "cosine"
        assert eff.label_smoothing_alpha == 0.1
        off = base_config().effective_loss()
        assert off.kind == "cross_entropy"
        assert off.label_smoothing_alpha == 0.0

    def test_dropout_flag_gates_model_rate(self):
        assert base_config().effective_model().dropout_rate == 0.0
        assert base_config(dropout=True).effective_model().dropout_rate == 0.4

    def test_json_round_trip(self):
        cfg = base_config(
            randomization=RandomizationConfig(),
            attack=AttackConfig(epsilon=0.5),
            adversarial_training=True,
            mixup=True,
        )
        doc = cfg.to_dict()
        back = ExperimentConfig.from_dict(doc)
        assert back == cfg

    def test_every_technique_flag_composes(self):
        cfg = base_config(
            label_smoothing=True, mixup=True, cosine_loss=True, gaussian_noise=True,
            dropout=True, adversarial_training=True,
            attack=AttackConfig(epsilon=0.1),
        )
        ds = toy_dataset()
        model, logs = train_model(cfg, ds, seed=0)
        assert len(logs) == cfg.epochs


class TestTrainModel:
    def test_separable_toy_reaches_high_accuracy(self):
        # Solvable by construction; generous bar well under 30 epochs.
        ds = toy_dataset()
        cfg = base_config(epochs=20)
        model, logs = train_model(cfg, ds, seed=1)
        assert logs[-1].train_accuracy >= 0.99

    def test_bit_identical_retrain(self):
        ds = toy_dataset()
        cfg = base_config(epochs=3)
        m1, _ = train_model(cfg, ds, seed=5)
        m2, _ = train_model(cfg, ds, seed=5)
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k], m2.params[k])

    def test_divergence_reports_epoch(self):
        ds = toy_dataset()
        cfg = base_config(epochs=4, schedule=ScheduleConfig(lr_max=1e9))
        with pytest.raises(TrainingDivergedError) as err:
            train_model(cfg, ds, seed=0)
        assert 0 <= err.value.epoch < 4

    def test_empty_dataset_rejected(self):
        ds = toy_dataset()
        empty = SarDataset(
            ds.signatures[:0], ds.masks[:0], ds.labels[:0],
            ds.azimuths_deg[:0], ds.depressions_deg[:0], ds.class_names, ds.sensor,
        )
        with pytest.raises(ValidationError):
            train_model(base_config(), empty, seed=0)

    def test_log_csv_format(self, tmp_path):
        ds = toy_dataset()
        model, logs = train_model(base_config(epochs=3), ds, seed=2)
        path = tmp_path / "log.csv"
        write_train_log(logs, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,train_accuracy,lr,momentum"
        assert len(lines) == 4

    def test_all_disabled_trains_on_plain_images(self):
        # The no-augmentation path feeds exactly the prepared raw renders.
        from sarbench.pipeline import _epoch_images

        ds = toy_dataset()
        cfg = base_config()
        plain = prepare_plain_images(ds)
        sigs = [ds.signature_at(i) for i in range(len(ds))]
        for epoch in (0, 1, 7):
            out = _epoch_images(cfg, ds, sigs, plain, seed=3, epoch=epoch)
            assert out is plain

    def test_shift_only_mode_permutes_pixels(self):
        from sarbench.pipeline import _epoch_images

        ds = toy_dataset()
        cfg = base_config(random_shift_only=True)
        plain = prepare_plain_images(ds)
        sigs = [ds.signature_at(i) for i in range(len(ds))]
        out = _epoch_images(cfg, ds, sigs, plain, seed=3, epoch=0)
        assert out.shape == plain.shape
        for i in range(4):
            assert sorted(out[i].ravel()) == sorted(plain[i].ravel())


class TestBagPredict:
    def test_single_member_equals_model_output(self):
        ds = toy_dataset()
        model, _ = train_model(base_config(epochs=3), ds, seed=1)
        x = prepare_plain_images(ds)[:8][:, None]
        from sarbench.pipeline import predict_proba

        np.testing.assert_array_equal(bag_predict([model], x), predict_proba(model, x))

    def test_identical_members_average_to_same(self):
        ds = toy_dataset()
        model, _ = train_model(base_config(epochs=3), ds, seed=1)
        x = prepare_plain_images(ds)[:8][:, None]
        single = bag_predict([model], x)
        triple = bag_predict([model, model, model], x)
        np.testing.assert_allclose(triple, single, atol=1e-6)

    def test_mismatched_class_count_rejected(self):
        m2 = Model(TOY_MODEL, seed=0)
        m3 = Model(ModelConfig(input_hw=(16, 16), n_classes=3, stages=((4, 2),)), seed=0)
        with pytest.raises(ValidationError):
            Ensemble([m2, m3], seeds=[0, 1])

    def test_distinct_seeds_give_distinct_members(self):
        ds = toy_dataset()
        ens, _ = train_ensemble(base_config(epochs=3, bag_size=3), ds, seed=9)
        for i in range(len(ens.models)):
            for j in range(i + 1, len(ens.models)):
                diffs = [
                    not np.array_equal(ens.models[i].params[k], ens.models[j].params[k])
                    for k in ens.models[i].params
                ]
                assert any(diffs)


class TestTtda:
    def test_constant_model_unaffected(self):
        # A model that ignores its input: TTDA output equals plain output.
        model = Model(TOY_MODEL, seed=0)
        model.params["stage0.conv.w"][:] = 0.0
        img = np.random.default_rng(0).random((16, 16), dtype=np.float32)
        plain = bag_predict([model], img[None, None])[0]
        averaged = ttda_predict(model, img, 20, (-5, 5), np.random.default_rng(1))
        np.testing.assert_allclose(averaged, plain, atol=1e-6)

    def test_output_is_probability_vector(self):
        model = Model(TOY_MODEL, seed=3)
        img = np.random.default_rng(2).random((16, 16), dtype=np.float32)
        out = ttda_predict(model, img, 7, (-5, 5), np.random.default_rng(4))
        assert out.shape == (2,)
        assert out.sum() == pytest.approx(1.0, abs=1e-6)

    def test_predictor_with_ttda_is_deterministic(self):
        model = Model(TOY_MODEL, seed=3)
        x = np.random.default_rng(5).random((6, 16, 16), dtype=np.float32)
        p = make_predictor(model, ttda_variants=5, seed=11)
        np.testing.assert_array_equal(p(x[:, None]), p(x[:, None]))


class TestEvaluate:
    def _prepared(self, n=30, k=3):
        rng = np.random.default_rng(8)
        return PreparedDataset(
            images=rng.random((n, 16, 16), dtype=np.float32),
            labels=rng.integers(0, k, n),
        )

    def test_oracle_predictor_scores_one(self):
        prep = self._prepared()
        k = 3

        def oracle(batch4d):
            # indexes align because evaluate passes records in order
            out = np.eye(k)[prep.labels[: len(batch4d)]]
            return out

        res = evaluate(oracle, prep)
        assert res.accuracy == 1.0
        assert np.all(res.confusion == np.diag(np.bincount(prep.labels, minlength=k)))

    def test_weighted_per_class_mean_equals_overall(self):
        prep = self._prepared()
        rng = np.random.default_rng(9)

        def noisy(batch4d):
            return rng.dirichlet(np.ones(3), size=len(batch4d))

        res = evaluate(noisy, prep)
        counts = np.bincount(prep.labels, minlength=3)
        weighted = np.sum(res.per_class_accuracy * counts) / counts.sum()
        assert abs(weighted - res.accuracy) < 1e-12

    def test_confusion_rows_sum_to_class_counts(self):
        prep = self._prepared()
        res = evaluate(lambda b: np.eye(3)[np.zeros(len(b), dtype=int)], prep)
        counts = np.bincount(prep.labels, minlength=3)
        np.testing.assert_array_equal(res.confusion.sum(axis=1), counts)

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValidationError):
            evaluate(lambda b: b, PreparedDataset(np.zeros((0, 16, 16)), np.zeros(0, int)))


class TestPredictionsCsv:
    def test_format_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(3), size=5)
        labels = rng.integers(0, 3, 5)
        path = tmp_path / "pred.csv"
        write_predictions(probs, labels, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "record_id,true_class,predicted_class,prob_0,prob_1,prob_2"
        assert len(lines) == 6
        cells = lines[1].split(",")
        assert int(cells[0]) == 0
        parsed = [float(c) for c in cells[3:]]
        np.testing.assert_allclose(parsed, probs[0], atol=5e-7)

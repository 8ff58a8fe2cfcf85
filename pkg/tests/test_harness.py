import json

import numpy as np
import pytest

from ftlwss import harness
from ftlwss import tensornet as tn


def tiny_config(**overrides):
    """A configuration small enough for per-test dataset builds."""
    base = harness.ExperimentConfig(
        seed=7,
        sensing=harness.SensingConfig(n_subbands=8, n_cosets=3, n_snapshots=8),
        domains=harness.DomainsConfig(source=3, targets={"T1": 1, "T2": 2, "T3": 4, "T4": 5}),
        net=harness.NetConfig(conv1_filters=4, conv2_filters=3, hidden_units=8),
        training=harness.TrainingConfig(n_train=24, n_val=8, n_test=8, max_epochs=2,
                                        patience=2, restarts=1, restart_epochs=1),
        ftl=harness.FtlStageConfig(rounds=2, samples_per_su=8, zero_shot_domain="T2"),
        evaluation=harness.EvalConfig(snr_grid=(10.0,), n_test=8),
    )
    from dataclasses import replace
    return replace(base, **overrides) if overrides else base


class TestConfig:
    def test_json_round_trip(self):
        cfg = harness.scaled_default()
        again = harness.ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        assert again == cfg

    def test_rejects_unknown_keys(self):
        with pytest.raises(ValueError):
            harness.ExperimentConfig.from_dict({"sensing": {"warp_factor": 9}})
        with pytest.raises(ValueError):
            harness.ExperimentConfig.from_dict({"bogus_section": {}})

    def test_rejects_unknown_stage(self):
        with pytest.raises(ValueError):
            harness.ExperimentConfig(stages=("train", "deploy"))

    def test_rejects_sub_nyquist_violation(self):
        with pytest.raises(ValueError):
            harness.SensingConfig(n_subbands=8, n_cosets=8)

    def test_rejects_occupancy_out_of_range(self):
        with pytest.raises(ValueError):
            harness.ExperimentConfig(
                sensing=harness.SensingConfig(n_subbands=8, n_cosets=3),
                domains=harness.DomainsConfig(source=3, targets={"T1": 9}))

    def test_rejects_bad_zero_shot_domain(self):
        with pytest.raises(ValueError):
            harness.ExperimentConfig(ftl=harness.FtlStageConfig(zero_shot_domain="T9"))

    def test_threshold_in_open_interval(self):
        with pytest.raises(ValueError):
            harness.EvalConfig(threshold=1.0)

    def test_domain_lookup(self):
        cfg = harness.scaled_default()
        assert cfg.domains.n_active("S") == 7
        assert cfg.domains.n_active("T4") == 9
        with pytest.raises(ValueError):
            cfg.domains.n_active("T7")

    def test_full_scale_values(self):
        cfg = harness.full_scale()
        assert cfg.sensing.n_subbands == 40
        assert cfg.sensing.n_cosets == 8
        assert cfg.sensing.n_snapshots == 64
        assert cfg.domains.targets == {"T1": 8, "T2": 12, "T3": 16, "T4": 24}
        assert cfg.domains.source == 20
        assert cfg.prune.ratio == 0.9
        assert cfg.training.n_train == 12000
        # full-size sensing window: 64 * 40 / 320 MHz = 8 microseconds
        assert cfg.sensing.duration_s == pytest.approx(8e-6)

    def test_config_hash_stable(self):
        a = harness.config_hash(harness.scaled_default())
        b = harness.config_hash(harness.scaled_default())
        assert a == b
        c = harness.config_hash(tiny_config())
        assert a != c


class TestBuildDataset:
    def test_noiseless_empty_spectrum_is_all_zero(self):
        cfg = tiny_config(
            domains=harness.DomainsConfig(source=3, targets={"T1": 0, "T2": 2, "T3": 4, "T4": 5}))
        ds = harness.build_dataset(cfg, "T1", 1, np.random.default_rng(0), noiseless=True)
        assert np.all(ds.features == 0)
        assert np.all(ds.labels == 0)

    def test_same_seed_bit_identical(self):
        cfg = tiny_config()
        a = harness.build_dataset(cfg, "T3", 6, harness.dataset_rng(cfg, "T3", "train", 10.0))
        b = harness.build_dataset(cfg, "T3", 6, harness.dataset_rng(cfg, "T3", "train", 10.0))
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_purpose_streams_differ(self):
        cfg = tiny_config()
        a = harness.build_dataset(cfg, "T3", 6, harness.dataset_rng(cfg, "T3", "train", 10.0))
        b = harness.build_dataset(cfg, "T3", 6, harness.dataset_rng(cfg, "T3", "test", 10.0))
        assert not np.array_equal(a.features, b.features)

    def test_labels_have_expected_popcount(self):
        cfg = tiny_config()
        ds = harness.build_dataset(cfg, "T4", 10, harness.dataset_rng(cfg, "T4", "val", 10.0))
        assert np.all(ds.labels.sum(axis=1) == 5)

    def test_noiseless_single_pu_argmax(self):
        # multicoset end-to-end property through the dataset builder
        cfg = tiny_config()
        ds = harness.build_dataset(cfg, "T1", 20, np.random.default_rng(3),
                                   noiseless=True, keep_spectra=True)
        from ftlwss import multicoset as mc
        pattern = cfg.sensing.pattern()
        pinv = mc.pseudo_inverse(mc.build_measurement_matrix(pattern))
        reorder = mc.band_order(cfg.sensing.n_subbands)
        for i in range(20):
            xhat = (pinv @ ds.coset_spectra[i].astype(np.complex128))[reorder]
            energy_row = int(np.argmax(np.sum(np.abs(xhat) ** 2, axis=1)))
            assert energy_row == int(np.flatnonzero(ds.labels[i])[0])

    def test_feature_entries_unit_or_zero(self):
        cfg = tiny_config()
        ds = harness.build_dataset(cfg, "T2", 4, np.random.default_rng(1))
        mags = np.hypot(ds.features[..., 0], ds.features[..., 1])
        assert np.all((np.abs(mags - 1) < 1e-5) | (mags < 1e-5))

    def test_rejects_zero_count(self):
        with pytest.raises(ValueError):
            harness.build_dataset(tiny_config(), "T1", 0, np.random.default_rng(0))


class TestDatasetPersistence:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config()
        ds = harness.build_dataset(cfg, "T3", 5, np.random.default_rng(4))
        path = tmp_path / "data.bin"
        harness.save_dataset(ds, path, seed=cfg.seed, config_sha256=harness.config_hash(cfg))
        loaded = harness.load_dataset(path)
        assert np.array_equal(loaded.features, ds.features)
        assert np.array_equal(loaded.labels, ds.labels)

    def test_sidecar_contents(self, tmp_path):
        cfg = tiny_config()
        ds = harness.build_dataset(cfg, "T3", 5, np.random.default_rng(4))
        path = tmp_path / "data.bin"
        harness.save_dataset(ds, path, seed=11, config_sha256="ab" * 32)
        sidecar = json.loads((tmp_path / "data.bin.json").read_text())
        assert sidecar["count"] == 5
        assert sidecar["feature_shape"] == [8, 8, 2]
        assert sidecar["label_bits_per_sample"] == 8
        assert sidecar["seed"] == 11
        assert sidecar["config_sha256"] == "ab" * 32


class TestPrediction:
    def test_threshold_rule(self):
        cfg = tiny_config()
        spec = cfg.detector_spec()
        weights = tn.init_weights(spec, np.random.default_rng(0))
        for name in tn.PARAM_NAMES:
            getattr(weights, name)[:] = 0
        # zero weights produce 0.5 everywhere; inclusive threshold keeps ones
        feature = np.zeros((spec.in_rows, spec.in_cols, 2), dtype=np.float32)
        assert harness.predict_occupancy(spec, weights, feature, 0.5).tolist() == [1] * 8
        assert harness.predict_occupancy(spec, weights, feature, 0.51).tolist() == [0] * 8

    def test_monotone_in_threshold(self):
        cfg = tiny_config()
        spec = cfg.detector_spec()
        weights = tn.init_weights(spec, np.random.default_rng(1))
        ds = harness.build_dataset(cfg, "T3", 6, np.random.default_rng(2))
        low = harness.predict_occupancy(spec, weights, ds.features, 0.3)
        high = harness.predict_occupancy(spec, weights, ds.features, 0.7)
        assert np.all(high <= low)

    def test_rejects_bad_threshold(self):
        cfg = tiny_config()
        spec = cfg.detector_spec()
        weights = tn.init_weights(spec, np.random.default_rng(0))
        with pytest.raises(ValueError):
            harness.predict_occupancy(spec, weights, np.zeros((8, 8, 2)), 0.0)


class TestPredictionAccuracy:
    def test_perfect(self):
        labels = np.array([[1, 0, 1], [0, 0, 1]])
        assert harness.prediction_accuracy(labels, labels) == 1.0

    def test_38_of_40(self):
        labels = np.zeros((1, 40), dtype=np.int8)
        preds = labels.copy()
        preds[0, :2] = 1
        assert harness.prediction_accuracy(preds, labels) == pytest.approx(0.95)

    def test_all_zero_predictor_base_rate(self):
        # on a K-occupied domain the all-zero predictor scores (L - K) / L
        cfg = tiny_config()
        ds = harness.build_dataset(cfg, "T4", 20, np.random.default_rng(5))
        zeros = np.zeros_like(ds.labels)
        assert harness.prediction_accuracy(zeros, ds.labels) == pytest.approx((8 - 5) / 8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            harness.prediction_accuracy(np.zeros((2, 4)), np.zeros((2, 5)))


class TestEmitResults:
    def rows(self):
        return [
            harness.SweepRow("T1", "rt", 10.0, 0.99, 100),
            harness.SweepRow("T1", "ftl", 10.0, 0.95, 100),
            harness.SweepRow("T1", "somp", 0.0, 0.80, 100),
        ]

    def test_empty_rows_header_only(self, tmp_path):
        path = tmp_path / "results.csv"
        harness.emit_results([], path)
        assert path.read_text() == "domain,scheme,snr_db,p_acc,n_test\n"

    def test_single_row(self, tmp_path):
        path = tmp_path / "results.csv"
        harness.emit_results(self.rows()[:1], path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[1] == "T1,rt,10,0.990000,100"

    def test_summary_ranking_and_ratios(self, tmp_path):
        csv_path = tmp_path / "results.csv"
        json_path = tmp_path / "summary.json"
        harness.emit_results(self.rows(), csv_path, json_path, table_snr_db=10.0)
        summary = json.loads(json_path.read_text())
        t1 = summary["domains"]["T1"]
        assert t1["best_scheme"] == "rt"
        assert t1["schemes"]["rt"]["ratio_to_best"] == 1.0
        assert t1["schemes"]["rt"]["rank"] == 1
        assert t1["schemes"]["ftl"]["rank"] == 2
        assert t1["schemes"]["ftl"]["ratio_to_best"] == pytest.approx(0.95 / 0.99, abs=1e-6)
        # the 0 dB SOMP row is not part of the 10 dB table
        assert "somp" not in t1["schemes"]

    def test_csv_byte_identical_across_runs(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        harness.emit_results(self.rows(), a)
        harness.emit_results(self.rows(), b)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_bad_accuracy(self):
        with pytest.raises(ValueError):
            harness.SweepRow("T1", "rt", 10.0, 1.2, 10)


class TestPipeline:
    def test_tiny_pipeline_end_to_end(self, tmp_path):
        cfg = tiny_config()
        result = harness.run_pipeline(cfg, tmp_path)
        for name in ("config.json", "model_source.bin", "model_pruned.bin",
                     "model_ftl.bin", "model_tl.bin", "model_ftl_zero_shot.bin",
                     "prune_report.json", "results.csv", "summary.json"):
            assert (tmp_path / name).exists(), name
        for domain in ("T1", "T2", "T3", "T4"):
            assert (tmp_path / f"model_rt_{domain}.bin").exists()
        schemes = {(r.domain, r.scheme) for r in result.rows}
        assert ("T4", "ftl") in schemes and ("T4", "somp") in schemes
        assert ("T2", "ftl_zero_shot") in schemes
        assert ("T1", "ftl_zero_shot") not in schemes
        assert result.source_p_acc_unpruned is not None
        report = json.loads((tmp_path / "prune_report.json").read_text())
        assert "p_acc_source_pruned_finetuned" in report

    def test_stage_gating_without_ftl(self, tmp_path):
        from dataclasses import replace
        cfg = replace(tiny_config(), stages=("rt", "eval"))
        result = harness.run_pipeline(cfg, tmp_path)
        schemes = {r.scheme for r in result.rows}
        assert schemes == {"rt", "somp"}
        assert not (tmp_path / "model_ftl.bin").exists()

    def test_frozen_convs_after_adaptation(self, tmp_path):
        cfg = tiny_config()
        result = harness.run_pipeline(cfg, tmp_path)
        assert np.array_equal(result.ftl_model.conv1_w, result.pruned_model.conv1_w)
        assert np.array_equal(result.ftl_model.conv2_w, result.pruned_model.conv2_w)
        # the pruned sparsity pattern survives adaptation
        assert np.all(result.ftl_model.fc1_w[~result.pruned_model.prune_mask] == 0)

    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = tiny_config()
        harness.run_pipeline(cfg, tmp_path / "a")
        harness.run_pipeline(cfg, tmp_path / "b")
        for name in ("results.csv", "summary.json", "model_ftl.bin", "model_source.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

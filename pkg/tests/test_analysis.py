import logging
import os

import numpy as np
import pytest

from config import ConfigError
from conftest import read_csv
from repository.dataset_repository import SeriesDataset
from service.analysis_service import (
    SWEEP_COLUMNS, SWEEP_PRESETS, AnalysisError, AnalysisService, channel_vs_patch_nmi, count_macs, histogram_bins,
    nmi, nmi_matrix, parse_sweep_values, patch_samples)
from service.model import ModelConfig
from service.training_service import TrainingService


def dataset_of(values):
    values = np.asarray(values, dtype=np.float64)
    steps = values.shape[1]
    return SeriesDataset(names=tuple(f"v{i}" for i in range(len(values))), values=values,
                         borders={'train': (0, steps)})


def assert_valid_matrix(matrix):
    np.testing.assert_allclose(np.diag(matrix.values), 1.0, atol=1e-9)
    np.testing.assert_allclose(matrix.values, matrix.values.T, atol=1e-9)
    assert np.all((matrix.values >= 0) & (matrix.values <= 1))


class TestNmi:
    def test_self_is_one(self):
        x = np.random.default_rng(0).standard_normal(500)
        assert nmi(x, x) == 1.0

    def test_independent_uniforms(self):
        rng = np.random.default_rng(23)
        assert nmi(rng.uniform(size=10000), rng.uniform(size=10000), bins=16) < 0.05

    def test_shuffle_loses_information(self):
        rng = np.random.default_rng(1)
        x = np.sin(np.arange(2000) / 10.0) + 0.1 * rng.standard_normal(2000)
        shuffled = rng.permutation(x)
        assert nmi(x, shuffled) < nmi(x, x)
        assert nmi(x, 2 * x + 1) > nmi(x, shuffled)

    def test_constant_series_scores_zero(self):
        x = np.random.default_rng(2).standard_normal(100)
        assert nmi(np.zeros(100), x) == 0.0
        assert nmi(np.zeros(100), np.ones(100)) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(AnalysisError, match="equal length"):
            nmi(np.zeros(10), np.zeros(11))

    def test_too_few_samples_for_bins(self):
        with pytest.raises(AnalysisError):
            nmi(np.arange(5.0), np.arange(5.0)[::-1], bins=16)

    def test_bin_rule(self):
        assert histogram_bins(100) == 10
        assert histogram_bins(101) == 11
        assert histogram_bins(1_000_000) == 64
        assert histogram_bins(1_000_000, max_bins=32) == 32


class TestNmiMatrix:
    def test_invariants(self):
        series = np.random.default_rng(3).standard_normal((4, 900))
        series[1] = series[0] ** 2
        assert_valid_matrix(nmi_matrix(series, ['a', 'b', 'c', 'd']))

    def test_rows_carry_labels(self):
        matrix = nmi_matrix(np.random.default_rng(4).standard_normal((2, 100)), ['x', 'y'])
        rows = matrix.rows()
        assert [row[0] for row in rows] == ['x', 'y']
        assert rows[0][1] == 1.0
        assert matrix.bin_count == 10


class TestChannelVsPatch:
    def test_duplicated_variable(self):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal(2000), rng.standard_normal(2000)
        channels, patches = channel_vs_patch_nmi(dataset_of([a, a, b]), patch_len=4, stride=4, lookback=16)
        assert channels.values[0, 1] == pytest.approx(1.0)
        assert_valid_matrix(channels)
        assert_valid_matrix(patches)

    def test_white_noise_is_near_identity(self):
        values = np.random.default_rng(6).standard_normal((3, 20000))
        channels, patches = channel_vs_patch_nmi(dataset_of(values), patch_len=4, stride=4, lookback=16)
        off_diagonal = ~np.eye(3, dtype=bool)
        assert np.all(channels.values[off_diagonal] < 0.1)

        # the padding patch repeats the last real value, so it is excluded
        real = patches.values[:-1, :-1]
        assert np.all(real[~np.eye(len(real), dtype=bool)] < 0.1)

    def test_smooth_unrelated_variables_favor_patches(self):
        t = np.arange(20000)
        values = [np.sin(2 * np.pi * t / period) for period in (97.3, 61.7, 151.1)]
        channels, patches = channel_vs_patch_nmi(dataset_of(values), patch_len=4, stride=4, lookback=16,
                                                 max_bins=32)
        assert patches.mean_off_diagonal() > channels.mean_off_diagonal() + 0.2
        assert_valid_matrix(channels)
        assert_valid_matrix(patches)

    def test_labels(self):
        values = np.random.default_rng(7).standard_normal((2, 300))
        channels, patches = channel_vs_patch_nmi(dataset_of(values), patch_len=4, stride=2, lookback=16)
        assert channels.labels == ('v0', 'v1')
        assert patches.labels == tuple(f"patch_{i}" for i in range(8))

    def test_needs_two_variables(self):
        with pytest.raises(AnalysisError, match="at least 2 variables"):
            channel_vs_patch_nmi(dataset_of(np.zeros((1, 100))), 4, 2, 16)

    def test_variable_out_of_range(self):
        with pytest.raises(AnalysisError):
            channel_vs_patch_nmi(dataset_of(np.random.default_rng(8).standard_normal((2, 100))), 4, 2, 16,
                                 variable=2)


class TestPatchSamples:
    def test_shape_and_order(self):
        series = np.arange(100.0)
        samples = patch_samples(series, patch_len=4, stride=2, lookback=16)
        windows = len(range(0, 100 - 16 + 1, 4))
        assert samples.shape == (8, windows * 4)
        np.testing.assert_array_equal(samples[0, :8], np.arange(8.0))
        np.testing.assert_array_equal(samples[1, :4], [2.0, 3.0, 4.0, 5.0])

    def test_padding_patch(self):
        samples = patch_samples(np.arange(16.0), patch_len=4, stride=2, lookback=16)
        np.testing.assert_array_equal(samples[-1], [14.0, 15.0, 15.0, 15.0])

    def test_series_shorter_than_lookback(self):
        with pytest.raises(AnalysisError):
            patch_samples(np.zeros(10), 4, 2, 16)


class TestCountMacs:
    def test_smallest_config_by_hand(self):
        # N = 2, D_b = 1
        report = count_macs(ModelConfig(lookback=2, horizon=1, patch_len=2, stride=2, dim=2, kernel=2))
        assert report.num_patches == 2
        assert (report.embedding, report.depthwise, report.pointwise) == (8, 4, 4)
        assert (report.linear_head, report.mlp_head) == (4, 6)
        assert report.per_variable == 26

    def test_doubling_patches(self):
        small = count_macs(ModelConfig(lookback=7, horizon=4, patch_len=1, stride=1, dim=16, kernel=4))
        large = count_macs(ModelConfig(lookback=15, horizon=4, patch_len=1, stride=1, dim=16, kernel=4))
        assert (small.num_patches, large.num_patches) == (8, 16)
        assert large.pointwise == 4 * small.pointwise
        assert large.depthwise == 2 * small.depthwise
        assert large.embedding == 2 * small.embedding
        assert large.standard_conv_reference == 4 * small.standard_conv_reference

    def test_heads_scale_with_horizon(self):
        short = count_macs(ModelConfig(lookback=32, horizon=8, patch_len=8, stride=4, dim=16, kernel=4))
        long = count_macs(ModelConfig(lookback=32, horizon=16, patch_len=8, stride=4, dim=16, kernel=4))
        assert long.linear_head == 2 * short.linear_head
        f = short.num_patches * 4
        assert short.mlp_head == f * 16 + 16 * 8
        assert long.mlp_head == f * 32 + 32 * 16
        assert long.depthwise == short.depthwise

    def test_depthwise_scales_with_kernel_and_block_dim(self):
        base = count_macs(ModelConfig(lookback=32, horizon=8, patch_len=8, stride=4, dim=16, kernel=4))
        wide = count_macs(ModelConfig(lookback=32, horizon=8, patch_len=8, stride=4, dim=32, kernel=4))
        assert wide.depthwise == 2 * base.depthwise
        assert wide.pointwise == 2 * base.pointwise

    def test_long_horizon_benchmark_config(self):
        cfg = ModelConfig(lookback=336, horizon=720, patch_len=16, stride=8, dim=256, kernel=8)
        report = count_macs(cfg, num_variables=7)
        assert report.num_patches == 42
        assert report.embedding == 172_032
        assert report.depthwise == 10_752
        assert report.pointwise == 56_448
        assert report.linear_head == 7_741_440
        assert report.mlp_head == 2_972_160
        assert report.per_variable == 10_952_832
        assert report.per_forecast == 76_669_824

    def test_total_is_sum_of_stages(self):
        report = count_macs(ModelConfig(lookback=96, horizon=24, patch_len=16, stride=8, dim=64, kernel=8), 3)
        stages = dict(report.rows())
        assert stages['total_per_variable'] == sum(
            stages[name] for name in ('embedding', 'depthwise', 'pointwise', 'linear_head', 'mlp_head'))
        assert stages['total_per_forecast'] == 3 * stages['total_per_variable']
        assert report.echo() == {'N': 12, 'P': 16, 'D': 64, 'K': 8, 'T': 24, 'M': 3}

    def test_stages_not_built_count_zero(self):
        linear = count_macs(ModelConfig(lookback=32, horizon=8, patch_len=8, stride=4, dim=16, kernel=4,
                                        heads='linear'))
        assert (linear.depthwise, linear.pointwise, linear.mlp_head) == (0, 0, 0)
        mlp = count_macs(ModelConfig(lookback=32, horizon=8, patch_len=8, stride=4, dim=16, kernel=4,
                                     heads='mlp', block=False))
        assert (mlp.depthwise, mlp.pointwise, mlp.linear_head) == (0, 0, 0)
        assert mlp.mlp_head == mlp.num_patches * 16 * 16 + 16 * 8


class TestParseSweepValues:
    def test_preset(self):
        assert parse_sweep_values('patch_len', 'preset') == SWEEP_PRESETS['patch_len']
        assert parse_sweep_values('stride', 'preset') == list(range(1, 17))

    def test_lists(self):
        assert parse_sweep_values('lookback', '24, 48') == [24, 48]
        assert parse_sweep_values('loss', 'mse,mae') == ['mse', 'mae']

    def test_errors(self):
        with pytest.raises(ConfigError) as info:
            parse_sweep_values('depth', '1')
        assert info.value.key == 'axis'
        with pytest.raises(ConfigError) as info:
            parse_sweep_values('stride', 'one,two')
        assert info.value.key == 'values'
        with pytest.raises(ConfigError):
            parse_sweep_values('stride', ' , ')


class TestAnalysisService:
    def test_nmi_report_writes_two_matrices(self, app_config, sine_csv, tmp_path):
        service = AnalysisService(app_config)
        path = sine_csv(steps=400, variables=3)
        channels, patches, paths = service.nmi_report(path, str(tmp_path / 'nmi'), profile='generic',
                                                      patch_len=4, stride=2, lookback=16)
        assert [os.path.basename(p) for p in paths] == ['nmi_channels.csv', 'nmi_patches.csv']
        header, rows = read_csv(paths[0])
        assert header == ['label', 'v0', 'v1', 'v2']
        assert len(rows) == 3
        header, rows = read_csv(paths[1])
        assert len(rows) == len(patches.labels) == 8
        assert os.path.exists(paths[0] + '.meta')

    def test_mac_report_csv(self, app_config, tiny_run_config, tmp_path):
        output = str(tmp_path / 'macs.csv')
        report = AnalysisService(app_config).mac_report(tiny_run_config(), output, num_variables=2)
        header, rows = read_csv(output)
        assert header == ['stage', 'macs']
        assert rows[0] == ['embedding', str(report.embedding)]
        assert len(rows) == 9
        assert "T=4" in (tmp_path / 'macs.csv.meta').read_text()

    def test_mac_report_reads_variable_count_from_dataset(self, app_config, tiny_run_config, sine_csv, tmp_path):
        service = AnalysisService(app_config)
        cfg = tiny_run_config(dataset=sine_csv(variables=3, name='three.csv'))
        report = service.mac_report(cfg, str(tmp_path / 'macs.csv'))
        assert report.num_variables == 3
        assert report.per_forecast == 3 * report.per_variable

    def test_mac_report_without_dataset_counts_one_variable(self, app_config, tiny_run_config, tmp_path):
        cfg = tiny_run_config(dataset=str(tmp_path / 'absent.csv'))
        report = AnalysisService(app_config).mac_report(cfg, str(tmp_path / 'macs.csv'))
        assert report.num_variables == 1
        assert report.per_forecast == report.per_variable

    def test_single_value_sweep_equals_train(self, app_config, tiny_run_config):
        base = tiny_run_config()
        rows = AnalysisService(app_config).sweep('patch_len', [4], base)
        direct = TrainingService(app_config).train(base, write_outputs=False)
        assert len(rows) == 1
        assert rows[0].axis_value == 4
        assert rows[0].test_mse == direct.test_mse
        assert rows[0].test_mae == direct.test_mae

    def test_invalid_values_are_skipped_with_reason(self, app_config, tiny_run_config, tmp_path, caplog):
        output = str(tmp_path / 'sweep.csv')
        with caplog.at_level(logging.WARNING):
            rows = AnalysisService(app_config).sweep('patch_len', [2, 40], tiny_run_config(), output_path=output)
        assert [row.axis_value for row in rows] == [2]
        assert "Skipping patch_len=40" in caplog.text
        header, csv_rows = read_csv(output)
        assert header == SWEEP_COLUMNS
        assert len(csv_rows) == 1
        assert os.path.exists(output + '.meta')

    def test_invalid_loss_is_skipped(self, app_config, tiny_run_config, caplog):
        with caplog.at_level(logging.WARNING):
            rows = AnalysisService(app_config).sweep('loss', ['huber'], tiny_run_config())
        assert rows == []
        assert "Skipping loss=huber" in caplog.text

    def test_threaded_rows_keep_axis_order(self, app_config, tiny_run_config):
        service = AnalysisService(app_config)
        base = tiny_run_config()
        serial = service.sweep('stride', [4, 1, 2], base, workers=1)
        threaded = service.sweep('stride', [4, 1, 2], base, workers=3)
        assert [row.axis_value for row in threaded] == [4, 1, 2]
        assert [row.test_mse for row in threaded] == [row.test_mse for row in serial]

    def test_unknown_axis(self, app_config, tiny_run_config):
        with pytest.raises(AnalysisError):
            AnalysisService(app_config).sweep('depth', [1], tiny_run_config())

    def test_ablate_no_patch(self, app_config, tiny_run_config, tmp_path):
        output = str(tmp_path / 'ablate.csv')
        result = AnalysisService(app_config).ablate('no_patch', tiny_run_config(), output_path=output)
        assert result.num_patches == 16 + 1
        header, rows = read_csv(output)
        assert header[:2] == ['variant', 'num_patches']
        assert rows[0][:2] == ['no_patch', '17']

    def test_ablate_full_equals_train(self, app_config, tiny_run_config):
        base = tiny_run_config()
        result = AnalysisService(app_config).ablate('full', base)
        direct = TrainingService(app_config).train(base, write_outputs=False)
        assert result.test_mse == direct.test_mse
        assert result.epochs == direct.epochs_run

    @pytest.mark.parametrize('variant', ['linear_head', 'mlp_head', 'dual_head'])
    def test_head_variants_run(self, app_config, tiny_run_config, variant):
        result = AnalysisService(app_config).ablate(variant, tiny_run_config())
        assert result.variant == variant
        assert np.isfinite(result.test_mse)

    def test_unknown_variant(self, app_config, tiny_run_config):
        with pytest.raises(AnalysisError, match="Unknown ablation variant"):
            AnalysisService(app_config).ablate('attention', tiny_run_config())

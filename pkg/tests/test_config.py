import os

import pytest

from config import OUTPUT_ROOT_ENV, Config, ConfigError, RunConfig
from service.losses import LossKind


def assignments(*lines):
    return RunConfig(**RunConfig.parse_assignments(lines))


class TestAppConfig:
    def test_properties(self, app_config, tmp_path):
        assert app_config.output_root == str(tmp_path / 'runs')
        assert app_config.eval_workers == 1
        assert app_config.prefetch_batches == 0
        assert app_config.nmi_max_bins == 64
        assert app_config.nmi_window_step is None
        assert app_config.report_assumptions == ['test run']

    def test_environment_overrides_output_root(self, app_config, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, '/elsewhere')
        assert app_config.output_root == '/elsewhere'

    def test_defaults_for_missing_keys(self, tmp_path, monkeypatch):
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        path = tmp_path / 'empty.json'
        path.write_text("{}")
        config = Config(str(path))
        assert config.output_root == 'runs'
        assert config.checkpoint_name == 'checkpoint.txt'
        assert config.sweep_workers == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Config(str(tmp_path / 'missing.json'))

    def test_repository_config_is_valid(self):
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        config = Config(os.path.join(root, 'config.json'))
        assert config.log_level
        assert config.eval_workers >= 1


class TestParse:
    def test_comments_and_blank_lines(self):
        cfg = assignments("# header", "", "L=96  # look-back", "T = 24", "dataset=data/x.csv")
        assert (cfg.lookback, cfg.horizon, cfg.dataset) == (96, 24, 'data/x.csv')

    def test_typed_values(self):
        cfg = assignments("block=false", "ratios=0.6,0.2,0.2", "max_steps=none", "dropout=0.1", "heads=mlp")
        assert cfg.block is False
        assert cfg.ratios == (0.6, 0.2, 0.2)
        assert cfg.max_steps is None
        assert cfg.dropout == 0.1
        assert cfg.heads == 'mlp'

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            RunConfig.parse_assignments(["Q=1"])
        assert info.value.key == 'Q'

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError) as info:
            RunConfig.parse_assignments(["L=long"])
        assert info.value.key == 'L'
        assert "long" in str(info.value)

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            RunConfig.parse_assignments(["L 96"])

    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.lookback, cfg.horizon, cfg.patch_len, cfg.stride, cfg.dim, cfg.kernel) == (336, 96, 16, 8, 256, 8)
        assert cfg.loss == 'mse_plus_mae'
        assert cfg.seed == 2021


class TestSerialization:
    def test_canonical_round_trip(self):
        cfg = assignments("dataset=a.csv", "lr=0.0003", "ratios=0.7,0.1,0.2", "block=false", "max_steps=500")
        text = cfg.to_text()
        again = assignments(*text.splitlines())
        assert again == cfg
        assert again.to_text() == text

    def test_every_key_in_declaration_order(self):
        keys = [line.split('=', 1)[0] for line in RunConfig().to_text().splitlines()]
        assert keys == RunConfig.keys()
        assert keys[:8] == ['dataset', 'profile', 'ratios', 'max_steps', 'L', 'T', 'P', 'S']

    def test_overrides_apply_in_order(self):
        cfg = RunConfig().with_overrides(["T=192", "T=336", "heads=linear"])
        assert cfg.horizon == 336
        assert cfg.heads == 'linear'
        assert RunConfig().with_overrides([]) == RunConfig()

    def test_from_file_then_overrides(self, run_config_file):
        cfg = RunConfig.from_file(run_config_file(), ["T=6"])
        assert cfg.horizon == 6
        assert cfg.lookback == 16
        assert cfg.seed == 7


class TestValidate:
    @pytest.mark.parametrize('override,key', [
        ("P=20", 'P'),
        ("K=3", 'K'),
        ("ratios=0.5,0.2,0.2", 'ratios'),
        ("loss=huber", 'loss'),
        ("dropout=1.0", 'dropout'),
        ("dtype=f16", 'dtype'),
        ("profile=daily", 'profile'),
        ("batch_size=0", 'batch_size'),
        ("depth=2", 'depth'),
        ("heads=triple", 'heads'),
        ("lr=-1", 'lr'),
    ])
    def test_errors_name_key(self, tiny_run_config, override, key):
        cfg = tiny_run_config().with_overrides([override])
        with pytest.raises(ConfigError) as info:
            cfg.validate()
        assert info.value.key == key

    def test_missing_dataset_file(self, tiny_run_config, tmp_path):
        missing = str(tmp_path / 'absent.csv')
        with pytest.raises(ConfigError, match="absent.csv"):
            tiny_run_config(dataset=missing).validate()
        assert tiny_run_config(dataset=missing).validate(check_paths=False)

    def test_no_dataset(self):
        with pytest.raises(ConfigError) as info:
            RunConfig().validate()
        assert info.value.key == 'dataset'

    def test_linear_heads_ignore_kernel_divisibility(self, tiny_run_config):
        tiny_run_config(heads='linear', K=3).validate()


class TestDerived:
    def test_model_config(self, tiny_run_config):
        model_cfg = tiny_run_config().model_config()
        assert (model_cfg.lookback, model_cfg.horizon, model_cfg.num_patches) == (16, 4, 8)
        assert model_cfg.dtype == 'f64'

    def test_loss_spec(self, tiny_run_config):
        spec = tiny_run_config(loss='smooth_l1', smooth_l1_beta=0.5).loss_spec()
        assert spec.kind is LossKind.SMOOTH_L1
        assert spec.beta == 0.5

    def test_run_name(self):
        cfg = assignments("dataset=/data/ETTh1.csv", "T=96", "seed=1")
        assert cfg.run_name() == 'ETTh1_L336_T96_dual_mse_plus_mae_s1'

    def test_output_dir_resolution(self, tmp_path):
        relative = assignments("dataset=x.csv", "output_dir=exp1")
        assert relative.resolve_output_dir('runs') == os.path.join('runs', 'exp1')
        absolute = assignments("dataset=x.csv", f"output_dir={tmp_path}")
        assert absolute.resolve_output_dir('runs') == str(tmp_path)
        unnamed = assignments("dataset=x.csv")
        assert unnamed.resolve_output_dir('runs') == os.path.join('runs', unnamed.run_name())

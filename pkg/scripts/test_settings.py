"""
配置层测试：默认值、INI/JSON 加载、命令行覆盖与校验
"""

import json
import os

import pytest

from common.exceptions import ConfigurationError
from common.settings import Settings, dump_settings, load_settings

TEMPLATE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config',
                        'config.ini.template')


def test_defaults_are_valid():
    settings = load_settings()
    assert settings.ipm.px_per_m == 40.0
    assert (settings.ipm.bev_width, settings.ipm.bev_height) == (320, 400)
    assert settings.trainer.slot_mode == 'full'
    assert settings.slotweights.stop_gradient is True


def test_template_loads():
    settings = load_settings(TEMPLATE)
    assert settings.to_dict() == Settings().to_dict()


def test_dumped_config_reloads_identically(tmp_path):
    settings = load_settings(overrides=['renderer.background=0.1, 0.2, 0.3', 'trainer.total_iters=77',
                                        'slotweights.stop_gradient=false', 'losses.kl_direction=symmetric'])
    path = str(tmp_path / 'effective.ini')
    dump_settings(settings, path)
    reloaded = load_settings(path)
    assert reloaded.to_dict() == settings.to_dict()
    assert reloaded.renderer.background == (0.1, 0.2, 0.3)
    assert reloaded.slotweights.stop_gradient is False


def test_json_config(tmp_path):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps({'scene': {'count': 500, 'sh_degree': 1}, 'ipm': {'fusion_mode': 'feathered'}}),
                    encoding='utf-8')
    settings = load_settings(str(path))
    assert settings.scene.count == 500
    assert settings.ipm.fusion_mode == 'feathered'


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / 'config.ini'
    path.write_text("[trainer]\ntotal_iters = 100\nphase1_iters = 50\n", encoding='utf-8')
    settings = load_settings(str(path), ['trainer.phase1_iters=10'])
    assert (settings.trainer.total_iters, settings.trainer.phase1_iters) == (100, 10)


@pytest.mark.parametrize("overrides, code", [
    (['nosuch.key=1'], 'UNKNOWN_SECTION'),
    (['trainer.nosuch=1'], 'UNKNOWN_KEY'),
    (['trainer.total_iters=abc'], 'BAD_VALUE'),
    (['trainer.total_iters=2.5'], 'BAD_VALUE'),
    (['slotweights.stop_gradient=maybe'], 'BAD_VALUE'),
    (['total_iters=3'], 'BAD_OVERRIDE'),
    (['trainer.phase1_iters=99999999'], 'INVALID_CONFIG'),
    (['trainer.slot_mode=everything'], 'INVALID_CONFIG'),
    (['losses.kl_direction=sideways'], 'INVALID_CONFIG'),
    (['slotweights.alpha=1.5'], 'INVALID_CONFIG'),
    (['evaluation.match_strategy=hungarian'], 'INVALID_CONFIG'),
])
def test_invalid_settings(overrides, code):
    with pytest.raises(ConfigurationError) as exc:
        load_settings(overrides=overrides)
    assert exc.value.error_code == code
    assert exc.value.exit_code == 1


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError) as exc:
        load_settings(str(tmp_path / 'missing.ini'))
    assert exc.value.error_code == "CONFIG_NOT_FOUND"
    bad = tmp_path / 'bad.json'
    bad.write_text("{not json", encoding='utf-8')
    with pytest.raises(ConfigurationError) as exc:
        load_settings(str(bad))
    assert exc.value.error_code == "BAD_CONFIG"


def test_zero_threads_means_all_cores():
    settings = load_settings(overrides=['runtime.threads=0'])
    assert settings.threads >= 1
    assert load_settings(overrides=['runtime.threads=3']).threads == 3

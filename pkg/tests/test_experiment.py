import json
from pathlib import Path

import numpy as np
import pytest

import main
from core.config import TrainConfig
from core.errors import ConfigInvalid
from core.experiment import (CHECKPOINT_FILE, CONFIG_FILE, IMPORTANCE_FILE, MANIFEST_FILE,
                             METRICS_FILE, RunManifest, render, run, sweep, version_string)
from core.metrics_io import read_metrics
from core.tasks import read_ppm
from tests.base_test import MisgradTestBase

POLY_BASE = {'task': 'poly3', 'task.n_points': 64, 'B': 16, 'epochs': 3, 'seed': 2}


class TestRun(MisgradTestBase):
    """Тесты одного запуска."""

    def test_run_writes_files(self, tmp_path):
        """В каталоге запуска появляются конфигурация, манифест, метрики и контрольная точка."""
        cfg = TrainConfig.from_dict(dict(POLY_BASE, estimator='is',
                                         **{'diagnostics.dump_importance': True}))
        manifest, logs = run(cfg, tmp_path)
        run_dir = Path(manifest.output_dir)
        for name in (CONFIG_FILE, MANIFEST_FILE, METRICS_FILE, CHECKPOINT_FILE, IMPORTANCE_FILE):
            assert (run_dir / name).exists(), name
        assert manifest.epochs_completed == 3 == len(logs)
        assert len(read_metrics(run_dir / METRICS_FILE).rows) == 3
        assert len((run_dir / IMPORTANCE_FILE).read_text().splitlines()) == 64

    def test_manifest_round_trip(self, tmp_path):
        """Снимок конфигурации в манифесте восстанавливает ту же конфигурацию."""
        cfg = TrainConfig.from_dict(dict(POLY_BASE, estimator='omis'))
        manifest, _ = run(cfg, tmp_path)
        loaded = RunManifest.load(manifest.output_dir)
        assert TrainConfig.from_dict(loaded.config) == cfg
        assert loaded.final_eval_loss == manifest.final_eval_loss
        assert loaded.version

    def test_exact_run_monotone(self, tmp_path):
        """Точный спуск на poly с малым шагом даёт невозрастающие потери."""
        cfg = TrainConfig.from_dict(dict(POLY_BASE, estimator='exact', optimizer='sgd', lr=0.05))
        _, logs = run(cfg, tmp_path)
        losses = [log.train_loss for log in logs]
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_same_seed_same_metrics(self, tmp_path):
        """Два запуска с одним зерном совпадают во всём, кроме wall_ms."""
        cfg = TrainConfig.from_dict(dict(POLY_BASE, estimator='omis'))
        first, _ = run(cfg, tmp_path)
        second, _ = run(cfg, tmp_path)
        assert first.output_dir != second.output_dir
        a = read_metrics(Path(first.output_dir) / METRICS_FILE)
        b = read_metrics(Path(second.output_dir) / METRICS_FILE)
        for column in ('epoch', 'train_loss', 'eval_loss'):
            np.testing.assert_array_equal(a.column(column), b.column(column))

    def test_version_string(self):
        assert isinstance(version_string(), str) and version_string()


class TestSweepAndRender(MisgradTestBase):
    """Тесты серии запусков и отрисовки."""

    def test_sweep(self, tmp_path):
        """Серия пишет по файлу метрик на оценщик и общую таблицу."""
        manifests, table = sweep(POLY_BASE, ['uniform', 'is', 'omis'], tmp_path)
        assert [m.config['estimator'] for m in manifests] == ['uniform', 'is', 'omis']
        for manifest in manifests:
            assert (Path(manifest.output_dir) / METRICS_FILE).exists()
        comparison = Path(manifests[0].output_dir).parent / 'comparison.txt'
        assert comparison.read_text().strip() == table
        for label in ('uniform', 'is', 'omis'):
            assert f'| {label} ' in table

    def test_sweep_requires_estimators(self, tmp_path):
        with pytest.raises(ConfigInvalid):
            sweep(POLY_BASE, [], tmp_path)

    def test_render_image(self, tmp_path, image_file):
        """Предсказание сети записывается изображением разрешения обучения."""
        cfg = TrainConfig.from_dict({
            'task': 'image', 'task.path': str(image_file), 'task.resolution': 8,
            'network.hidden': [8], 'network.encoding_freqs': 1, 'epochs': 1, 'B': 16,
            'estimator': 'uniform',
        })
        manifest, _ = run(cfg, tmp_path / 'runs')
        path = render(manifest.output_dir, tmp_path / 'prediction.ppm')
        assert read_ppm(path).shape == (8, 8, 3)

    def test_render_requires_image(self, tmp_path):
        manifest, _ = run(TrainConfig.from_dict(dict(POLY_BASE, estimator='uniform')), tmp_path)
        with pytest.raises(ConfigInvalid, match='только для задачи image'):
            render(manifest.output_dir)


class TestCli(MisgradTestBase):
    """Тесты командной строки."""

    @pytest.fixture
    def config_file(self, tmp_path) -> Path:
        path = tmp_path / 'config.json'
        path.write_text(json.dumps(dict(POLY_BASE, estimator='is')))
        return path

    def test_run(self, tmp_path, config_file, capsys):
        """Команда run печатает итоговую таблицу."""
        main.main(['run', '--config', str(config_file), '--epochs', '2', '--out', str(tmp_path / 'runs')])
        output = capsys.readouterr().out
        assert 'Эпох:' in output
        assert '| 2 ' in output or '2 |' in output

    def test_compare(self, tmp_path, config_file, capsys):
        out = str(tmp_path / 'runs')
        main.main(['sweep', '--config', str(config_file), '--estimators', 'uniform,is', '--out', out])
        files = sorted(str(p) for p in (tmp_path / 'runs').rglob(METRICS_FILE))
        capsys.readouterr()
        main.main(['compare', *files])
        assert 'Потери (равное время)' in capsys.readouterr().out

    @pytest.mark.parametrize('argv, message', [
        pytest.param(['compare', 'missing.csv', 'other.csv'], 'Файл не найден', id='missing-file'),
        pytest.param(['sweep', '--estimators', 'uniform,newton'], 'Неизвестные оценщики',
                     id='unknown-estimator'),
    ])
    def test_errors_exit_nonzero(self, argv, message, capsys):
        """Ошибки выводятся в stderr с кодом выхода 1."""
        with pytest.raises(SystemExit) as exc_info:
            main.main(argv)
        assert exc_info.value.code == 1
        assert message in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'task': 'poly3', 'B': 0}))
        with pytest.raises(SystemExit) as exc_info:
            main.main(['run', '--config', str(path), '--out', str(tmp_path)])
        assert exc_info.value.code == 1
        assert 'B ≥ 1' in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'task': 'poly3', 'omis.gamma': 0.5}))
        with pytest.raises(SystemExit):
            main.main(['run', '--config', str(path), '--out', str(tmp_path)])
        assert 'ключ omis.gamma' in capsys.readouterr().err

    def test_negative_seed_rejected_before_run(self, tmp_path, config_file, capsys):
        """Отрицательное зерно отклоняется до создания каталога запуска."""
        out = tmp_path / 'runs'
        with pytest.raises(SystemExit) as exc_info:
            main.main(['run', '--config', str(config_file), '--seed', '-1', '--out', str(out)])
        assert exc_info.value.code == 1
        assert 'seed ≥ 0' in capsys.readouterr().err
        assert not out.exists()

"""
Масштабированные воспроизведения экспериментов. Запуск: pytest -m slow
"""
import numpy as np
import pytest

from core.experiment import build_network, build_task
from core.tasks import gen_synthetic_image
from core.trainers import make_trainer
from tests.base_test import MisgradTestBase, logger
from tests.utils import write_digit_files


def final_log(cfg):
    dataset, eval_dataset = build_task(cfg)
    net = build_network(cfg, dataset)
    logs = make_trainer(cfg, net, dataset, eval_dataset).train()
    logger.info('%s seed=%d: train_loss=%.6g eval_loss=%.6g', cfg.estimator.value, cfg.seed,
                logs[-1].train_loss, logs[-1].eval_loss)
    return logs[-1]


@pytest.mark.slow
class TestPolynomialOrdering(MisgradTestBase):
    """Регрессия полиномом 6-го порядка, B=32, Adam, около 1000 шагов."""

    POLY = {'task': 'poly6', 'task__n_points': 1024, 'B': 32, 'epochs': 32,
            'optimizer': 'adam', 'lr': 0.01}
    SEEDS = range(5)

    @pytest.fixture(scope='class')
    def medians(self):
        variants = {
            'exact': {'estimator': 'exact'},
            'uniform': {'estimator': 'uniform'},
            'is': {'estimator': 'is'},
            'omis2': {'estimator': 'omis', 'J': 2},
            'omis4': {'estimator': 'omis', 'J': 4},
        }
        return {
            name: float(np.median([final_log(self.config(seed=seed, **self.POLY, **values)).train_loss
                                   for seed in self.SEEDS]))
            for name, values in variants.items()
        }

    def test_omis_close_to_exact(self, medians):
        """OMIS(J=4) не хуже 1.5× точного спуска и 0.25× равномерного SGD."""
        assert medians['omis4'] <= 1.5 * medians['exact']
        assert medians['omis4'] <= 0.25 * medians['uniform']

    def test_more_techniques_help(self, medians):
        """OMIS(J=4) ≤ OMIS(J=2) ≤ IS по медиане итоговых потерь."""
        assert medians['omis4'] <= medians['omis2'] <= medians['is']


@pytest.mark.slow
class TestImageRegression(MisgradTestBase):
    """Регрессия изображения 64×64: координатная сеть из 5 слоёв, пакет 256, 500 эпох."""

    SEEDS = range(3)

    @pytest.fixture(scope='class')
    def medians(self, tmp_path_factory):
        image = gen_synthetic_image(tmp_path_factory.mktemp('image') / 'image.ppm', size=64, seed=0)
        base = {'task': 'image', 'task__path': str(image), 'task__resolution': 64, 'B': 256,
                'epochs': 500}
        return {
            estimator: float(np.median([
                final_log(self.config(seed=seed, estimator=estimator, **base)).train_loss
                for seed in self.SEEDS]))
            for estimator in ('uniform', 'is', 'omis')
        }

    def test_omis_beats_uniform(self, medians):
        """OMIS по трём каналам строго лучше равномерного SGD."""
        assert medians['omis'] < medians['uniform']

    def test_is_not_worse_than_uniform(self, medians):
        assert medians['is'] <= medians['uniform']


@pytest.mark.slow
class TestClassificationOrdering(MisgradTestBase):
    """Стратифицированное подмножество IDX из 1024 примеров, MLP, 20 эпох."""

    def test_is_beats_uniform(self, tmp_path_factory):
        """IS не хуже равномерной выборки по потерям на оценке минимум в 4 из 5 запусков."""
        directory = tmp_path_factory.mktemp('digits')
        images, labels = write_digit_files(directory, 2048, seed=1, size=16)
        eval_images, eval_labels = write_digit_files(directory, 1024, seed=2, size=16, prefix='eval')
        base = {'task': 'idx', 'task__images': str(images), 'task__labels': str(labels),
                'task__eval_images': str(eval_images), 'task__eval_labels': str(eval_labels),
                'task__n_take': 1024, 'task__eval_take': 1024, 'epochs': 20}
        wins = 0
        for seed in range(5):
            ours = final_log(self.config(seed=seed, estimator='is', **base)).eval_loss
            uniform = final_log(self.config(seed=seed, estimator='uniform', **base)).eval_loss
            wins += ours <= uniform
        assert wins >= 4

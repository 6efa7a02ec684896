import numpy as np
import pytest
from scipy.stats import spearmanr

from core.errors import IndexOutOfRange, InvalidTarget, ShapeMismatch
from core.importance_functions import (ImportanceMetric, MetricKind, cross_entropy_importance,
                                       cross_entropy_importances, importance_fidelity,
                                       loss_importance, output_grad_norm, output_layer_groups,
                                       per_node_importances, select_node_subset)
from core.linalg import Rng
from core.network import (Activation, LossKind, Network, SampleGrad, per_sample_backward,
                          per_sample_backward_batch)
from tests.base_test import MisgradTestBase
from tests.utils import finite_difference_grad, make_network


def sample_grad(output_grad, loss: float = 0.0) -> SampleGrad:
    output_grad = np.asarray(output_grad, dtype=np.float64)
    return SampleGrad(loss=loss, param_grad=np.zeros(1), output_grad=output_grad)


def identity_network(classes: int) -> Network:
    """Сеть, выход которой совпадает со входом: логиты подаются напрямую."""
    net = Network([(classes, classes)], [Activation.IDENTITY])
    net.layers[0].weights[...] = np.eye(classes)
    return net


class TestOutputGradNorm(MisgradTestBase):
    """Тесты нормы градиента выходного слоя."""

    @pytest.mark.parametrize('grad, expected', [
        pytest.param([0.5, -0.5], 0.70710678, id='two-nodes'),
        pytest.param([0.0, 0.0, 0.0], 0.0, id='zero'),
    ])
    def test_values(self, grad, expected):
        """Норма выходного градиента."""
        assert output_grad_norm(sample_grad(grad)) == pytest.approx(expected, abs=1e-8)

    def test_rank_correlates_with_full_gradient(self, toy_dataset, toy_network):
        """Ранговая корреляция с нормой полного градиента больше 0.5 на игрушечной задаче."""
        batch = per_sample_backward_batch(toy_network, toy_dataset.inputs,
                                          toy_dataset.targets, toy_dataset.loss)
        proxy = np.linalg.norm(batch.output_grads, axis=1)
        full = np.linalg.norm(batch.param_grads, axis=1)
        correlation, _ = spearmanr(proxy, full)
        assert correlation > 0.5


class TestPerNodeImportances(MisgradTestBase):
    """Тесты покомпонентной важности."""

    def test_projection(self):
        """output_grad=[a,b,c], subset=[0,2] → [a,c]."""
        values = per_node_importances(sample_grad([1.5, -2.0, 3.0]), [0, 2])
        np.testing.assert_array_equal(values, [1.5, 3.0])

    def test_scalar_mse(self):
        """Для скалярного выхода с MSE компонента равна 2(m−y)."""
        net = make_network([1, 1], 'identity', seed=0)
        x = np.array([0.3])
        prediction = net.layers[0].weights[0, 0] * 0.3 + net.layers[0].biases[0]
        sg = per_sample_backward(net, x, [1.0], LossKind.MSE)
        np.testing.assert_allclose(per_node_importances(sg, [0]), [2 * (prediction - 1.0)])

    def test_rgb_channels_match_finite_differences(self):
        """Три компоненты совпадают с производными по смещениям выходного слоя."""
        net = make_network([2, 8, 3], 'sine', seed=4, first_omega=3.0)
        x = np.array([0.2, -0.4])
        y = np.array([[0.1, 0.5, 0.9]])
        sg = per_sample_backward(net, x, y, LossKind.MSE)
        reference = finite_difference_grad(net, x, y, LossKind.MSE)
        _, b_slice = net._slices[-1]
        np.testing.assert_allclose(per_node_importances(sg, [0, 1, 2]), reference[b_slice],
                                   rtol=1e-6, atol=1e-8)

    def test_subset_out_of_range(self):
        """Номер узла вне выхода отклоняется."""
        with pytest.raises(IndexOutOfRange, match='вне диапазона'):
            per_node_importances(sample_grad([1.0, 2.0]), [0, 2])


class TestCrossEntropyImportance(MisgradTestBase):
    """Тесты важности для перекрёстной энтропии в закрытой форме."""

    def test_uniform_logits(self):
        """z=[0,0], y=0 → 0.70710678."""
        assert cross_entropy_importance(np.zeros(2), 0) == pytest.approx(0.70710678, abs=1e-8)

    def test_perfectly_classified(self):
        """Уверенная верная классификация даёт важность около нуля."""
        assert cross_entropy_importance(np.array([50.0, 0.0, 0.0]), 0) < 1e-15

    def test_matches_backward_pass(self):
        """На 10³ случайных парах совпадает с нормой выходного градиента обратного прохода."""
        rng = Rng(17)
        for classes in (2, 3, 10):
            net = identity_network(classes)
            logits = rng.normal((1000, classes), scale=3.0)
            labels = rng.integers(classes, 1000)
            batch = per_sample_backward_batch(net, logits, labels, LossKind.CROSS_ENTROPY)
            expected = np.linalg.norm(batch.output_grads, axis=1)
            np.testing.assert_allclose(cross_entropy_importances(logits, labels), expected,
                                       rtol=0, atol=1e-10)

    def test_range(self):
        """Значение лежит в [0, √2]."""
        rng = Rng(5)
        logits = rng.normal((500, 4), scale=10.0)
        values = cross_entropy_importances(logits, rng.integers(4, 500))
        assert values.min() >= 0.0
        assert values.max() <= np.sqrt(2.0) + 1e-12

    @pytest.mark.parametrize('label', [-1, 3])
    def test_invalid_target(self, label):
        """Метка вне [0, C) отклоняется."""
        with pytest.raises(InvalidTarget, match='вне диапазона'):
            cross_entropy_importance(np.zeros(3), label)


class TestImportanceMetric(MisgradTestBase):
    """Тесты выбора метрики и векторных компонент."""

    def test_loss_value(self):
        """Метрика потерь ограничена снизу нулём."""
        assert loss_importance(sample_grad([0.0], loss=2.5)) == 2.5
        assert loss_importance(sample_grad([0.0], loss=-1.0)) == 0.0

    def test_scalar_kinds_agree_for_cross_entropy(self, toy_dataset, toy_network):
        """Закрытая форма и норма выходного градиента совпадают для перекрёстной энтропии."""
        batch = per_sample_backward_batch(toy_network, toy_dataset.inputs,
                                          toy_dataset.targets, LossKind.CROSS_ENTROPY)
        closed = ImportanceMetric(MetricKind.CROSS_ENTROPY_CLOSED_FORM)
        norm = ImportanceMetric(MetricKind.OUTPUT_GRAD_NORM)
        np.testing.assert_allclose(closed.scalar_values(batch, toy_dataset.targets),
                                   norm.scalar_values(batch), atol=1e-12)

    def test_vector_subset(self, toy_dataset, toy_network):
        """Векторная метрика с подмножеством узлов берёт нужные столбцы."""
        batch = per_sample_backward_batch(toy_network, toy_dataset.inputs[:5],
                                          toy_dataset.targets[:5], LossKind.CROSS_ENTROPY)
        metric = ImportanceMetric(MetricKind.PER_NODE_GRADS, node_subset=[2, 0])
        np.testing.assert_array_equal(metric.vector_values(batch), batch.output_grads[:, [2, 0]])

    def test_vector_param_groups(self, poly_dataset, poly_network):
        """Группы параметров выходного слоя дают J норм на элемент."""
        batch = per_sample_backward_batch(poly_network, poly_dataset.inputs[:6],
                                          poly_dataset.targets[:6], LossKind.MSE)
        groups = output_layer_groups(poly_network, 4)
        values = ImportanceMetric(MetricKind.PER_NODE_GRADS, param_groups=groups).vector_values(batch)
        assert values.shape == (6, 4)
        np.testing.assert_allclose(np.linalg.norm(values, axis=1),
                                   np.linalg.norm(batch.param_grads, axis=1), rtol=1e-12)

    def test_output_layer_groups_cover_layer(self, toy_network):
        """Группы не пересекаются и покрывают веса и смещения выходного слоя."""
        groups = output_layer_groups(toy_network, 5)
        w_slice, b_slice = toy_network._slices[-1]
        covered = np.concatenate(groups)
        assert covered.tolist() == list(range(w_slice.start, b_slice.stop))

    def test_output_layer_groups_too_many(self, poly_network):
        """Групп не может быть больше, чем параметров выходного слоя."""
        with pytest.raises(IndexOutOfRange, match='групп'):
            output_layer_groups(poly_network, poly_network.param_count + 1)

    @pytest.mark.parametrize('grads, count, expected', [
        pytest.param([0.1, 0.9, 0.5], 2, [1, 2], id='top-two'),
        pytest.param([0.3, 0.3, 0.3], 1, [0], id='ties-stable'),
    ])
    def test_select_node_subset(self, grads, count, expected):
        """Выбираются узлы с наибольшим средним модулем градиента."""
        assert select_node_subset(np.array(grads), count) == expected

    def test_select_node_subset_invalid(self):
        with pytest.raises(IndexOutOfRange):
            select_node_subset(np.ones(3), 4)


class TestImportanceFidelity(MisgradTestBase):
    """Тесты расстояния до эталонного распределения."""

    def test_reference_distribution_is_zero(self, toy_dataset, toy_network):
        """Распределение по нормам полного градиента находится на нулевом расстоянии."""
        batch = per_sample_backward_batch(toy_network, toy_dataset.inputs,
                                          toy_dataset.targets, toy_dataset.loss)
        norms = np.linalg.norm(batch.param_grads, axis=1)
        fidelity = importance_fidelity(toy_network, toy_dataset.inputs, toy_dataset.targets,
                                       toy_dataset.loss, norms / norms.sum())
        assert fidelity == pytest.approx(0.0, abs=1e-12)

    def test_uniform_is_positive(self, toy_dataset, toy_network):
        """Равномерное распределение отличается от эталонного."""
        n = len(toy_dataset)
        fidelity = importance_fidelity(toy_network, toy_dataset.inputs, toy_dataset.targets,
                                       toy_dataset.loss, np.full(n, 1.0 / n))
        assert fidelity > 0.0

    def test_shape_checked(self, toy_dataset, toy_network):
        with pytest.raises(ShapeMismatch):
            importance_fidelity(toy_network, toy_dataset.inputs, toy_dataset.targets,
                                toy_dataset.loss, np.ones(3) / 3)

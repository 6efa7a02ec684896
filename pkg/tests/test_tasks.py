import numpy as np
import pytest

from core.errors import (EmptySubset, IndexOutOfRange, InvalidTarget, LabelImageCountMismatch,
                         MalformedIdx, MalformedImage, UnsupportedFormat)
from core.network import LossKind, full_gradient, sample_losses, sgd_step
from core.tasks import (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, TOY_CLASSES, Dataset, TargetKind,
                        encode_inputs, gen_polynomial, gen_synthetic_image, gen_toy_classification,
                        load_idx_subset, load_image_regression, read_idx, read_ppm,
                        render_image_dataset, toy_class_of, write_ppm)
from tests.base_test import MisgradTestBase
from tests.utils import make_network, synthetic_digits, write_idx


WHITE_2X2 = b'P6\n2 2\n255\n' + b'\xff' * 12


class TestPolynomial(MisgradTestBase):
    """Тесты генератора полиномиальной регрессии."""

    def test_shape_and_range(self):
        """Порядок 6 на [−2, 2]: 7 мономов в [−1, 1]."""
        dataset, coefficients = gen_polynomial(6, 100, seed=1)
        assert dataset.name == 'poly6'
        assert dataset.inputs.shape == (100, 7)
        assert dataset.targets.shape == (100, 1)
        assert coefficients.shape == (7,)
        assert np.abs(dataset.inputs).max() <= 1.0
        np.testing.assert_array_equal(dataset.inputs[:, 0], 1.0)
        np.testing.assert_allclose(dataset.targets[:, 0], dataset.inputs @ coefficients)

    def test_deterministic(self):
        """Одинаковое зерно даёт одинаковый набор."""
        first, _ = gen_polynomial(3, 50, noise_sd=0.1, seed=4)
        second, _ = gen_polynomial(3, 50, noise_sd=0.1, seed=4)
        np.testing.assert_array_equal(first.inputs, second.inputs)
        np.testing.assert_array_equal(first.targets, second.targets)

    def test_noise_changes_targets(self):
        clean, _ = gen_polynomial(3, 50, seed=4)
        noisy, _ = gen_polynomial(3, 50, noise_sd=0.1, seed=4)
        assert not np.allclose(clean.targets, noisy.targets)

    def test_interpolation_by_exact_descent(self):
        """Без шума и с order+1 точками точный градиентный спуск доводит потери ниже 1e-10."""
        dataset, _ = gen_polynomial(1, 2, seed=7)
        net = make_network([dataset.input_dim, 1], 'identity', seed=0)
        design = np.hstack([dataset.inputs, np.ones((len(dataset), 1))])
        eigen = np.linalg.eigvalsh(2.0 / len(dataset) * design.T @ design)
        positive = eigen[eigen > 1e-12 * eigen[-1]]
        condition = positive[-1] / positive[0]
        assert condition < 1e3, f'Точки слишком близки: число обусловленности {condition:g}'

        loss = np.inf
        for _ in range(int(40 * condition) + 100):
            sgd_step(net, full_gradient(net, dataset.inputs, dataset.targets, LossKind.MSE),
                     1.0 / eigen[-1])
            loss = sample_losses(net, dataset.inputs, dataset.targets, LossKind.MSE).mean()
            if loss < 1e-10:
                break
        assert loss < 1e-10

    def test_asymmetric_domain_scaled_by_largest_endpoint(self):
        """На [0.5, 4] признак первой степени равен x/4 и лежит в [0.125, 1]."""
        dataset, _ = gen_polynomial(3, 200, domain=(0.5, 4.0), seed=2)
        assert dataset.meta['scale'] == 4.0
        linear = dataset.inputs[:, 1]
        assert 0.125 <= linear.min() and linear.max() <= 1.0
        np.testing.assert_allclose(dataset.inputs[:, 3], linear ** 3)

    @pytest.mark.parametrize('order, n_points', [(-1, 5), (3, 3)])
    def test_invalid_arguments(self, order, n_points):
        with pytest.raises(ValueError):
            gen_polynomial(order, n_points)


class TestToyClassification(MisgradTestBase):
    """Тесты игрушечной классификации."""

    @pytest.mark.parametrize('n_points', [3, 100, 301])
    def test_balanced(self, n_points):
        """Число точек разных классов отличается не больше чем на 1."""
        counts = np.bincount(gen_toy_classification(n_points, seed=2).targets, minlength=TOY_CLASSES)
        assert counts.max() - counts.min() <= 1
        assert counts.sum() == n_points

    def test_inputs_in_unit_square(self, toy_dataset):
        assert toy_dataset.inputs.min() >= 0.0
        assert toy_dataset.inputs.max() < 1.0
        assert toy_dataset.loss == LossKind.CROSS_ENTROPY
        assert toy_dataset.output_dim == TOY_CLASSES

    def test_labels_follow_geometry(self, toy_dataset):
        """Метки совпадают с геометрическим правилом."""
        np.testing.assert_array_equal(toy_class_of(toy_dataset.inputs), toy_dataset.targets)

    def test_deterministic(self):
        first = gen_toy_classification(60, seed=9)
        second = gen_toy_classification(60, seed=9)
        np.testing.assert_array_equal(first.inputs, second.inputs)
        np.testing.assert_array_equal(first.targets, second.targets)


class TestImageRegression(MisgradTestBase):
    """Тесты чтения изображений PPM."""

    def test_white_image(self, tmp_path):
        """Белое изображение 2×2 даёт 4 примера с целями [1, 1, 1]."""
        path = tmp_path / 'white.ppm'
        path.write_bytes(WHITE_2X2)
        dataset = load_image_regression(path)
        assert len(dataset) == 4
        np.testing.assert_array_equal(dataset.targets, np.ones((4, 3)))
        assert dataset.inputs.min() == 0.0 and dataset.inputs.max() == 1.0

    def test_round_trip_byte_exact(self, tmp_path, image_file):
        """Запись набора обратно в PPM воспроизводит файл побайтно."""
        output = tmp_path / 'copy.ppm'
        render_image_dataset(load_image_regression(image_file), output)
        assert output.read_bytes() == image_file.read_bytes()

    def test_coordinates_span_corners(self, image_file):
        """Координаты лежат на угловой сетке i/(w−1): первый пиксель (0, 0), последний (1, 1)."""
        dataset = load_image_regression(image_file, resolution=8)
        np.testing.assert_array_equal(dataset.inputs[0], [0.0, 0.0])
        np.testing.assert_array_equal(dataset.inputs[-1], [1.0, 1.0])
        np.testing.assert_allclose(dataset.inputs[1], [1.0 / 7.0, 0.0])
        np.testing.assert_allclose(dataset.inputs[8], [0.0, 1.0 / 7.0])

    def test_header_comments(self, tmp_path):
        path = tmp_path / 'comment.ppm'
        path.write_bytes(b'P6\n# created by hand\n2 2\n255\n' + b'\x00' * 12)
        np.testing.assert_array_equal(read_ppm(path), np.zeros((2, 2, 3), dtype=np.uint8))

    def test_resample(self, image_file):
        """Изображение 16×16 при разрешении 8 даёт 64 примера."""
        dataset = load_image_regression(image_file, resolution=8)
        assert len(dataset) == 64
        assert dataset.meta['width'] == 8.0

    def test_write_float_pixels(self, tmp_path):
        path = tmp_path / 'gray.ppm'
        write_ppm(path, np.full((1, 3, 3), 0.5))
        assert read_ppm(path).tolist() == [[[128, 128, 128]] * 3]

    @pytest.mark.parametrize('payload, error', [
        pytest.param(b'P3\n2 2\n255\n' + b'0 ' * 12, UnsupportedFormat, id='ascii-ppm'),
        pytest.param(b'P6\n2 2\n65535\n' + b'\x00' * 24, UnsupportedFormat, id='16-bit'),
        pytest.param(b'P6\n2 2\n255\n' + b'\xff' * 5, MalformedImage, id='truncated'),
        pytest.param(b'P6\n2 x\n255\n' + b'\xff' * 12, MalformedImage, id='bad-header'),
    ])
    def test_malformed(self, tmp_path, payload, error):
        """Неподдерживаемые и повреждённые файлы отклоняются."""
        path = tmp_path / 'bad.ppm'
        path.write_bytes(payload)
        with pytest.raises(error):
            load_image_regression(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match='Файл не найден'):
            read_ppm(tmp_path / 'missing.ppm')

    def test_synthetic_image_deterministic(self, tmp_path):
        first = gen_synthetic_image(tmp_path / 'a.ppm', size=8, seed=5)
        second = gen_synthetic_image(tmp_path / 'b.ppm', size=8, seed=5)
        assert first.read_bytes() == second.read_bytes()


class TestIdx(MisgradTestBase):
    """Тесты чтения IDX-файлов."""

    @pytest.mark.parametrize('suffix', ['', '.gz'])
    def test_two_image_fixture(self, tmp_path, suffix):
        """Заголовок файла из двух изображений 28×28 разбирается в форму (2, 28, 28)."""
        images = np.arange(2 * 28 * 28, dtype=np.int64).reshape(2, 28, 28) % 256
        path = write_idx(tmp_path / f'images{suffix}', images, IDX_IMAGE_MAGIC)
        loaded = read_idx(path, IDX_IMAGE_MAGIC)
        assert loaded.shape == (2, 28, 28)
        np.testing.assert_array_equal(loaded, images)

    def test_wrong_magic(self, tmp_path):
        path = write_idx(tmp_path / 'labels', np.zeros(3), IDX_LABEL_MAGIC)
        with pytest.raises(MalformedIdx, match='Магическое число'):
            read_idx(path, IDX_IMAGE_MAGIC)

    def test_truncated(self, tmp_path):
        path = write_idx(tmp_path / 'images', np.zeros((2, 4, 4)), IDX_IMAGE_MAGIC)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(MalformedIdx, match='байт данных'):
            read_idx(path, IDX_IMAGE_MAGIC)

    def test_stratified_subset(self, digit_files):
        """Число примеров каждого класса в подмножестве отличается не больше чем на 1."""
        dataset = load_idx_subset(digit_files['images'], digit_files['labels'], 55, seed=3)
        counts = np.bincount(dataset.targets, minlength=10)
        assert counts.max() - counts.min() <= 1
        assert dataset.inputs.shape == (55, 64)
        assert 0.0 <= dataset.inputs.min() and dataset.inputs.max() <= 1.0
        assert dataset.output_dim == 10

    def test_subset_deterministic(self, digit_files):
        first = load_idx_subset(digit_files['images'], digit_files['labels'], 30, seed=1)
        second = load_idx_subset(digit_files['images'], digit_files['labels'], 30, seed=1)
        np.testing.assert_array_equal(first.inputs, second.inputs)

    def test_empty_subset(self, digit_files):
        with pytest.raises(EmptySubset, match='пустое'):
            load_idx_subset(digit_files['images'], digit_files['labels'], 0)

    def test_too_many_requested(self, digit_files):
        with pytest.raises(IndexOutOfRange):
            load_idx_subset(digit_files['images'], digit_files['labels'], 201)

    def test_classes_from_labels(self, tmp_path):
        """Файл с тремя классами даёт три выхода, а не десять."""
        images = write_idx(tmp_path / 'images', np.zeros((6, 4, 4)), IDX_IMAGE_MAGIC)
        labels = write_idx(tmp_path / 'labels', np.array([0, 1, 2, 0, 1, 2]), IDX_LABEL_MAGIC)
        dataset = load_idx_subset(images, labels, 6)
        assert dataset.classes == 3
        assert dataset.output_dim == 3

    def test_explicit_classes(self, tmp_path):
        """Явное число классов сохраняется; метка за его пределами отклоняется."""
        images = write_idx(tmp_path / 'images', np.zeros((4, 4, 4)), IDX_IMAGE_MAGIC)
        labels = write_idx(tmp_path / 'labels', np.array([0, 1, 0, 1]), IDX_LABEL_MAGIC)
        assert load_idx_subset(images, labels, 4, classes=10).output_dim == 10
        with pytest.raises(InvalidTarget, match='вне диапазона'):
            load_idx_subset(images, labels, 4, classes=1)

    def test_digit_fixture_is_noisy(self):
        """Синтетические цифры: разброс внутри класса велик, шаблоны классов общие для зёрен."""
        first, first_labels = synthetic_digits(1000, seed=1)
        second, second_labels = synthetic_digits(1000, seed=2)
        assert np.bincount(first_labels).tolist() == [100] * 10
        spread = np.mean([first[first_labels == c].astype(float).std(axis=0).mean()
                          for c in range(10)])
        assert spread > 25.0
        means_first = np.stack([first[first_labels == c].mean(axis=0).ravel() for c in range(10)])
        means_second = np.stack([second[second_labels == c].mean(axis=0).ravel() for c in range(10)])
        for c in range(10):
            assert np.corrcoef(means_first[c], means_second[c])[0, 1] > 0.8

    def test_count_mismatch(self, tmp_path):
        """Число меток должно совпадать с числом изображений."""
        images = write_idx(tmp_path / 'images', np.zeros((3, 4, 4)), IDX_IMAGE_MAGIC)
        labels = write_idx(tmp_path / 'labels', np.zeros(2), IDX_LABEL_MAGIC)
        with pytest.raises(LabelImageCountMismatch):
            load_idx_subset(images, labels, 1)


class TestDataset(MisgradTestBase):
    """Тесты контейнера набора данных."""

    def test_manifest_line(self, toy_dataset):
        assert toy_dataset.manifest_line() == 'toy,96,2,classification'

    def test_positional_encoding(self, toy_dataset):
        """Кодирование с 2 частотами увеличивает размерность входа в 5 раз."""
        encoded = encode_inputs(toy_dataset, 2)
        assert encoded.input_dim == 10
        assert encoded.meta['encoding_freqs'] == 2.0
        assert encode_inputs(toy_dataset, 0) is toy_dataset

    def test_empty_rejected(self):
        with pytest.raises(EmptySubset):
            Dataset('empty', np.zeros((0, 2)), np.zeros(0), TargetKind.CLASSIFICATION, classes=2)

    def test_length_mismatch(self):
        with pytest.raises(LabelImageCountMismatch):
            Dataset('bad', np.zeros((3, 2)), np.zeros((2, 1)), TargetKind.REGRESSION)

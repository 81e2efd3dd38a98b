import numpy as np
import pytest
from scipy import ndimage

from glioma_survival.core.preproc import (
    zscore_normalize,
    log_filter,
    log_kernel,
    gaussian_kernel_1d,
    discretize,
    validate_mask,
    brain_region,
    preprocess_image,
)
from glioma_survival.exceptions.custom_exceptions import PreprocessingError, DegenerateImageError
from glioma_survival.models.data_models import Volume


def _volume(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(data=np.asarray(data, dtype=np.float64), spacing=spacing, affine=np.diag(list(spacing) + [1.0]))


def _line(values):
    """把一维值放到 n×1×1 网格上"""
    return _volume(np.asarray(values, dtype=np.float64).reshape(-1, 1, 1))


def test_zscore_definition():
    volume = _line([1.0, 2.0, 3.0])
    normalized = zscore_normalize(volume, np.ones(volume.dims, dtype=bool))
    sigma = np.std([1.0, 2.0, 3.0])
    assert np.allclose(normalized.data.ravel(), [-1.0 / sigma, 0.0, 1.0 / sigma])
    assert abs(normalized.data.mean()) < 1e-12
    assert abs(normalized.data.std() - 1.0) < 1e-12


def test_zscore_idempotent_on_standardized_region():
    rng = np.random.default_rng(0)
    values = rng.normal(size=50)
    values = (values - values.mean()) / values.std()
    volume = _line(values)
    normalized = zscore_normalize(volume, np.ones(volume.dims, dtype=bool))
    assert np.allclose(normalized.data.ravel(), values, atol=1e-12)


def test_zscore_constant_region_is_degenerate():
    volume = _line([5.0, 5.0, 5.0, 9.0])
    region = np.array([True, True, True, False]).reshape(-1, 1, 1)
    with pytest.raises(DegenerateImageError):
        zscore_normalize(volume, region)


def test_zscore_empty_region():
    volume = _line([1.0, 2.0])
    with pytest.raises(PreprocessingError):
        zscore_normalize(volume, np.zeros(volume.dims, dtype=bool))


def test_zscore_outside_region_uses_same_map():
    volume = _line([1.0, 2.0, 3.0, 10.0])
    region = np.array([True, True, True, False]).reshape(-1, 1, 1)
    normalized = zscore_normalize(volume, region)
    assert np.isclose(normalized.data[3, 0, 0], (10.0 - 2.0) / np.std([1.0, 2.0, 3.0]))


def test_zscore_invariant_to_affine_rescaling():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(6, 5, 4))
    region = data > -0.5
    a = zscore_normalize(_volume(data), region)
    b = zscore_normalize(_volume(3.5 * data - 12.0), region)
    assert np.allclose(a.data, b.data, atol=1e-9)


def test_brain_region_is_nonzero_voxels():
    data = np.zeros((3, 3, 3))
    data[1, 1, 1] = 4.0
    assert brain_region(_volume(data)).sum() == 1


def test_gaussian_kernel_normalized_and_truncated():
    kernel = gaussian_kernel_1d(1.0)
    assert len(kernel) == 9
    assert abs(kernel.sum() - 1.0) < 1e-15
    assert np.allclose(kernel, kernel[::-1])


def test_log_of_constant_volume_is_zero():
    response = log_filter(_volume(np.full((9, 10, 11), 7.0)), 1.0)
    assert np.allclose(response.data, 0.0, atol=1e-9)


def test_log_impulse_response_is_the_kernel():
    size = 31
    data = np.zeros((size, size, size))
    center = size // 2
    data[center, center, center] = 1.0
    kernel = log_kernel(1.0, (1.0, 1.0, 1.0))
    response = log_filter(_volume(data), 1.0).data
    half = kernel.shape[0] // 2
    window = response[center - half:center + half + 1, center - half:center + half + 1, center - half:center + half + 1]
    assert np.allclose(window, kernel, atol=1e-12)
    outside = response.copy()
    outside[center - half:center + half + 1, center - half:center + half + 1, center - half:center + half + 1] = 0.0
    assert np.allclose(outside, 0.0, atol=1e-15)


def test_log_kernel_sums_to_zero():
    kernel = log_kernel(1.5, (1.0, 0.8, 2.0))
    assert abs(kernel.sum()) < 1e-12


def test_log_dense_convolution_oracle_on_blob():
    """高斯团块中心处响应最小且为负，与稠密卷积一致"""
    size = 21
    grid = np.indices((size, size, size)) - size // 2
    blob = np.exp(-(grid ** 2).sum(axis=0) / (2.0 * 2.0 ** 2))
    response = log_filter(_volume(blob), 1.0).data
    oracle = ndimage.correlate(blob, log_kernel(1.0, (1.0, 1.0, 1.0)), mode='mirror')
    assert np.allclose(response, oracle, atol=1e-10)
    c = size // 2
    assert response[c, c, c] < 0
    assert np.unravel_index(np.argmin(response), response.shape) == (c, c, c)


def test_log_commutes_with_translation_in_interior():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(30, 30, 30))
    shifted = np.roll(data, 3, axis=0)
    a = log_filter(_volume(data), 1.0).data
    b = log_filter(_volume(shifted), 1.0).data
    # 远离边界的体素
    assert np.allclose(a[8:18, 8:22, 8:22], b[11:21, 8:22, 8:22], atol=1e-10)


def test_log_rejects_bad_sigma():
    for sigma in (0.0, -1.0, float('nan'), float('inf')):
        with pytest.raises(PreprocessingError):
            log_filter(_volume(np.zeros((5, 5, 5))), sigma)


def test_preprocess_image_scales_before_filtering():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(12, 12, 12)) + 5.0
    volume = _volume(data)
    region = np.ones(volume.dims, dtype=bool)
    plain = preprocess_image(volume, region, 1.0)
    scaled = preprocess_image(volume, region, 1.0, scale=100.0)
    assert np.allclose(scaled.data, 100.0 * plain.data, rtol=1e-10, atol=1e-10)


def test_discretize_floor_rule():
    volume = _line([0.0, 24.9, 25.0, 75.0])
    disc = discretize(volume, np.ones(volume.dims, dtype=bool), 25.0)
    assert disc.bins.ravel().tolist() == [1, 1, 2, 4]
    assert disc.n_levels == 4


def test_discretize_constant_values():
    volume = _line([3.0, 3.0, 3.0])
    disc = discretize(volume, np.ones(volume.dims, dtype=bool), 25.0)
    assert disc.bins.ravel().tolist() == [1, 1, 1]
    assert disc.n_levels == 1


def test_discretize_negative_anchor():
    volume = _line([-12.0, 40.0])
    disc = discretize(volume, np.ones(volume.dims, dtype=bool), 25.0)
    assert disc.bins.ravel().tolist() == [1, 3]


def test_discretize_outside_mask_is_zero_and_shift_invariant():
    rng = np.random.default_rng(4)
    data = rng.uniform(-100, 100, size=(5, 5, 5))
    mask = data > -20
    a = discretize(_volume(data), mask, 10.0)
    b = discretize(_volume(data + 1234.5), mask, 10.0)
    assert np.all(a.bins[~mask] == 0)
    assert np.array_equal(a.bins, b.bins)
    assert a.bins[mask].min() == 1


def test_discretize_errors():
    volume = _line([1.0, 2.0])
    with pytest.raises(PreprocessingError):
        discretize(volume, np.zeros(volume.dims, dtype=bool))
    with pytest.raises(PreprocessingError):
        discretize(volume, np.ones(volume.dims, dtype=bool), 0.0)


@pytest.mark.parametrize("count,expected", [(8, True), (7, False), (0, False)])
def test_validate_mask_boundary(count, expected):
    mask = np.zeros(20, dtype=bool)
    mask[:count] = True
    assert validate_mask(mask, 8) is expected

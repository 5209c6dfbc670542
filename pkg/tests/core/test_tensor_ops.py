import numpy as np
import pytest

from lrlc_core.errors import ConfigurationError, ShapeError
from lrlc_core.tensor_ops import current_mode, default_dtype, extract_patches, fold_patches, matmul, numeric_mode
from support import conv_oracle


def test_corner_patches_see_zero_padding():
    """Test the padding seen by corner patches."""
    patches = extract_patches(np.ones((1, 3, 3, 1)), 3, 3)

    assert patches.shape == (1, 9, 9)
    for corner in (0, 2, 6, 8):
        assert patches[0, corner].sum() == 4
        assert np.count_nonzero(patches[0, corner] == 0) == 5
    assert patches[0, 4].sum() == 9


def test_unit_patches_are_the_input(rng):
    """Test 1 x 1 patches."""
    images = rng.standard_normal((2, 4, 5, 3))

    patches = extract_patches(images, 1, 1)

    assert np.array_equal(patches, images.reshape(2, 20, 3))


def test_patch_centres_reassemble_the_input(rng):
    """Test that patch centres are the input pixels."""
    images = rng.standard_normal((1, 5, 5, 2))

    patches = extract_patches(images, 3, 3)
    centre = (1 * 3 + 1) * 2

    assert np.array_equal(patches[:, :, centre : centre + 2].reshape(images.shape), images)


def test_even_filter_is_rejected():
    """Test an even filter size."""
    with pytest.raises(ConfigurationError):
        extract_patches(np.zeros((1, 4, 4, 1)), 2, 3)


def test_fold_is_the_adjoint_of_extract(rng):
    """Test folding against patch extraction."""
    images = rng.standard_normal((2, 5, 4, 3))
    cotangent = rng.standard_normal((2, 20, 5 * 3 * 3))

    left = np.sum(extract_patches(images, 5, 3) * cotangent)
    right = np.sum(images * fold_patches(cotangent, images.shape, 5, 3))

    assert left == pytest.approx(right, rel=1e-12)


@pytest.mark.parametrize(
    "shape,filter_size",
    [((1, 3, 3, 1), 3), ((2, 5, 4, 2), 3), ((1, 7, 7, 3), 5), ((1, 6, 7, 3), 7), ((2, 4, 4, 2), 1)],
)
def test_patch_product_matches_direct_convolution(rng, shape, filter_size):
    """Test the patch product against a direct convolution."""
    images = rng.standard_normal(shape)
    filters = rng.standard_normal((filter_size, filter_size, shape[3], 2))
    n, height, width, _ = shape

    patches = extract_patches(images, filter_size, filter_size)
    out = matmul(patches.reshape(n * height * width, -1), filters.reshape(-1, 2)).reshape(n, height, width, 2)

    np.testing.assert_allclose(out, conv_oracle(images, filters, np.zeros(2)), atol=1e-10)


def test_matmul_identity_and_ones(rng):
    """Test matmul on identity and all-ones operands."""
    x = rng.standard_normal((4, 3))

    assert np.array_equal(matmul(np.eye(4), x), x)
    assert np.array_equal(matmul(np.ones((2, 3)), np.ones((3, 2))), np.full((2, 2), 3.0))


def test_matmul_matches_triple_loop(rng):
    """Test matmul against a triple loop."""
    a = rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 4))
    expected = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]

    np.testing.assert_allclose(matmul(a, b), expected, atol=1e-12)


def test_matmul_rejects_mismatched_operands():
    """Test matmul with incompatible shapes."""
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_is_bitwise_repeatable_in_test_mode(rng):
    """Test that test mode gives identical bits."""
    a = rng.standard_normal((64, 33))
    b = rng.standard_normal((33, 17))

    first = matmul(a, b)

    assert all(np.array_equal(first, matmul(a, b)) for _ in range(5))


def test_numeric_mode_switches_and_restores():
    """Test entering and leaving a numeric mode."""
    assert current_mode().test_mode
    assert default_dtype() == np.float64
    with numeric_mode(test_mode=False):
        assert default_dtype() == np.float32
    assert default_dtype() == np.float64

import numpy as np
import pytest

from lrlc_core.errors import ConfigurationError, NonFiniteError, ShapeError
from lrlc_core.layers import ConvLayer, LocalLayer, SpatialBias, conv2d_forward, local_forward, spatial_bias_add
from lrlc_core.lowrank import (
    CombiningWeights,
    FilterBasis,
    InitMode,
    LrlcLayer,
    WeightsMode,
    combine_logits,
    init_structured,
    initialize,
    lower_to_local,
    lrlc_forward,
    normalize_weights,
    normalized_weights,
)


def random_layer(rng, height, width, cin, cout, rank, *, mode=WeightsMode.FACTORIZED, filter_size=3):
    if mode == WeightsMode.FULL:
        weights = CombiningWeights(full=rng.standard_normal((height, width, rank)), mode=mode)
        bias = SpatialBias(full=rng.standard_normal((height, width, cout)))
    else:
        weights = CombiningWeights(alpha=rng.standard_normal((rank, height)), beta=rng.standard_normal((rank, width)))
        bias = SpatialBias(rng.standard_normal(height), rng.standard_normal(width), rng.standard_normal(cout))
    return LrlcLayer(
        basis=FilterBasis(rng.standard_normal((rank, filter_size, filter_size, cin, cout))),
        weights=weights,
        bias=bias,
    )


def test_constant_factors_give_a_constant_table():
    """Test constant row and column factors."""
    weights = CombiningWeights(alpha=np.ones((2, 3)), beta=np.full((2, 4), 2.0))

    assert np.array_equal(combine_logits(weights, 3, 4), np.full((3, 4, 2), 3.0))


def test_factorized_table_is_an_outer_sum():
    """Test the factorized logits on a 2 x 2 grid."""
    weights = CombiningWeights(alpha=np.array([[0.0, 1.0]]), beta=np.array([[0.0, 10.0]]))

    assert combine_logits(weights, 2, 2)[:, :, 0].tolist() == [[0, 10], [1, 11]]


def test_factorized_table_has_additive_structure(rng):
    """Test that column offsets are the same in every row."""
    weights = CombiningWeights(alpha=rng.standard_normal((3, 5)), beta=rng.standard_normal((3, 4)))

    table = combine_logits(weights, 5, 4)
    column_offsets = table - table[:, :1, :]

    np.testing.assert_allclose(column_offsets, np.broadcast_to(column_offsets[:1], column_offsets.shape), atol=1e-12)


def test_combine_logits_extent_mismatch():
    """Test combining weights built for another extent."""
    weights = CombiningWeights(alpha=np.ones((2, 3)), beta=np.ones((2, 3)))

    with pytest.raises(ShapeError):
        combine_logits(weights, 3, 4)


def test_softmax_examples():
    """Test the softmax on known values."""
    np.testing.assert_allclose(normalize_weights(np.zeros((1, 1, 2))), [[[0.5, 0.5]]])
    np.testing.assert_allclose(normalize_weights(np.array([[[np.log(2.0), 0.0]]])), [[[2 / 3, 1 / 3]]])
    assert np.all(normalize_weights(np.array([[[-7.5]], [[300.0]]])) == 1.0)


def test_softmax_is_shift_invariant(rng):
    """Test that shifting logits per position changes nothing."""
    logits = rng.standard_normal((4, 5, 3))
    shift = rng.standard_normal((4, 5, 1)) * 50

    np.testing.assert_allclose(normalize_weights(logits + shift), normalize_weights(logits), atol=1e-12)


@pytest.mark.parametrize("mode", [WeightsMode.FACTORIZED, WeightsMode.FULL])
def test_normalized_weights_form_a_partition_of_unity(rng, mode):
    """Test that the weights are non-negative and sum to one."""
    layer = random_layer(rng, 6, 5, 1, 1, 4, mode=mode)
    if mode == WeightsMode.FACTORIZED:
        layer.weights.alpha *= 20  # saturate some positions

    weights = normalized_weights(layer)

    assert np.all(weights >= 0)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)


def test_rank_one_is_convolution_plus_spatial_bias(rng):
    """Test the rank-1 layer against a convolution plus bias."""
    layer = random_layer(rng, 5, 6, 2, 3, 1)
    images = rng.standard_normal((2, 5, 6, 2))

    expected = spatial_bias_add(conv2d_forward(images, ConvLayer(layer.basis.banks[0], np.zeros(3))), layer.bias)

    np.testing.assert_allclose(lrlc_forward(images, layer), expected, atol=1e-10)


def test_fixed_mixture_is_a_mixed_convolution(rng):
    """Test that position-independent weights mix the banks into one filter."""
    banks = np.stack([np.ones((3, 3, 1, 1)), 2 * np.ones((3, 3, 1, 1))])
    full = np.empty((4, 4, 2))
    full[..., 0], full[..., 1] = np.log(0.25), np.log(0.75)
    layer = LrlcLayer(FilterBasis(banks), CombiningWeights(full=full, mode=WeightsMode.FULL), SpatialBias.zeros(4, 4, 1))
    images = rng.standard_normal((1, 4, 4, 1))

    expected = conv2d_forward(images, ConvLayer(1.75 * np.ones((3, 3, 1, 1)), np.zeros(1)))

    np.testing.assert_allclose(lrlc_forward(images, layer), expected, atol=1e-12)


def test_lowering_equivalence_on_random_instances():
    """Test lowering on random shapes, ranks and filter sizes."""
    rng = np.random.default_rng(2024)
    for _ in range(100):
        height, width = rng.integers(1, 9, size=2)
        cin, cout = rng.integers(1, 5, size=2)
        rank = int(rng.integers(1, min(5, height * width + 1)))
        filter_size = int(rng.choice([1, 3, 5]))
        mode = WeightsMode.FULL if rng.random() < 0.25 else WeightsMode.FACTORIZED
        layer = random_layer(rng, height, width, cin, cout, rank, mode=mode, filter_size=filter_size)
        images = rng.standard_normal((int(rng.integers(1, 3)), height, width, cin))

        lowered = local_forward(images, lower_to_local(layer))

        assert np.max(np.abs(lowered - lrlc_forward(images, layer))) <= 1e-10


def test_lowered_layer_matches_on_many_inputs(rng):
    """Test a lowered layer on repeated inputs."""
    layer = random_layer(rng, 5, 5, 2, 3, 3)
    lowered = lower_to_local(layer)

    for _ in range(10):
        images = rng.standard_normal((1, 5, 5, 2))
        np.testing.assert_allclose(local_forward(images, lowered), lrlc_forward(images, layer), atol=1e-10)


def test_lowering_rank_one_copies_the_bank(rng):
    """Test that rank-1 lowering puts the bank at every position."""
    layer = random_layer(rng, 3, 4, 2, 2, 1)

    lowered = lower_to_local(layer)

    assert isinstance(lowered, LocalLayer)
    assert all(np.array_equal(lowered.filters[i, j], layer.basis.banks[0]) for i in range(3) for j in range(4))
    assert np.array_equal(lowered.spatial_bias.b_row, layer.bias.b_row)


def test_lowering_one_hot_weights_selects_banks(rng):
    """Test that one-hot weights pick a bank per position."""
    choice = rng.integers(0, 3, size=(4, 4))
    full = np.where(np.arange(3) == choice[..., None], 0.0, -1e4)
    layer = random_layer(rng, 4, 4, 1, 2, 3, mode=WeightsMode.FULL)
    layer.weights.full[...] = full

    lowered = lower_to_local(layer)

    for i in range(4):
        for j in range(4):
            assert np.array_equal(lowered.filters[i, j], layer.basis.banks[choice[i, j]])


def test_appending_a_zero_weighted_bank_preserves_the_function(rng):
    """Test that a bank with zero weight leaves the output unchanged."""
    layer = random_layer(rng, 5, 4, 2, 2, 2)
    extended = LrlcLayer(
        basis=FilterBasis(np.concatenate([layer.basis.banks, rng.standard_normal((1, 3, 3, 2, 2))])),
        weights=CombiningWeights(
            alpha=np.concatenate([layer.weights.alpha, np.full((1, 5), -1e4)]),
            beta=np.concatenate([layer.weights.beta, np.zeros((1, 4))]),
        ),
        bias=layer.bias,
    )
    images = rng.standard_normal((2, 5, 4, 2))

    np.testing.assert_allclose(lrlc_forward(images, extended), lrlc_forward(images, layer), atol=1e-12)


@pytest.mark.parametrize("rank", [1, 2, 4])
def test_structured_init_is_uniform_mixing(rng, rank):
    """Test the structured initialization."""
    layer = init_structured(LrlcLayer.empty(4, 5, 3, 2, 3, rank), rng)
    images = rng.standard_normal((2, 4, 5, 2))

    np.testing.assert_allclose(normalized_weights(layer), 1.0 / rank, atol=1e-15)
    np.testing.assert_allclose(layer.weights.alpha, 1.0 / np.sqrt(rank))
    mean_bank = layer.basis.banks.mean(axis=0)
    expected = conv2d_forward(images, ConvLayer(mean_bank, np.zeros(3)))
    np.testing.assert_allclose(lrlc_forward(images, layer), expected, atol=1e-10)
    assert not layer.bias.b_row.any() and not layer.bias.b_col.any() and not layer.bias.b_channel.any()


def test_random_init_is_not_uniform(rng):
    """Test the random initialization."""
    layer = initialize(LrlcLayer.empty(4, 4, 3, 1, 1, 3), rng, InitMode.RANDOM)

    assert np.ptp(normalized_weights(layer)) > 0.01


def test_rank_checks():
    """Test rejection of zero and mismatched ranks."""
    with pytest.raises(ConfigurationError):
        LrlcLayer.empty(4, 4, 3, 1, 1, 0)
    with pytest.raises(ShapeError):
        LrlcLayer(
            FilterBasis(np.zeros((2, 3, 3, 1, 1))),
            CombiningWeights(alpha=np.zeros((3, 4)), beta=np.zeros((3, 4))),
            SpatialBias.zeros(4, 4, 1),
        )


def test_input_extent_mismatch(rng):
    """Test a layer fed the wrong extent."""
    with pytest.raises(ShapeError):
        lrlc_forward(np.zeros((1, 5, 4, 2)), random_layer(rng, 4, 4, 2, 1, 2))


def test_full_mode_carries_a_per_position_bias(rng):
    """Test that the non-factorized layer owns and lowers a full bias table."""
    layer = init_structured(LrlcLayer.empty(4, 5, 3, 2, 3, 2, WeightsMode.FULL), rng)

    assert layer.bias.is_full and layer.bias.full.shape == (4, 5, 3)
    assert not layer.bias.full.any()
    layer.bias.full[...] = rng.standard_normal((4, 5, 3))
    expected = np.broadcast_to(layer.bias.full, (2, 4, 5, 3))
    np.testing.assert_array_equal(lrlc_forward(np.zeros((2, 4, 5, 2)), layer), expected)
    lowered = lower_to_local(layer)
    assert np.array_equal(lowered.spatial_bias.full, layer.bias.full)
    assert lowered.spatial_bias.full is not layer.bias.full


def test_rank_cannot_exceed_the_number_of_positions():
    """Test the rank bound at the number of positions."""
    assert LrlcLayer.empty(2, 2, 3, 1, 1, 4).basis.rank == 4
    with pytest.raises(ConfigurationError, match="exceeds"):
        LrlcLayer.empty(2, 2, 3, 1, 1, 5)


def test_non_finite_output_is_an_error(rng):
    """Test that an infinite bias raises instead of propagating."""
    layer = random_layer(rng, 4, 4, 1, 1, 2)
    layer.bias.b_channel[0] = np.inf

    with pytest.raises(NonFiniteError):
        lrlc_forward(rng.standard_normal((1, 4, 4, 1)), layer)

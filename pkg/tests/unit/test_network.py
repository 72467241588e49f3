# tests/unit/test_network.py
"""
Unit tests for app/network.py: initialization, the shared encoder, the two
heads, parameter disjointness and checkpoint files.
"""
import numpy as np
import pytest
from pydantic import ValidationError

from app import autodiff as ad
from app.errors import ShapeError
from app.network import (
    ArchSpec,
    MultiHeadNet,
    encode,
    init,
    load_checkpoint,
    load_net,
    main_logits,
    pretext_logits,
    save_checkpoint,
)


def _images(rng, n, arch):
    return rng.uniform(size=(n, arch.in_channels, arch.image_size, arch.image_size))


@pytest.mark.parametrize(
    "fields",
    [{"kernel_size": 4}, {"conv_channels": []}, {"image_size": 18}],
    ids=["even_kernel", "no_conv_blocks", "size_not_divisible_by_pooling"],
)
def test_arch_spec_validation(fields):
    with pytest.raises(ValidationError):
        ArchSpec(**fields)


def test_default_arch_flat_dim():
    assert ArchSpec().flat_dim == 32 * 8 * 8


def test_init_is_deterministic(tiny_arch):
    a, b = init(5, tiny_arch), init(5, tiny_arch)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_init_differs_between_seeds(tiny_arch):
    a, b = init(5, tiny_arch), init(6, tiny_arch)
    assert not np.array_equal(a.params["main.weight"].data, b.params["main.weight"].data)


def test_he_initialization_scale():
    """Conv weights have standard deviation sqrt(2 / fan_in); biases start at zero."""
    arch = ArchSpec(image_size=16, conv_channels=[16, 700], feature_dim=8, n_classes=2)
    net = init(0, arch)
    # 700 × 16 × 3 × 3 = 100800 samples of a fan-in-144 layer
    weights = net.params["encoder.conv1.weight"].data
    assert abs(weights.std() - np.sqrt(2.0 / 144)) / np.sqrt(2.0 / 144) < 0.1
    assert not np.any(net.params["encoder.conv1.bias"].data)


def test_parameter_groups_are_disjoint(tiny_net):
    groups = [tiny_net.encoder_params, tiny_net.main_head_params, tiny_net.pretext_head_params]
    names = [set(g) for g in groups]
    assert not (names[0] & names[1]) and not (names[0] & names[2]) and not (names[1] & names[2])
    assert set().union(*names) == set(tiny_net.params)
    assert len({id(p) for p in tiny_net.parameters()}) == len(tiny_net.params)


def test_encode_output_shape(rng):
    arch = ArchSpec(image_size=16)
    net = init(0, arch)
    assert encode(net, _images(rng, 7, arch)).shape == (7, 64)


def test_identical_images_give_identical_features(tiny_net, tiny_arch, rng):
    image = _images(rng, 1, tiny_arch)
    features = encode(tiny_net, np.concatenate([image, image])).data
    np.testing.assert_array_equal(features[0], features[1])


def test_encode_rejects_wrong_image_size(tiny_net):
    with pytest.raises(ShapeError):
        encode(tiny_net, np.zeros((2, 3, 8, 8)))


def test_forward_is_pure(tiny_net, tiny_arch, rng):
    """Two forward passes over the same images give the same bytes."""
    images = _images(rng, 3, tiny_arch)
    first = main_logits(tiny_net, encode(tiny_net, images)).data
    second = main_logits(tiny_net, encode(tiny_net, images)).data
    assert first.tobytes() == second.tobytes()


def test_zero_weight_heads_return_bias(tiny_net, tiny_arch, rng):
    tiny_net.params["main.weight"].data[:] = 0.0
    tiny_net.params["main.bias"].data[:] = [0.5, -1.0, 2.0]
    tiny_net.params["pretext.weight"].data[:] = 0.0
    features = encode(tiny_net, _images(rng, 4, tiny_arch))
    np.testing.assert_array_equal(main_logits(tiny_net, features).data, np.tile([0.5, -1.0, 2.0], (4, 1)))
    pretext = pretext_logits(tiny_net, features)
    assert pretext.shape == (4, 4)
    assert not np.any(pretext.data)


@pytest.mark.parametrize(
    "group, main_changes, pretext_changes",
    [("main.weight", True, False), ("pretext.weight", False, True), ("encoder.dense.weight", True, True)],
    ids=["main_head", "pretext_head", "encoder"],
)
def test_perturbations_reach_only_their_heads(tiny_net, tiny_arch, rng, group, main_changes, pretext_changes):
    """Changing one parameter group changes exactly the outputs that depend on it."""
    images = _images(rng, 4, tiny_arch)
    features = encode(tiny_net, images)
    before = main_logits(tiny_net, features).data, pretext_logits(tiny_net, features).data
    tiny_net.params[group].data = tiny_net.params[group].data + 0.5
    features = encode(tiny_net, images)
    after = main_logits(tiny_net, features).data, pretext_logits(tiny_net, features).data
    assert (before[0].tobytes() != after[0].tobytes()) == main_changes
    assert (before[1].tobytes() != after[1].tobytes()) == pretext_changes


def test_encoder_gradient_matches_finite_differences(rng):
    arch = ArchSpec(image_size=4, conv_channels=[2], feature_dim=3, n_classes=2, in_channels=2)
    net = init(1, arch)
    images = rng.uniform(0.1, 1.0, size=(2, 2, 4, 4))
    weight = net.params["encoder.conv0.weight"]

    def features_sum(w):
        net.params["encoder.conv0.weight"] = w
        return ad.tensor_sum(encode(net, images))

    assert ad.finite_diff_check(features_sum, weight) < 1e-4


def test_copy_is_independent(tiny_net):
    clone = tiny_net.copy()
    clone.params["main.bias"].data = clone.params["main.bias"].data + 1.0
    assert not np.array_equal(clone.params["main.bias"].data, tiny_net.params["main.bias"].data)


def test_from_state_rejects_wrong_shapes(tiny_net, tiny_arch):
    state = tiny_net.state_dict()
    state["main.bias"] = np.zeros(7)
    with pytest.raises(ShapeError):
        MultiHeadNet.from_state(tiny_arch, state)


def test_checkpoint_round_trip(tiny_net, tiny_arch, tmp_path):
    """A checkpoint restores the architecture and every parameter bit for bit."""
    path = tmp_path / "net.ckpt"
    save_checkpoint(tiny_net, path)
    assert path.read_bytes().startswith(b"SSDA1")
    restored = load_net(path, tiny_arch.image_size)
    assert restored.arch == tiny_arch
    for name, tensor in tiny_net.params.items():
        assert restored.params[name].data.tobytes() == tensor.data.tobytes()


def test_load_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_load_checkpoint_rejects_truncated_files(tiny_net, tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(tiny_net, path)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)

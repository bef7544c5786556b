"""
Tests for the residual MLP: gating, batch normalization, embeddings and checkpoints.
"""
import numpy as np
import pytest

from mcsd.core.exceptions import ShapeError, UsageError
from mcsd.models import NetworkSpec
from mcsd.services.resnet import (
    BatchNormState,
    GateMask,
    ResidualNet,
    batchnorm_forward,
    embed,
    features,
    forward,
    from_checkpoint,
    load_checkpoint,
    parameter_shapes,
    save_checkpoint,
    to_checkpoint,
)
from mcsd.utils.instrumentation import sample_value


def _stem_head(net, x):
    h = x @ net.params["stem.weight"] + net.params["stem.bias"]
    return h @ net.params["head.weight"] + net.params["head.bias"]


def _zero_branches(net):
    for name in net.params:
        if name.startswith("blocks.") and (".fc1." in name or ".fc2." in name):
            net.params[name][:] = 0.0
    return net


@pytest.mark.unit
def test_parameter_shapes(small_spec):
    shapes = parameter_shapes(small_spec)
    assert shapes["stem.weight"] == (3, 4)
    assert shapes["blocks.2.bn.gamma"] == (4,)
    assert shapes["head.weight"] == (4, 3)
    assert len([n for n in shapes if n.startswith("blocks.")]) == 3 * 6


@pytest.mark.unit
def test_zero_branches_make_every_block_the_identity(small_net, rng):
    """With F = 0 every mask gives head(stem(x))."""
    net = _zero_branches(small_net)
    x = rng.standard_normal((5, 3))
    expected = _stem_head(net, x)
    for gates in ([True, True, True], [False, True, False], [True, False, True]):
        mask = GateMask(tuple(gates), (2.0, 3.0, 4.0))
        np.testing.assert_allclose(forward(net, x, mask), expected, rtol=0, atol=1e-12)


@pytest.mark.unit
def test_all_off_mask_skips_every_block(small_net, rng):
    x = rng.standard_normal((5, 3))
    np.testing.assert_allclose(forward(small_net, x, GateMask.all_off(3)), _stem_head(small_net, x),
                               rtol=0, atol=1e-12)


@pytest.mark.unit
def test_scaled_constant_block(scalar_net):
    """Identity stem and head, F(x) = 1, gate on with scale 2: output x + 2."""
    x = np.array([[0.5], [-1.25], [3.0]])
    mask = GateMask((True,), (2.0,))
    np.testing.assert_allclose(features(scalar_net, x, mask), x + 2.0)
    logits = forward(scalar_net, x, mask)
    np.testing.assert_allclose(logits[:, 0], x[:, 0] + 2.0)
    np.testing.assert_array_equal(logits[:, 1], 0.0)


@pytest.mark.unit
def test_forward_shape_errors(small_net):
    with pytest.raises(ShapeError):
        forward(small_net, np.zeros((2, 4)), GateMask.all_on(3))
    with pytest.raises(ShapeError):
        forward(small_net, np.zeros((2, 3)), GateMask.all_on(2))


@pytest.mark.unit
def test_gate_mask_validation():
    with pytest.raises(ShapeError):
        GateMask((True, False), (1.0,))
    with pytest.raises(ValueError):
        GateMask((True,), (0.0,))
    assert GateMask.from_gates([1, 0, 1]).active == 2


@pytest.mark.unit
def test_batchnorm_constant_column():
    x = np.column_stack([np.full(4, 7.0), np.arange(4.0)])
    out = batchnorm_forward(x, 1.0, 0.0, "train")
    np.testing.assert_array_equal(out[:, 0], 0.0)


@pytest.mark.unit
def test_batchnorm_train_standardizes(rng):
    x = rng.standard_normal((50, 3)) * 4.0 + 2.0
    out = batchnorm_forward(x, 1.0, 0.0, "train")
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)


@pytest.mark.unit
def test_batchnorm_eval_with_unit_statistics_is_affine(rng):
    x = rng.standard_normal((6, 2))
    out = batchnorm_forward(x, 2.0, 1.0, "eval", eps=1e-5)
    np.testing.assert_allclose(out, 2.0 * x / np.sqrt(1.0 + 1e-5) + 1.0, rtol=1e-12, atol=1e-12)


@pytest.mark.unit
def test_batchnorm_updates_running_statistics(rng):
    x = rng.standard_normal((8, 2)) + 3.0
    state = BatchNormState.fresh(2)
    batchnorm_forward(x, 1.0, 0.0, "train", momentum=0.9, state=state)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0))


@pytest.mark.unit
def test_batchnorm_rejects_single_sample_batch():
    with pytest.raises(UsageError):
        batchnorm_forward(np.ones((1, 3)), 1.0, 0.0, "train")


@pytest.mark.unit
def test_embeddings_have_unit_norm(small_net, rng):
    x = rng.standard_normal((10, 3))
    emb = embed(small_net, x, GateMask.from_gates([True, False, True]))
    np.testing.assert_allclose(np.linalg.norm(emb.vectors, axis=1), 1.0, atol=1e-9)
    assert not emb.degenerate.any()


@pytest.mark.unit
def test_embeddings_are_deterministic(small_net, rng):
    x = rng.standard_normal((4, 3))
    mask = GateMask.all_on(3)
    np.testing.assert_array_equal(embed(small_net, x, mask).vectors, embed(small_net, x, mask).vectors)


@pytest.mark.unit
def test_zero_embedding_is_flagged(scalar_net):
    scalar_net.params["stem.weight"][:] = 0.0
    emb = embed(scalar_net, np.array([[1.0]]), GateMask.all_off(1))
    assert emb.degenerate.tolist() == [True]
    assert np.all(np.isfinite(emb.vectors))


@pytest.mark.unit
def test_removed_block_matches_gated_off_block(rng):
    """Physically deleting a block is bit-identical to gating it off."""
    spec = NetworkSpec(input_dim=3, hidden_dim=5, num_blocks=4, num_classes=2)
    net = ResidualNet.initialize(spec, seed=11)
    x = rng.standard_normal((7, 3))
    for index in range(4):
        gates = [True] * 4
        gates[index] = False
        gated = forward(net, x, GateMask.from_gates(gates))
        removed = forward(net.without_block(index), x, GateMask.all_on(3))
        np.testing.assert_array_equal(gated, removed)


@pytest.mark.unit
def test_cannot_remove_only_block(scalar_net):
    with pytest.raises(UsageError):
        scalar_net.without_block(0)


@pytest.mark.unit
def test_forward_cost_grows_with_active_blocks(small_net, rng):
    x = rng.standard_normal((4, 3))
    costs = []
    for active in range(4):
        before = sample_value("mcsd_forward_flops_total")
        forward(small_net, x, GateMask.from_gates([i < active for i in range(3)]))
        costs.append(sample_value("mcsd_forward_flops_total") - before)
    assert costs == sorted(costs)
    assert len(set(costs)) == 4


@pytest.mark.unit
def test_checkpoint_round_trip(small_net, rng, tmp_path):
    x = rng.standard_normal((3, 3))
    small_net.bn_state[1].running_mean[:] = 0.25
    path = save_checkpoint(small_net, tmp_path / "ckpt.json", {"note": "unit"})
    restored, metadata = load_checkpoint(path)
    assert metadata == {"note": "unit"}
    assert restored.spec == small_net.spec
    for name, value in small_net.params.items():
        np.testing.assert_array_equal(restored.params[name], value)
    np.testing.assert_array_equal(restored.bn_state[1].running_mean, 0.25)
    np.testing.assert_array_equal(forward(restored, x, GateMask.all_on(3)),
                                  forward(small_net, x, GateMask.all_on(3)))


@pytest.mark.unit
def test_checkpoint_rejects_foreign_payload(small_net):
    payload = to_checkpoint(small_net)
    payload["kind"] = "something-else"
    with pytest.raises(ValueError):
        from_checkpoint(payload)
    payload = to_checkpoint(small_net)
    payload["format_version"] = "99"
    with pytest.raises(ValueError):
        from_checkpoint(payload)


@pytest.mark.unit
def test_network_rejects_non_finite_parameters(small_net):
    params = {k: v.copy() for k, v in small_net.params.items()}
    params["head.bias"][0] = np.inf
    with pytest.raises(ValueError):
        ResidualNet(small_net.spec, params)

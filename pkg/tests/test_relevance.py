import numpy as np
import pytest
import torch
import torch.nn as nn

from contseg.checks import _random_small_net
from contseg.errors import CapabilityError, ContractError
from contseg.net import DTYPE, NetConfig, SegNetwork, snapshot
from contseg.relevance import (
    RelevanceField,
    class_relevance,
    consistency_gap,
    lrp_avg_pool,
    lrp_conv,
    consistency_loss,
    propagate_relevance,
    save_relevance_dump,
)


def test_single_dense_layer_redistribution():
    # contributions (1, 3) into one output neuron with relevance 1
    x = torch.tensor([1.0, 3.0], dtype=DTYPE).reshape(1, 2, 1, 1)
    weight = torch.ones((1, 2, 1, 1), dtype=DTYPE)
    r_out = torch.ones((1, 1, 1, 1), dtype=DTYPE)
    r_in, min_denom, absorbed = lrp_conv(x, weight, r_out, eps=1e-6)
    assert r_in.flatten().tolist() == pytest.approx([0.25, 0.75], abs=1e-12)
    assert min_denom == pytest.approx(4.0)
    assert abs(absorbed) < 1e-12


def test_zero_contributions_absorb_relevance():
    x = torch.zeros((1, 2, 1, 1), dtype=DTYPE)
    weight = torch.ones((1, 2, 1, 1), dtype=DTYPE)
    r_out = torch.ones((1, 1, 1, 1), dtype=DTYPE)
    r_in, _, absorbed = lrp_conv(x, weight, r_out, eps=1e-6)
    assert torch.equal(r_in, torch.zeros_like(r_in))
    assert absorbed == pytest.approx(1.0)


def test_cancellation_absorbs_but_logs(caplog):
    # contributions +1 and -1 sum to zero: relevance is redistributed with
    # huge opposite values that cancel, absorbing the whole unit
    x = torch.tensor([1.0, 1.0], dtype=DTYPE).reshape(1, 2, 1, 1)
    weight = torch.tensor([[1.0], [-1.0]], dtype=DTYPE).reshape(1, 2, 1, 1)
    r_out = torch.ones((1, 1, 1, 1), dtype=DTYPE)
    r_in, min_denom, absorbed = lrp_conv(x, weight, r_out, eps=1e-6)
    assert min_denom == 0.0
    assert absorbed == pytest.approx(1.0)


def test_avg_pool_distributes_proportionally():
    x = torch.tensor([[1.0, 3.0], [0.0, 0.0]], dtype=DTYPE).reshape(1, 1, 2, 2)
    r_out = torch.ones((1, 1, 1, 1), dtype=DTYPE)
    r_in, _, absorbed = lrp_avg_pool(x, r_out, eps=1e-6)
    assert r_in.flatten().tolist() == pytest.approx([0.25, 0.75, 0.0, 0.0])
    assert abs(absorbed) < 1e-12


def test_conservation_on_random_net(rng):
    net, _ = _random_small_net(rng)
    x = torch.tensor(rng.normal(size=(1, net.config.in_channels, 8, 8)), dtype=DTYPE)
    bundle = net.forward_bundle(x)
    field = propagate_relevance(net, bundle, net.class_ids[0])
    if min(field.layer_min_denominator.values()) > 1e-5:
        seed_total = field.seed_total()[0].detach().item()
        got = field.input_relevance.sum().detach().item()
        assert got == pytest.approx(seed_total, rel=1e-6)


def test_propagation_records_every_stage(rng):
    net = SegNetwork(NetConfig(in_channels=2, stage_channels=(3, 4),
                               pool_after_stage=(True, False)), class_ids=[1], seed=2)
    x = torch.tensor(rng.normal(size=(1, 2, 8, 8)), dtype=DTYPE)
    bundle = net.forward_bundle(x)
    field = propagate_relevance(net, bundle, 1)
    assert set(field.stage_relevance) == {0, 1}
    assert field.stage_relevance[1].shape == bundle.stages[1].shape
    assert field.input_relevance.shape == x.shape


def test_to_stage_stops_early(rng):
    net = SegNetwork(NetConfig(in_channels=2, stage_channels=(3, 4),
                               pool_after_stage=(True, False)), class_ids=[1], seed=2)
    x = torch.tensor(rng.normal(size=(1, 2, 8, 8)), dtype=DTYPE)
    bundle = net.forward_bundle(x)
    field = propagate_relevance(net, bundle, 1, to_stage=1)
    assert set(field.stage_relevance) == {1}
    assert field.input_relevance is None


def test_unsupported_layer_kind_named(rng):
    net = SegNetwork(NetConfig(in_channels=2, stage_channels=(3,),
                               pool_after_stage=(False,)), class_ids=[1], seed=2)
    net.features[1] = nn.Tanh()
    x = torch.tensor(rng.normal(size=(1, 2, 8, 8)), dtype=DTYPE)
    outs = []
    cur = x
    for m in net.features:
        cur = m(cur)
        outs.append(cur)
    from contseg.net import FeatureBundle

    bundle = FeatureBundle(input=x, layer_outputs=outs, stages=[outs[-1]],
                           features=outs[-1], embeddings=outs[-1].flatten(2),
                           logits=net.head(outs[-1]),
                           soft_map=torch.softmax(net.head(outs[-1]), dim=1))
    with pytest.raises(CapabilityError, match="features.1"):
        propagate_relevance(net, bundle, 1)


def test_invalid_class_row(rng):
    net, _ = _random_small_net(rng)
    x = torch.tensor(rng.normal(size=(1, net.config.in_channels, 8, 8)), dtype=DTYPE)
    bundle = net.forward_bundle(x)
    with pytest.raises(ContractError):
        propagate_relevance(net, bundle, 999)


def _planted_field(tensor):
    return RelevanceField(class_id=1, aggregation="logit_sum",
                          seed=tensor, stage_relevance={0: tensor},
                          input_relevance=None, layer_min_denominator={},
                          layer_absorbed={})


def test_class_relevance_uniform_field():
    c, h, w = 4, 3, 3
    field = _planted_field(torch.full((1, c, h, w), 1.0 / (c * h * w), dtype=DTYPE))
    g = class_relevance(field, 0)
    assert g.flatten().tolist() == pytest.approx([1.0 / c] * c)


def test_class_relevance_indicator_field():
    t = torch.zeros((1, 4, 2, 2), dtype=DTYPE)
    t[0, 3] = 2.5
    g = class_relevance(_planted_field(t), 0)
    assert g.flatten().tolist() == pytest.approx([0.0, 0.0, 0.0, 10.0])


def test_class_relevance_matches_brute_force(rng):
    t = torch.tensor(rng.normal(size=(2, 5, 3, 4)), dtype=DTYPE)
    g = class_relevance(_planted_field(t), 0)
    brute = np.zeros((2, 5))
    arr = t.numpy()
    for b in range(2):
        for c in range(5):
            brute[b, c] = arr[b, c].sum()
    assert np.allclose(g.numpy(), brute, atol=1e-12)


def test_nsc_identical_models_is_zero(rng):
    net, _ = _random_small_net(rng)
    old = snapshot(net)
    x = torch.tensor(rng.normal(size=(2, net.config.in_channels, 8, 8)), dtype=DTYPE)
    loss = consistency_loss(old, net, x, net.class_ids)
    assert loss.detach().item() == 0.0


def test_nsc_empty_old_classes_is_zero(rng):
    net, _ = _random_small_net(rng)
    x = torch.tensor(rng.normal(size=(1, net.config.in_channels, 8, 8)), dtype=DTYPE)
    assert consistency_loss(snapshot(net), net, x, []).item() == 0.0


def test_consistency_gap_planted_vectors():
    # two classes whose vectors differ by (1,0,...) and (0,1,...): loss (1+1)/2
    g_old = torch.zeros((1, 4), dtype=DTYPE)
    d1 = torch.zeros((1, 4), dtype=DTYPE)
    d1[0, 0] = 1.0
    d2 = torch.zeros((1, 4), dtype=DTYPE)
    d2[0, 1] = 1.0
    per_class = [consistency_gap(g_old, g_old + d1), consistency_gap(g_old, g_old + d2)]
    loss = sum(per_class) / len(per_class)
    assert float(loss) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ContractError):
        consistency_gap(torch.zeros((1, 3)), torch.zeros((1, 4)))


def test_nsc_symmetric_and_nonnegative(rng):
    cfg = NetConfig(in_channels=2, stage_channels=(3, 4), pool_after_stage=(True, False))
    a = SegNetwork(cfg, class_ids=[1, 2], seed=1)
    b = SegNetwork(cfg, class_ids=[1, 2], seed=2)
    x = torch.tensor(rng.normal(size=(1, 2, 8, 8)), dtype=DTYPE)
    ab = consistency_loss(snapshot(a), b, x, [1, 2]).detach().item()
    ba = consistency_loss(snapshot(b), a, x, [1, 2]).detach().item()
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-12)


def test_nsc_gradients_reach_only_the_new_model(rng):
    cfg = NetConfig(in_channels=2, stage_channels=(3,), pool_after_stage=(False,))
    a = SegNetwork(cfg, class_ids=[1, 2], seed=1)
    b = SegNetwork(cfg, class_ids=[1, 2], seed=2)
    old = snapshot(a)
    x = torch.tensor(rng.normal(size=(1, 2, 8, 8)), dtype=DTYPE)
    loss = consistency_loss(old, b, x, [1, 2])
    loss.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in b.parameters())
    assert all(p.grad is None for p in old.parameters())


def test_relevance_dump(tmp_path):
    vectors = {1: torch.tensor([1.0, 2.0], dtype=DTYPE)}
    path = tmp_path / "relevance.json"
    save_relevance_dump(path, vectors)
    import json

    data = json.loads(path.read_text())
    assert data == {"1": [1.0, 2.0]}

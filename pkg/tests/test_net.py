import numpy as np
import pytest
import torch

from contseg.data import LabeledImage, default_universe, generate_dataset, SyntheticSceneSpec
from contseg.errors import ConfigurationError, ContractError
from contseg.net import (
    DTYPE,
    NetConfig,
    SegNetwork,
    extend_head,
    forward,
    load_params,
    predict,
    save_params,
    snapshot,
)


def make_net(class_ids=(1, 2, 3), seed=0, **cfg):
    params = dict(in_channels=3, stage_channels=(4, 6), pool_after_stage=(True, False))
    params.update(cfg)
    return SegNetwork(NetConfig(**params), class_ids=list(class_ids), seed=seed)


def rand_input(rng, b=2, c=3, h=16, w=16):
    return torch.tensor(rng.normal(size=(b, c, h, w)), dtype=DTYPE)


def test_zero_weight_net_gives_uniform_soft_map(rng):
    net = make_net()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    bundle = net.forward_bundle(rand_input(rng))
    k = net.num_outputs
    assert torch.allclose(bundle.soft_map, torch.full_like(bundle.soft_map, 1.0 / k))
    assert torch.allclose(bundle.logits, torch.zeros_like(bundle.logits))


def test_forward_determinism(rng):
    net = make_net()
    x = rand_input(rng)
    a = net.forward_bundle(x)
    b = net.forward_bundle(x)
    assert torch.equal(a.logits, b.logits)
    assert torch.equal(a.features, b.features)


def test_reference_net_shape_arithmetic():
    # independent shape calculator: one halving per pooled stage
    cfg = NetConfig()  # 8/16/32 with two pooled stages
    h, w = 32, 32
    expect = (h // 2 ** sum(cfg.pool_after_stage), w // 2 ** sum(cfg.pool_after_stage))
    assert cfg.feature_hw(h, w) == expect == (8, 8)
    net = SegNetwork(cfg, class_ids=[1, 2, 3, 4], seed=1)
    x = torch.zeros((1, 3, 32, 32), dtype=DTYPE)
    logits = net.forward(x)
    assert tuple(logits.shape) == (1, 5, 8, 8)


def test_soft_map_normalization(rng):
    net = make_net(seed=3)
    bundle = net.forward_bundle(rand_input(rng))
    sums = bundle.soft_map.sum(dim=1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_embeddings_are_row_major_flattening(rng):
    net = make_net()
    bundle = net.forward_bundle(rand_input(rng))
    b, c, h, w = bundle.features.shape
    manual = bundle.features.reshape(b, c, h * w)
    assert torch.equal(bundle.embeddings, manual)


def test_layer_outputs_expose_every_module(rng):
    net = make_net()
    bundle = net.forward_bundle(rand_input(rng))
    assert len(bundle.layer_outputs) == len(net.features)
    assert len(bundle.stages) == len(net.config.stage_channels)


def test_forward_channel_mismatch():
    net = make_net()
    img = LabeledImage(pixels=np.zeros((1, 16, 16)), labels=np.zeros((16, 16), dtype=np.int16))
    with pytest.raises(ContractError):
        forward(net, img)


def test_extend_head_preserves_existing_rows(rng):
    net = make_net(class_ids=(1, 2))
    x = rand_input(rng)
    before = net.forward(x)
    wider = extend_head(net, [5, 7])
    assert wider.class_ids == [1, 2, 5, 7]
    assert torch.equal(wider.head.weight[:3], net.head.weight)
    assert torch.equal(wider.head.bias[:3], net.head.bias)
    after = wider.forward(x)
    assert torch.equal(after[:, :3], before)
    # zero_bg_bias scheme: new rows have zero weights and the background bias
    assert torch.equal(wider.head.weight[3:], torch.zeros_like(wider.head.weight[3:]))
    assert torch.all(wider.head.bias[3:] == net.head.bias[0])


def test_extend_head_zero_scheme(rng):
    net = make_net(class_ids=(1,), head_init="zero")
    wider = extend_head(net, [2])
    assert torch.all(wider.head.bias[2:] == 0)


def test_extend_head_degenerate_inputs():
    net = make_net(class_ids=(1, 2))
    with pytest.raises(ContractError):
        extend_head(net, [])
    with pytest.raises(ContractError):
        extend_head(net, [2])


def test_snapshot_isolated_from_training(rng):
    net = make_net()
    snap = snapshot(net)
    x = rand_input(rng)
    ref = snap.forward(x).detach().clone()
    # one gradient step on the live network
    loss = net.forward(x).sum()
    loss.backward()
    with torch.no_grad():
        for p in net.parameters():
            p -= 0.1 * p.grad
    assert torch.equal(snap.forward(x), ref)
    assert not torch.equal(net.forward(x), ref)
    assert snap.frozen and not any(p.requires_grad for p in snap.parameters())


def test_snapshot_copy_fidelity_and_idempotence(rng):
    net = make_net(seed=5)
    snap = snapshot(net)
    snap2 = snapshot(snap)
    x = rand_input(rng)
    assert torch.equal(net.forward(x), snap.forward(x))
    assert torch.equal(snap.forward(x), snap2.forward(x))


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    net = make_net(class_ids=(1, 4, 9), seed=11)
    path = tmp_path / "net.npz"
    save_params(path, net)
    loaded = load_params(path)
    assert loaded.class_ids == net.class_ids
    for (na, pa), (nb, pb) in zip(net.named_parameters(), loaded.named_parameters()):
        assert na == nb
        assert torch.equal(pa, pb)
        assert pb.dtype == torch.float64
    x = rand_input(rng)
    assert torch.equal(net.forward(x), loaded.forward(x))


def test_rows_from_labels_and_errors():
    net = make_net(class_ids=(3, 7))
    labels = np.array([[0, 3], [7, -1]], dtype=np.int16)
    rows = net.rows_from_labels(labels)
    assert rows.tolist() == [[0, 1], [2, -1]]
    with pytest.raises(ContractError):
        net.rows_from_labels(np.array([[99]], dtype=np.int16))


def test_predict_returns_class_ids():
    spec = SyntheticSceneSpec(height=16, width=16, classes=default_universe(2), seed=1)
    img = generate_dataset(spec, 1)[0]
    net = make_net(class_ids=(1, 2))
    out = predict(net, img.pixels)
    assert out.shape == img.labels.shape
    assert set(np.unique(out).tolist()) <= {0, 1, 2}


def test_net_config_validation():
    with pytest.raises(ConfigurationError):
        NetConfig(stage_channels=(), pool_after_stage=()).validate()
    with pytest.raises(ConfigurationError):
        NetConfig(stage_channels=(4,), pool_after_stage=(True,)).validate()
    with pytest.raises(ConfigurationError):
        NetConfig(kernel_size=2).validate()
    with pytest.raises(ContractError):
        NetConfig().feature_hw(30, 30)  # not divisible by the pooling factor

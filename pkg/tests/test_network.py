import numpy as np
import pytest

from cmdseg.network import (ArchConfig, LayerSpec, SETTINGS, apply_setting, build_arch,
                            build_network, count_parameters, dilated_mini,
                            forward_modality, load_checkpoint, save_checkpoint, unet_mini)
from cmdseg.norm import NormSpec
from cmdseg.tensor import Tensor


def tiny_arch(setting="ours", norm_kind="batch", num_classes=3):
    layers = [
        LayerSpec("conv", out_channels=4),
        LayerSpec("norm", norm=NormSpec(norm_kind, 4)),
        LayerSpec("relu"),
        LayerSpec("conv", out_channels=4),
        LayerSpec("norm", norm=NormSpec(norm_kind, 4)),
        LayerSpec("relu"),
        LayerSpec("logits_conv", out_channels=num_classes),
    ]
    cfg = ArchConfig("tiny", 1, num_classes, layers, setting,
                     split_prefix=3, split_suffix=1)
    return apply_setting(cfg)


# -- sharing annotations ----------------------------------------------

def test_sharing_annotations_per_setting():
    def pattern(setting):
        return [l.sharing for l in tiny_arch(setting).layers]

    assert pattern("individual") == ["per-modality"] * 7
    assert pattern("joint") == ["shared"] * 7
    assert pattern("joint_kd") == ["shared"] * 7
    for setting in ("chilopod", "ours"):
        assert pattern(setting) == ["shared", "per-modality", "shared",
                                    "shared", "per-modality", "shared", "shared"]
    assert pattern("y_shaped") == ["per-modality"] * 3 + ["shared"] * 4
    assert pattern("x_shaped") == ["per-modality"] * 3 + ["shared"] * 3 + ["per-modality"]


def test_bad_setting_and_split_rejected():
    with pytest.raises(ValueError):
        tiny_arch("pyramidal")
    cfg = tiny_arch("ours")
    cfg.setting = "y_shaped"
    cfg.split_prefix = 0
    with pytest.raises(ValueError):
        apply_setting(cfg)


# -- parameter accounting ---------------------------------------------

def count(setting, arch=tiny_arch):
    return count_parameters(build_network(arch(setting), seed=0))


def test_individual_doubles_joint():
    tj, _ = count("joint")
    ti, bi = count("individual")
    assert ti == 2 * tj
    assert bi["shared"] == 0 and bi["A"] == bi["B"] == tj


def test_chilopod_exceeds_joint_by_duplicated_affines():
    tj, _ = count("joint")
    tc, bc = count("chilopod")
    # per norm layer one extra (gamma, beta) pair of that layer's channel count
    extra = sum(2 * l.norm.channels for l in tiny_arch("ours").layers if l.kind == "norm")
    assert tc - tj == extra
    assert bc["A"] == bc["B"]


def test_param_ordering_across_settings():
    totals = {s: count(s)[0] for s in SETTINGS}
    assert totals["joint"] == totals["joint_kd"]
    assert totals["chilopod"] == totals["ours"]
    assert totals["joint"] < totals["chilopod"] < totals["individual"]
    assert totals["joint"] < totals["y_shaped"] < totals["individual"]
    assert totals["y_shaped"] < totals["x_shaped"] <= totals["individual"]


def test_known_toy_counts():
    # single shared 3x3 conv 1->2 with bias plus batch norm on 2 channels:
    # kernel 18 + bias 2 + gamma 2 + beta 2 = 24 trainables
    layers = [LayerSpec("conv", out_channels=2),
              LayerSpec("norm", norm=NormSpec("batch", 2)),
              LayerSpec("relu"),
              LayerSpec("logits_conv", out_channels=2)]
    cfg = apply_setting(ArchConfig("t", 1, 2, layers, "joint"))
    total, by = count_parameters(build_network(cfg, seed=0))
    # logits conv: 2*2*3*3 + 2 = 38
    assert total == 24 + 38
    assert by == {"shared": 62, "A": 0, "B": 0}


# -- initialization ---------------------------------------------------

def test_he_init_scale():
    layers = [LayerSpec("conv", out_channels=64, kernel=3),
              LayerSpec("logits_conv", out_channels=2)]
    cfg = apply_setting(ArchConfig("t", 16, 2, layers, "joint"))
    store = build_network(cfg, seed=5)
    k = store.conv[(0, "shared")]["kernel"].data
    sigma = np.sqrt(2.0 / (16 * 9))
    assert abs(k.std() / sigma - 1.0) < 0.05
    assert abs(k.mean()) < 0.01
    assert np.all(store.conv[(0, "shared")]["bias"].data == 0.0)


def test_modality_scopes_differ_at_init():
    store = build_network(tiny_arch("individual"), seed=1)
    ka = store.conv[(0, "A")]["kernel"].data
    kb = store.conv[(0, "B")]["kernel"].data
    assert ka.shape == kb.shape
    assert not np.array_equal(ka, kb)


def test_build_network_deterministic():
    a = build_network(tiny_arch("ours"), seed=3)
    b = build_network(tiny_arch("ours"), seed=3)
    for (pa, pb) in zip(a.trainables(), b.trainables()):
        assert pa[:3] == pb[:3]
        assert np.array_equal(pa[3].data, pb[3].data)


# -- validation of layer chains ---------------------------------------

def test_channel_chain_validation():
    bad = ArchConfig("t", 1, 2, [LayerSpec("conv", out_channels=4),
                                 LayerSpec("norm", norm=NormSpec("batch", 8)),
                                 LayerSpec("logits_conv", out_channels=2)], "joint")
    with pytest.raises(ValueError):
        build_network(apply_setting(bad), seed=0)
    no_logits = ArchConfig("t", 1, 2, [LayerSpec("conv", out_channels=4)], "joint")
    with pytest.raises(ValueError):
        build_network(apply_setting(no_logits), seed=0)
    wrong_classes = ArchConfig("t", 1, 3, [LayerSpec("logits_conv", out_channels=2)], "joint")
    with pytest.raises(ValueError):
        build_network(apply_setting(wrong_classes), seed=0)


# -- forward ----------------------------------------------------------

@pytest.mark.parametrize("factory", [dilated_mini, unet_mini])
def test_builtin_arch_forward_shapes(factory):
    cfg = factory(num_classes=3, norm_kind="instance")
    store = build_network(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 16, 16)))
    for m in ("A", "B"):
        out = forward_modality(cfg, store, x, m, mode="train")
        assert out.shape == (2, 3, 16, 16)


def test_build_arch_by_name():
    assert build_arch("dilated-mini", 4).name == "dilated-mini"
    assert build_arch("unet-mini", 4).name == "unet-mini"
    with pytest.raises(ValueError):
        build_arch("resnet-50", 4)


def test_per_modality_routing_changes_output():
    cfg = tiny_arch("ours", norm_kind="instance")
    store = build_network(cfg, seed=2)
    # push the two normalization scopes apart
    store.norms[(1, "B")].gamma.data[:] = 3.0
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 8, 8)))
    oa = forward_modality(cfg, store, x, "A", mode="eval")
    ob = forward_modality(cfg, store, x, "B", mode="eval")
    assert not np.allclose(oa.data, ob.data)
    with pytest.raises(ValueError):
        forward_modality(cfg, store, x, "C")


def test_shared_routing_identical_output():
    cfg = tiny_arch("joint", norm_kind="instance")
    store = build_network(cfg, seed=2)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 8, 8)))
    oa = forward_modality(cfg, store, x, "A", mode="eval")
    ob = forward_modality(cfg, store, x, "B", mode="eval")
    assert np.array_equal(oa.data, ob.data)


# -- checkpoints ------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_arch("ours")
    store = build_network(cfg, seed=4)
    store.norms[(1, "A")].running_mean[:] = 0.25
    p = tmp_path / "ck.zip"
    save_checkpoint(p, cfg, store)
    cfg2, store2 = load_checkpoint(p)
    assert cfg2.setting == "ours"
    assert [l.sharing for l in cfg2.layers] == [l.sharing for l in cfg.layers]
    for (a, b) in zip(store.trainables(), store2.trainables()):
        assert a[:3] == b[:3]
        assert np.array_equal(a[3].data, b[3].data)
    assert np.array_equal(store2.norms[(1, "A")].running_mean,
                          store.norms[(1, "A")].running_mean)


def test_checkpoint_bytes_deterministic(tmp_path):
    cfg = tiny_arch("ours")
    store = build_network(cfg, seed=4)
    p1, p2 = tmp_path / "a.zip", tmp_path / "b.zip"
    save_checkpoint(p1, cfg, store)
    save_checkpoint(p2, cfg, store)
    assert p1.read_bytes() == p2.read_bytes()

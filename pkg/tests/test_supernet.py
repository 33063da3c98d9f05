"""Tests for the elastic weight store: kernel transforms, channel sorting,
masked vs extracted forward, BN recalibration, combinatorics, checkpoints."""

import numpy as np
import pytest

from elastinet.checkpoint import load_subnet, load_supernet, save_subnet, save_supernet
from elastinet.space import (
    ArchConfig,
    ArchSpace,
    SpaceError,
    canonical_arch,
    count_subnetworks,
    desk_space,
    enumerate_archs,
    max_arch,
    mobile_space,
    random_arch,
    transform_param_count,
    uniform_arch,
    validate_arch,
)
from elastinet.supernet import (
    ElasticMBConv,
    Supernet,
    channel_importance,
    effective_kernel,
    extract_subnet,
    recalibrate_bn,
    sort_channels,
)


@pytest.fixture(scope="module")
def net():
    return Supernet(desk_space(), seed=0)


def small_space(**kw):
    base = dict(n_units=2, depth_choices=((1, 2), (1, 2)),
                width_ratio_choices=(2, 3), kernel_choices=(3, 5),
                resolution_choices=(16,), base_widths=(8, 12),
                stem_channels=4, n_classes=5)
    base.update(kw)
    return ArchSpace(**base)


# ---------------------------------------------------------------------------
# combinatorics

def test_count_paper_space():
    n = count_subnetworks(mobile_space())
    assert n == 7371 ** 5
    assert 1e19 < n < 3e19


def test_count_trivial_space():
    sp = small_space(n_units=1, depth_choices=((1,),), width_ratio_choices=(2,),
                     kernel_choices=(3,), base_widths=(8,))
    assert count_subnetworks(sp) == 1


def test_count_matches_enumeration_36():
    sp = small_space(width_ratio_choices=(2,))
    # 2 units, depths {1,2}, 2 kernels, 1 width -> (2+4)^2 = 36
    assert count_subnetworks(sp) == 36
    archs = enumerate_archs(sp, include_resolutions=False)
    labels = {a.label() for a in archs}
    assert len(labels) == 36


def test_count_matches_enumeration_desk():
    sp = desk_space()
    n = count_subnetworks(sp)
    assert n == 729000
    archs = enumerate_archs(sp, include_resolutions=False)
    assert len({a.label() for a in archs}) == n


def test_transform_param_count():
    assert transform_param_count(desk_space()) == 706
    assert transform_param_count(small_space(kernel_choices=(3,))) == 0
    assert transform_param_count(small_space(kernel_choices=(3, 5))) == 81


def test_space_validation():
    with pytest.raises(SpaceError):
        small_space(kernel_choices=(3, 4))  # even kernel
    with pytest.raises(SpaceError):
        small_space(resolution_choices=(4,))  # below minimum
    with pytest.raises(SpaceError):
        small_space(depth_choices=((1, 2),))  # wrong number of units


def test_arch_validation_and_placeholders():
    sp = desk_space()
    arch = uniform_arch(sp, 1, 2, 3)
    validate_arch(sp, arch)
    bad = ArchConfig(depths=(3, 1, 1), kernels=arch.kernels,
                     widths=arch.widths, resolution=arch.resolution)
    with pytest.raises(SpaceError):
        validate_arch(sp, bad)
    # equality modulo unused slots: canonicalization fills placeholders
    a1 = ArchConfig((1, 1, 1), ((3, 5), (3, 3), (3, 7)),
                    ((2, 4), (2, 2), (2, 3)), 24)
    a2 = ArchConfig((1, 1, 1), ((3, 3), (3, 5), (3, 3)),
                    ((2, 2), (2, 3), (2, 4)), 24)
    assert canonical_arch(sp, a1) == canonical_arch(sp, a2)


# ---------------------------------------------------------------------------
# effective kernels

def test_effective_kernel_identity_transform_is_crop(net):
    layer = net.units[0][0]
    k7 = effective_kernel(layer, 7)
    assert k7 is layer.dw_w
    k3 = effective_kernel(layer, 3)
    np.testing.assert_allclose(k3, layer.dw_w[..., 2:5, 2:5], atol=1e-6)


def test_effective_kernel_matmul_oracle():
    rng = np.random.default_rng(1)
    layer = ElasticMBConv(4, 4, 1, (3, 5, 7), 2, rng)
    layer.transforms[5] = rng.standard_normal((25, 25)).astype(np.float32)
    layer.transforms[3] = rng.standard_normal((9, 9)).astype(np.float32)
    k5 = effective_kernel(layer, 5)
    ref5 = (layer.dw_w[..., 1:6, 1:6].reshape(8, 25)
            @ layer.transforms[5]).reshape(8, 1, 5, 5)
    np.testing.assert_allclose(k5, ref5, rtol=1e-6)
    k3 = effective_kernel(layer, 3)
    ref3 = (ref5[..., 1:4, 1:4].reshape(8, 9)
            @ layer.transforms[3]).reshape(8, 1, 3, 3)
    np.testing.assert_allclose(k3, ref3, rtol=1e-5, atol=1e-6)


def test_effective_kernel_rejects_bad_size(net):
    with pytest.raises(Exception):
        effective_kernel(net.units[0][0], 9)


# ---------------------------------------------------------------------------
# channel importance and sorting

def test_importance_argmax():
    rng = np.random.default_rng(2)
    layer = ElasticMBConv(2, 2, 1, (3,), 2, rng)
    layer.project_w = np.zeros_like(layer.project_w)
    layer.project_w[:, 2] = 1.0
    assert channel_importance(layer).argmax() == 2


def test_importance_scaled_block_ordering():
    rng = np.random.default_rng(3)
    layer = ElasticMBConv(2, 2, 1, (3,), 2, rng)
    block = np.abs(rng.standard_normal(layer.project_w.shape[0])) + 0.1
    for c, scale in enumerate([0.1, 2.0, 1.0, 0.5]):
        layer.project_w[:, c, 0, 0] = scale * block
    imp = channel_importance(layer)
    assert list(np.argsort(-imp)) == [1, 2, 3, 0]


def test_importance_permutation_equivariant():
    rng = np.random.default_rng(4)
    layer = ElasticMBConv(3, 3, 1, (3,), 2, rng)
    imp = channel_importance(layer)
    perm = rng.permutation(layer.mid_max)
    layer.project_w = layer.project_w[:, perm]
    np.testing.assert_allclose(channel_importance(layer), imp[perm], rtol=1e-6)


def test_sort_channels_idempotent_and_monotone(net):
    sp = desk_space()
    fresh = Supernet(sp, seed=7)
    layer = fresh.units[1][0]
    sort_channels(layer)
    assert np.all(np.diff(channel_importance(layer)) <= 1e-7)
    w_before = layer.expand_w.copy()
    perm = sort_channels(layer)  # already sorted: identity
    np.testing.assert_array_equal(perm, np.arange(layer.mid_max))
    np.testing.assert_array_equal(layer.expand_w, w_before)


def test_sort_channels_preserves_full_width_function():
    sp = desk_space()
    fresh = Supernet(sp, seed=8)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
    arch = max_arch(sp)
    before = fresh.forward(arch, x)
    for unit in fresh.units:
        for layer in unit:
            sort_channels(layer)
    after = fresh.forward(arch, x)
    np.testing.assert_allclose(after, before, atol=1e-4)
    agree = (after.argmax(axis=1) == before.argmax(axis=1)).mean()
    assert agree >= 0.99


# ---------------------------------------------------------------------------
# masked forward vs extraction

def test_max_arch_forward_equals_extracted_bitwise(net):
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
    arch = max_arch(desk_space())
    masked = net.forward(arch, x)
    sub = extract_subnet(net, arch)
    dense = sub.forward(x)
    np.testing.assert_array_equal(masked, dense)


def test_extraction_equivalence_random_archs(net):
    sp = desk_space()
    rng = np.random.default_rng(11)
    for _ in range(10):
        arch = random_arch(sp, rng)
        x = rng.standard_normal((2, 3, arch.resolution, arch.resolution))
        x = x.astype(np.float32)
        masked = net.forward(arch, x)
        dense = extract_subnet(net, arch).forward(x)
        np.testing.assert_allclose(dense, masked, atol=1e-4)


def test_unused_slot_is_ignored(net):
    sp = desk_space()
    rng = np.random.default_rng(12)
    a1 = ArchConfig((1, 1, 1), ((3, 7), (5, 7), (3, 7)),
                    ((2, 4), (3, 4), (2, 4)), 24)
    a2 = ArchConfig((1, 1, 1), ((3, 3), (5, 5), (3, 3)),
                    ((2, 2), (3, 2), (2, 2)), 24)
    x = rng.standard_normal((2, 3, 24, 24)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(a1, x), net.forward(a2, x))


def test_nesting_depth_weight_subset(net):
    sp = desk_space()
    shallow = extract_subnet(net, uniform_arch(sp, 1, 4, 7))
    deep = extract_subnet(net, uniform_arch(sp, 2, 4, 7))
    # layer 0 of each unit shares the identical weights
    np.testing.assert_array_equal(shallow.layers[0]["dw_w"],
                                  deep.layers[0]["dw_w"])
    np.testing.assert_array_equal(shallow.layers[1]["expand_w"],
                                  deep.layers[2]["expand_w"])


def test_extracted_param_count(net):
    sub = extract_subnet(net, max_arch(desk_space()))
    assert sub.param_count() == net.param_count() - transform_param_count(
        desk_space()) * sum(len(u) for u in net.units)


def test_rejects_wrong_resolution(net):
    x = np.zeros((1, 3, 28, 28), dtype=np.float32)
    with pytest.raises(Exception):
        net.forward(max_arch(desk_space()), x)  # max arch wants 32


def test_rejects_invalid_arch_before_compute(net):
    bad = ArchConfig((5, 1, 1), max_arch(desk_space()).kernels,
                     max_arch(desk_space()).widths, 32)
    with pytest.raises(SpaceError):
        net.forward(bad, np.zeros((1, 3, 32, 32), dtype=np.float32))


# ---------------------------------------------------------------------------
# BN recalibration

def test_recalibrate_single_batch_equals_batch_stats(net):
    rng = np.random.default_rng(13)
    sub = extract_subnet(net, uniform_arch(desk_space(), 1, 2, 3, 24))
    x = rng.standard_normal((8, 3, 24, 24)).astype(np.float32)
    recalibrate_bn(sub, [x])
    _, cache = sub.forward(x, training=True, need_cache=True)
    stem_bn = cache["stem"]["bn"]
    np.testing.assert_allclose(sub.sh.stem_rm, stem_bn["batch_mean"], rtol=1e-4)
    np.testing.assert_allclose(sub.sh.stem_rv, stem_bn["batch_var"],
                               rtol=1e-3, atol=1e-6)


def test_recalibrate_idempotent(net):
    rng = np.random.default_rng(14)
    sub = extract_subnet(net, uniform_arch(desk_space(), 2, 3, 5, 28))
    batches = [rng.standard_normal((4, 3, 28, 28)).astype(np.float32)
               for _ in range(3)]
    recalibrate_bn(sub, batches)
    first = {k: v.copy() for k, v in sub.named_buffers().items()}
    recalibrate_bn(sub, batches)
    for k, v in sub.named_buffers().items():
        np.testing.assert_allclose(v, first[k], rtol=1e-5, atol=1e-7)


def test_recalibrate_empty_rejected(net):
    sub = extract_subnet(net, uniform_arch(desk_space(), 1, 2, 3))
    with pytest.raises(ValueError):
        recalibrate_bn(sub, [])


# ---------------------------------------------------------------------------
# checkpoints

def test_supernet_checkpoint_roundtrip(tmp_path, net):
    p = save_supernet(tmp_path / "net", net)
    loaded = load_supernet(p)
    for name, v in net.named_params().items():
        np.testing.assert_array_equal(loaded.named_params()[name], v)
    rng = np.random.default_rng(15)
    x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
    arch = max_arch(desk_space())
    np.testing.assert_array_equal(loaded.forward(arch, x), net.forward(arch, x))


def test_subnet_checkpoint_roundtrip_and_determinism(tmp_path, net):
    arch = uniform_arch(desk_space(), 2, 3, 5)
    sub = extract_subnet(net, arch)
    p1 = save_subnet(tmp_path / "sub1", sub)
    p2 = save_subnet(tmp_path / "sub2", extract_subnet(net, arch))
    assert (tmp_path / "sub1.bin").read_bytes() == (tmp_path / "sub2.bin").read_bytes()
    loaded = load_subnet(p1)
    assert loaded.arch == canonical_arch(desk_space(), arch)
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 3, arch.resolution, arch.resolution))
    x = x.astype(np.float32)
    np.testing.assert_array_equal(loaded.forward(x), sub.forward(x))


# ---------------------------------------------------------------------------
# full-network gradient through masking and kernel transforms

def test_supernet_backward_finite_differences():
    sp = ArchSpace(n_units=1, depth_choices=((1,),), width_ratio_choices=(2,),
                   kernel_choices=(3, 5), resolution_choices=(8,),
                   base_widths=(4,), stem_channels=2, n_classes=3)
    net = Supernet(sp, seed=17).cast(np.float64)
    # move activations away from relu6 kinks so the FD oracle is valid
    for name, p in net.named_params().items():
        if name.endswith("beta"):
            p[...] = 3.0
        elif name.endswith("gamma"):
            p[...] = 0.5
    rng = np.random.default_rng(18)
    arch = ArchConfig((1,), ((3,),), ((2,),), 8)  # exercises the transform
    x = rng.standard_normal((2, 3, 8, 8))
    g = rng.standard_normal((2, sp.n_classes))
    _, cache = net.forward(arch, x, training=True, need_cache=True)
    grads = net.backward(cache, g)
    assert any(".t3" in name for name in grads)  # transform grad present

    def loss():
        return float(np.sum(net.forward(arch, x, training=True) * g))

    params = net.named_params()
    for name in ("u0.l0.dw_w", "u0.l0.t3", "u0.l0.expand_w", "stem.w",
                 "head.fc_w", "u0.l0.expand_gamma"):
        arr, grad = params[name], grads[name]
        idxs = rng.choice(arr.size, size=min(10, arr.size), replace=False)
        for i in idxs:
            flat = arr.ravel()
            old = flat[i]
            eps = 1e-3
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            ana = grad.ravel()[i]
            rel = abs(num - ana) / max(1e-6, abs(num), abs(ana))
            assert rel < 1e-2, f"{name}[{i}]: {ana} vs {num}"

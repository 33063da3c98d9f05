"""The elastic weight store and its selection scheme.

One weight set holds every sub-network in the space.  Selecting a config
means: keep the first `depth` blocks of each unit, take the top slice of
expanded channels for each block's width ratio, and derive small kernels
from the stored max-size kernel through learned per-layer transform
matrices.  Masked forward, standalone extraction, and hand-written
backward all operate on the same dense block functions so the two forward
paths agree by construction.
"""

from __future__ import annotations

import copy

import numpy as np

from .ops import (
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    linear_backward,
    linear_forward,
    relu6_backward,
    relu6_forward,
)
from .space import (
    ArchConfig,
    ArchSpace,
    canonical_arch,
    max_arch,
    validate_arch,
)

BN_FIELDS = ("gamma", "beta", "rm", "rv")


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class ElasticMBConv:
    """Mobile inverted bottleneck with elastic kernel size and width.

    Stored weights cover the maximal choices; kernel transform matrices
    (one square matrix per step down the kernel chain, shared across
    channels, identity at init) derive the smaller kernels from center
    crops of the larger ones.
    """

    def __init__(self, c_in: int, c_out: int, stride: int,
                 kernel_choices: tuple[int, ...], max_width: int,
                 rng: np.random.Generator):
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.kernel_choices = tuple(sorted(kernel_choices))
        self.mid_max = c_in * max_width
        self.residual = stride == 1 and c_in == c_out
        k_max = self.kernel_choices[-1]

        self.expand_w = _he(rng, (self.mid_max, c_in, 1, 1), c_in)
        self.dw_w = _he(rng, (self.mid_max, 1, k_max, k_max), k_max * k_max)
        self.project_w = _he(rng, (c_out, self.mid_max, 1, 1), self.mid_max)
        for prefix in ("expand", "dw", "project"):
            c = c_out if prefix == "project" else self.mid_max
            setattr(self, f"{prefix}_gamma", np.ones(c, dtype=np.float32))
            setattr(self, f"{prefix}_beta", np.zeros(c, dtype=np.float32))
            setattr(self, f"{prefix}_rm", np.zeros(c, dtype=np.float32))
            setattr(self, f"{prefix}_rv", np.ones(c, dtype=np.float32))
        # transforms[k] maps the flattened center crop of the next-larger
        # kernel to the effective k x k kernel
        self.transforms = {k: np.eye(k * k, dtype=np.float32)
                           for k in self.kernel_choices[:-1]}


def _center_crop(w: np.ndarray, k: int) -> np.ndarray:
    big = w.shape[-1]
    off = (big - k) // 2
    return w[..., off:off + k, off:off + k]


def effective_kernel(layer: ElasticMBConv, k: int,
                     with_cache: bool = False):
    """Depthwise kernel at size k: raw weights for k_max, otherwise the
    chain crop -> (flat @ transform) applied per step down the choice list."""
    if k not in layer.kernel_choices:
        raise ShapeError(f"kernel {k} not in choices {layer.kernel_choices}")
    chain = sorted(layer.kernel_choices, reverse=True)
    cur = layer.dw_w  # (mid_max, 1, k_max, k_max)
    steps = []
    for i in range(chain.index(k)):
        k_next = chain[i + 1]
        flat = _center_crop(cur, k_next).reshape(layer.mid_max, k_next * k_next)
        cur = (flat @ layer.transforms[k_next]).reshape(
            layer.mid_max, 1, k_next, k_next)
        steps.append((k_next, flat))
    if with_cache:
        return cur, steps
    return cur


def effective_kernel_backward(layer: ElasticMBConv, steps, g_eff):
    """Backward through the transform chain.  g_eff is the gradient on the
    effective kernel (full mid_max rows); returns (g_dw, {k: g_transform})."""
    g_transforms = {}
    g = g_eff
    for k_next, flat in reversed(steps):
        g_flat = g.reshape(layer.mid_max, k_next * k_next)
        g_transforms[k_next] = flat.T @ g_flat
        g_crop = (g_flat @ layer.transforms[k_next].T).reshape(
            layer.mid_max, 1, k_next, k_next)
        # find the size this crop came from: next step up the chain
        chain = sorted(layer.kernel_choices)
        k_prev = chain[chain.index(k_next) + 1]
        g_big = np.zeros((layer.mid_max, 1, k_prev, k_prev), dtype=g.dtype)
        off = (k_prev - k_next) // 2
        g_big[..., off:off + k_next, off:off + k_next] = g_crop
        g = g_big
    return g, g_transforms


def channel_importance(layer: ElasticMBConv) -> np.ndarray:
    """L1 norm of the projection weights over each expanded input channel;
    larger means the channel contributes more to the block output."""
    return np.abs(layer.project_w[:, :, 0, 0]).sum(axis=0)


def sort_channels(layer: ElasticMBConv) -> np.ndarray:
    """Reorder expanded channels by descending importance (stable, ties by
    lower original index), permuting all adjacent weights jointly so the
    full-width function is unchanged.  Returns the permutation applied."""
    imp = channel_importance(layer)
    perm = np.argsort(-imp, kind="stable")
    layer.expand_w = np.ascontiguousarray(layer.expand_w[perm])
    layer.dw_w = np.ascontiguousarray(layer.dw_w[perm])
    layer.project_w = np.ascontiguousarray(layer.project_w[:, perm])
    for prefix in ("expand", "dw"):
        for f in BN_FIELDS:
            name = f"{prefix}_{f}"
            setattr(layer, name, np.ascontiguousarray(getattr(layer, name)[perm]))
    return perm


# ---------------------------------------------------------------------------
# dense block functions, shared by masked forward and extracted subnets

def _bn_params(src, prefix: str, width: int | None = None) -> dict:
    out = {}
    for f in BN_FIELDS:
        v = src[f"{prefix}_{f}"] if isinstance(src, dict) else getattr(src, f"{prefix}_{f}")
        out[f"{prefix}_{f}"] = v if width is None else v[:width]
    return out


def _mbconv_forward(p: dict, x: np.ndarray, training: bool):
    """expand 1x1 -> BN -> relu6 -> depthwise kxk -> BN -> relu6 ->
    project 1x1 -> BN (+ identity skip).  p holds dense weights.
    Returns (y, cache, stats) where stats maps bn prefix -> (rm, rv)."""
    stats = {}
    h0 = conv2d_forward(x, p["expand_w"])
    b1, c1, stats["expand"] = batchnorm_forward(
        h0, p["expand_gamma"], p["expand_beta"], p["expand_rm"], p["expand_rv"],
        training)
    a1 = relu6_forward(b1)
    mid = p["dw_w"].shape[0]
    h1 = conv2d_forward(a1, p["dw_w"], groups=mid, stride=p["stride"])
    b2, c2, stats["dw"] = batchnorm_forward(
        h1, p["dw_gamma"], p["dw_beta"], p["dw_rm"], p["dw_rv"], training)
    a2 = relu6_forward(b2)
    h2 = conv2d_forward(a2, p["project_w"])
    b3, c3, stats["project"] = batchnorm_forward(
        h2, p["project_gamma"], p["project_beta"], p["project_rm"],
        p["project_rv"], training)
    y = b3 + x if p["residual"] else b3
    cache = {"x": x, "h0": h0, "bn1": c1, "b1": b1, "a1": a1,
             "h1": h1, "bn2": c2, "b2": b2, "a2": a2, "bn3": c3}
    return y, cache, stats


def _mbconv_backward(p: dict, cache: dict, gy: np.ndarray):
    """Gradients for all dense params of the block plus the block input."""
    g = {}
    gb3, g["project_gamma"], g["project_beta"] = batchnorm_backward(cache["bn3"], gy)
    ga2, g["project_w"] = conv2d_backward(cache["a2"], p["project_w"], gb3)
    gb2 = relu6_backward(cache["b2"], ga2)
    gh1, g["dw_gamma"], g["dw_beta"] = batchnorm_backward(cache["bn2"], gb2)
    mid = p["dw_w"].shape[0]
    ga1, g["dw_w"] = conv2d_backward(cache["a1"], p["dw_w"], gh1,
                                     groups=mid, stride=p["stride"])
    gb1 = relu6_backward(cache["b1"], ga1)
    gh0, g["expand_gamma"], g["expand_beta"] = batchnorm_backward(cache["bn1"], gb1)
    gx, g["expand_w"] = conv2d_backward(cache["x"], p["expand_w"], gh0)
    if p["residual"]:
        gx = gx + gy
    return gx, g


class _StemHead:
    """Shared stem/head parameter container for supernet and subnets."""

    def __init__(self, stem_channels: int, last_width: int, n_classes: int,
                 rng: np.random.Generator):
        self.stem_w = _he(rng, (stem_channels, 3, 3, 3), 27)
        self.stem_gamma = np.ones(stem_channels, dtype=np.float32)
        self.stem_beta = np.zeros(stem_channels, dtype=np.float32)
        self.stem_rm = np.zeros(stem_channels, dtype=np.float32)
        self.stem_rv = np.ones(stem_channels, dtype=np.float32)
        head_c = 4 * last_width
        self.head_w = _he(rng, (head_c, last_width, 1, 1), last_width)
        self.head_gamma = np.ones(head_c, dtype=np.float32)
        self.head_beta = np.zeros(head_c, dtype=np.float32)
        self.head_rm = np.zeros(head_c, dtype=np.float32)
        self.head_rv = np.ones(head_c, dtype=np.float32)
        self.fc_w = _he(rng, (n_classes, head_c), head_c)
        self.fc_b = np.zeros(n_classes, dtype=np.float32)


def _stem_forward(sh, x, training):
    h = conv2d_forward(x, sh.stem_w, stride=2)
    b, c, stats = batchnorm_forward(h, sh.stem_gamma, sh.stem_beta,
                                    sh.stem_rm, sh.stem_rv, training)
    return relu6_forward(b), {"x": x, "bn": c, "b": b}, stats


def _head_forward(sh, x, training):
    h = conv2d_forward(x, sh.head_w)
    b, c, stats = batchnorm_forward(h, sh.head_gamma, sh.head_beta,
                                    sh.head_rm, sh.head_rv, training)
    a = relu6_forward(b)
    pooled = global_avg_pool_forward(a)
    logits = linear_forward(pooled, sh.fc_w, sh.fc_b)
    cache = {"x": x, "bn": c, "b": b, "a": a, "pooled": pooled}
    return logits, cache, stats


class Supernet:
    """Full elastic weight store: stem + units of ElasticMBConv + head.

    The first block of every unit has stride 2; the rest have stride 1 and
    identity skips.  Any valid ArchConfig selects a well-formed sub-network.
    """

    def __init__(self, space: ArchSpace, seed: int = 0):
        self.space = space
        self.seed_lineage = [int(seed)]
        rng = np.random.default_rng(seed)
        self.sh = _StemHead(space.stem_channels, space.base_widths[-1],
                            space.n_classes, rng)
        self.units: list[list[ElasticMBConv]] = []
        c_prev = space.stem_channels
        for u in range(space.n_units):
            c_out = space.base_widths[u]
            unit = []
            for l in range(space.max_depth(u)):
                stride = 2 if l == 0 else 1
                c_in = c_prev if l == 0 else c_out
                unit.append(ElasticMBConv(c_in, c_out, stride,
                                          space.kernel_choices,
                                          space.max_width, rng))
            self.units.append(unit)
            c_prev = c_out

    # -- parameter plumbing -------------------------------------------------

    def named_params(self) -> dict[str, np.ndarray]:
        out = {"stem.w": self.sh.stem_w,
               "stem.gamma": self.sh.stem_gamma, "stem.beta": self.sh.stem_beta}
        for u, unit in enumerate(self.units):
            for l, layer in enumerate(unit):
                pre = f"u{u}.l{l}."
                out[pre + "expand_w"] = layer.expand_w
                out[pre + "dw_w"] = layer.dw_w
                out[pre + "project_w"] = layer.project_w
                for prefix in ("expand", "dw", "project"):
                    out[pre + f"{prefix}_gamma"] = getattr(layer, f"{prefix}_gamma")
                    out[pre + f"{prefix}_beta"] = getattr(layer, f"{prefix}_beta")
                for k, t in layer.transforms.items():
                    out[pre + f"t{k}"] = t
        out["head.w"] = self.sh.head_w
        out["head.gamma"] = self.sh.head_gamma
        out["head.beta"] = self.sh.head_beta
        out["head.fc_w"] = self.sh.fc_w
        out["head.fc_b"] = self.sh.fc_b
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {"stem.rm": self.sh.stem_rm, "stem.rv": self.sh.stem_rv,
               "head.rm": self.sh.head_rm, "head.rv": self.sh.head_rv}
        for u, unit in enumerate(self.units):
            for l, layer in enumerate(unit):
                for prefix in ("expand", "dw", "project"):
                    out[f"u{u}.l{l}.{prefix}_rm"] = getattr(layer, f"{prefix}_rm")
                    out[f"u{u}.l{l}.{prefix}_rv"] = getattr(layer, f"{prefix}_rv")
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        tensors = {**self.named_params(), **self.named_buffers()}
        if name not in tensors:
            raise KeyError(name)
        tensors[name][...] = value

    def no_decay_names(self) -> frozenset[str]:
        """BN affine params, biases and transform matrices skip weight decay."""
        names = set()
        for n in self.named_params():
            leaf = n.rsplit(".", 1)[-1]
            if (leaf.endswith("gamma") or leaf.endswith("beta")
                    or leaf == "fc_b" or leaf.startswith("t")):
                names.add(n)
        return frozenset(names)

    def param_count(self) -> int:
        return sum(v.size for v in self.named_params().values())

    def max_arch(self) -> ArchConfig:
        return max_arch(self.space)

    def clone(self) -> "Supernet":
        return copy.deepcopy(self)

    def state_snapshot(self) -> dict[str, np.ndarray]:
        t = {**self.named_params(), **self.named_buffers()}
        return {k: v.copy() for k, v in t.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        tensors = {**self.named_params(), **self.named_buffers()}
        for k, v in snap.items():
            tensors[k][...] = v

    def cast(self, dtype) -> "Supernet":
        """Deep copy with every tensor cast (float64 for gradient checks)."""
        net = self.clone()
        for obj in [net.sh] + [layer for unit in net.units for layer in unit]:
            for attr, val in vars(obj).items():
                if isinstance(val, np.ndarray):
                    setattr(obj, attr, val.astype(dtype))
                elif isinstance(val, dict):
                    setattr(obj, attr, {k: m.astype(dtype) for k, m in val.items()})
        return net

    # -- selection scheme ---------------------------------------------------

    def _layer_dense_params(self, u: int, l: int, k: int, w: int,
                            with_cache: bool):
        layer = self.units[u][l]
        mid = layer.c_in * w
        eff, eff_cache = effective_kernel(layer, k, with_cache=True)
        p = {"expand_w": layer.expand_w[:mid],
             "dw_w": eff[:mid],
             "project_w": layer.project_w[:, :mid],
             "stride": layer.stride, "residual": layer.residual,
             **_bn_params(layer, "expand", mid),
             **_bn_params(layer, "dw", mid),
             **_bn_params(layer, "project")}
        meta = {"u": u, "l": l, "mid": mid, "k": k,
                "eff_cache": eff_cache if with_cache else None}
        return p, meta

    def forward(self, arch: ArchConfig, x: np.ndarray, training: bool = False,
                need_cache: bool = False):
        """Masked forward: runs the sub-network selected by `arch`.

        The batch must already be resized to arch.resolution.  In training
        mode, batch statistics are used for normalization and the running
        stats of the active slices are updated in place.
        """
        arch = canonical_arch(self.space, arch)
        if x.shape[2] != arch.resolution or x.shape[3] != arch.resolution:
            raise ShapeError(f"batch is {x.shape[2]}x{x.shape[3]}, "
                             f"arch wants {arch.resolution}")
        h, stem_cache, stem_stats = _stem_forward(self.sh, x, training)
        if training:
            self.sh.stem_rm, self.sh.stem_rv = stem_stats
        blocks = []
        for u in range(self.space.n_units):
            for l in range(arch.depths[u]):
                p, meta = self._layer_dense_params(
                    u, l, arch.kernels[u][l], arch.widths[u][l], need_cache)
                h, cache, stats = _mbconv_forward(p, h, training)
                if training:
                    self._write_stats(u, l, meta["mid"], stats)
                blocks.append((p, meta, cache if need_cache else None))
        logits, head_cache, head_stats = _head_forward(self.sh, h, training)
        if training:
            self.sh.head_rm, self.sh.head_rv = head_stats
        if not need_cache:
            return logits
        return logits, {"arch": arch, "stem": stem_cache, "blocks": blocks,
                        "head": head_cache}

    def _write_stats(self, u, l, mid, stats):
        layer = self.units[u][l]
        for prefix, (rm, rv) in stats.items():
            width = None if prefix == "project" else mid
            if width is None:
                setattr(layer, f"{prefix}_rm", rm.astype(np.float32, copy=False))
                setattr(layer, f"{prefix}_rv", rv.astype(np.float32, copy=False))
            else:
                getattr(layer, f"{prefix}_rm")[:width] = rm
                getattr(layer, f"{prefix}_rv")[:width] = rv

    def backward(self, cache: dict, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for every parameter touched by the cached forward,
        full storage shapes (zeros outside the active slices)."""
        grads: dict[str, np.ndarray] = {}
        sh = self.sh
        hc = cache["head"]
        gpooled, grads["head.fc_w"], grads["head.fc_b"] = linear_backward(
            hc["pooled"], sh.fc_w, grad_logits)
        ga = global_avg_pool_backward(hc["a"].shape, gpooled)
        gb = relu6_backward(hc["b"], ga)
        gh, grads["head.gamma"], grads["head.beta"] = batchnorm_backward(hc["bn"], gb)
        g, grads["head.w"] = conv2d_backward(hc["x"], sh.head_w, gh)
        # blocks, reverse order
        for p, meta, bcache in reversed(cache["blocks"]):
            g, dense = _mbconv_backward(p, bcache, g)
            u, l, mid = meta["u"], meta["l"], meta["mid"]
            layer = self.units[u][l]
            pre = f"u{u}.l{l}."
            gexp = np.zeros_like(layer.expand_w)
            gexp[:mid] = dense["expand_w"]
            grads[pre + "expand_w"] = gexp
            gproj = np.zeros_like(layer.project_w)
            gproj[:, :mid] = dense["project_w"]
            grads[pre + "project_w"] = gproj
            g_eff_full = np.zeros((layer.mid_max, 1, meta["k"], meta["k"]),
                                  dtype=dense["dw_w"].dtype)
            g_eff_full[:mid] = dense["dw_w"]
            gdw, gts = effective_kernel_backward(layer, meta["eff_cache"], g_eff_full)
            grads[pre + "dw_w"] = gdw
            for k, gt in gts.items():
                grads[pre + f"t{k}"] = gt
            for prefix in ("expand", "dw", "project"):
                width = layer.c_out if prefix == "project" else layer.mid_max
                for f, key in (("gamma", f"{prefix}_gamma"), ("beta", f"{prefix}_beta")):
                    full = np.zeros(width, dtype=dense[key].dtype)
                    full[:dense[key].shape[0]] = dense[key]
                    grads[pre + key] = full
        # stem
        sc = cache["stem"]
        gb = relu6_backward(sc["b"], g)
        gh, grads["stem.gamma"], grads["stem.beta"] = batchnorm_backward(sc["bn"], gb)
        _, grads["stem.w"] = conv2d_backward(sc["x"], sh.stem_w, gh, stride=2)
        return grads


# ---------------------------------------------------------------------------
# standalone extraction

class SubNet:
    """Dense standalone network materialized from a supernet for one config.

    Holds no aliasing into the supernet; forward/backward reuse the same
    block functions, so it matches the masked forward of its parent."""

    def __init__(self, space: ArchSpace, arch: ArchConfig, sh: _StemHead,
                 layers: list[dict]):
        self.space = space
        self.arch = arch
        self.sh = sh
        self.layers = layers  # dense param dicts, in execution order

    @property
    def resolution(self) -> int:
        return self.arch.resolution

    def named_params(self) -> dict[str, np.ndarray]:
        out = {"stem.w": self.sh.stem_w,
               "stem.gamma": self.sh.stem_gamma, "stem.beta": self.sh.stem_beta}
        for i, p in enumerate(self.layers):
            for key in ("expand_w", "dw_w", "project_w",
                        "expand_gamma", "expand_beta", "dw_gamma", "dw_beta",
                        "project_gamma", "project_beta"):
                out[f"b{i}.{key}"] = p[key]
        out["head.w"] = self.sh.head_w
        out["head.gamma"] = self.sh.head_gamma
        out["head.beta"] = self.sh.head_beta
        out["head.fc_w"] = self.sh.fc_w
        out["head.fc_b"] = self.sh.fc_b
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {"stem.rm": self.sh.stem_rm, "stem.rv": self.sh.stem_rv,
               "head.rm": self.sh.head_rm, "head.rv": self.sh.head_rv}
        for i, p in enumerate(self.layers):
            for prefix in ("expand", "dw", "project"):
                out[f"b{i}.{prefix}_rm"] = p[f"{prefix}_rm"]
                out[f"b{i}.{prefix}_rv"] = p[f"{prefix}_rv"]
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        tensors = {**self.named_params(), **self.named_buffers()}
        tensors[name][...] = value

    def no_decay_names(self) -> frozenset[str]:
        names = set()
        for n in self.named_params():
            leaf = n.rsplit(".", 1)[-1]
            if leaf.endswith("gamma") or leaf.endswith("beta") or leaf == "fc_b":
                names.add(n)
        return frozenset(names)

    def param_count(self) -> int:
        return sum(v.size for v in self.named_params().values())

    def forward(self, x: np.ndarray, training: bool = False,
                need_cache: bool = False):
        if x.shape[2] != self.resolution or x.shape[3] != self.resolution:
            raise ShapeError(f"batch is {x.shape[2]}x{x.shape[3]}, "
                             f"subnet wants {self.resolution}")
        h, stem_cache, stem_stats = _stem_forward(self.sh, x, training)
        if training:
            self.sh.stem_rm, self.sh.stem_rv = stem_stats
        blocks = []
        for p in self.layers:
            h, cache, stats = _mbconv_forward(p, h, training)
            if training:
                for prefix, (rm, rv) in stats.items():
                    p[f"{prefix}_rm"] = rm.astype(p[f"{prefix}_rm"].dtype, copy=False)
                    p[f"{prefix}_rv"] = rv.astype(p[f"{prefix}_rv"].dtype, copy=False)
            blocks.append((p, cache if need_cache else None))
        logits, head_cache, head_stats = _head_forward(self.sh, h, training)
        if training:
            self.sh.head_rm, self.sh.head_rv = head_stats
        if not need_cache:
            return logits
        return logits, {"stem": stem_cache, "blocks": blocks, "head": head_cache}

    def backward(self, cache: dict, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        hc = cache["head"]
        gpooled, grads["head.fc_w"], grads["head.fc_b"] = linear_backward(
            hc["pooled"], self.sh.fc_w, grad_logits)
        ga = global_avg_pool_backward(hc["a"].shape, gpooled)
        gb = relu6_backward(hc["b"], ga)
        gh, grads["head.gamma"], grads["head.beta"] = batchnorm_backward(hc["bn"], gb)
        g, grads["head.w"] = conv2d_backward(hc["x"], self.sh.head_w, gh)
        for i in reversed(range(len(self.layers))):
            p, bcache = cache["blocks"][i]
            g, dense = _mbconv_backward(p, bcache, g)
            for key, val in dense.items():
                grads[f"b{i}.{key}"] = val
        sc = cache["stem"]
        gb = relu6_backward(sc["b"], g)
        gh, grads["stem.gamma"], grads["stem.beta"] = batchnorm_backward(sc["bn"], gb)
        _, grads["stem.w"] = conv2d_backward(sc["x"], self.sh.stem_w, gh, stride=2)
        return grads


def extract_subnet(net: Supernet, arch: ArchConfig) -> SubNet:
    """Materialize a standalone dense network: effective kernels evaluated,
    channel slices copied, inactive layers dropped.  Deterministic."""
    arch = canonical_arch(net.space, arch)
    validate_arch(net.space, arch)
    sh = copy.deepcopy(net.sh)
    layers = []
    for u in range(net.space.n_units):
        for l in range(arch.depths[u]):
            layer = net.units[u][l]
            k, w = arch.kernels[u][l], arch.widths[u][l]
            mid = layer.c_in * w
            eff = effective_kernel(layer, k)
            p = {"expand_w": layer.expand_w[:mid].copy(),
                 "dw_w": eff[:mid].copy(),
                 "project_w": layer.project_w[:, :mid].copy(),
                 "stride": layer.stride, "residual": layer.residual,
                 **{k2: v.copy() for k2, v in _bn_params(layer, "expand", mid).items()},
                 **{k2: v.copy() for k2, v in _bn_params(layer, "dw", mid).items()},
                 **{k2: v.copy() for k2, v in _bn_params(layer, "project").items()}}
            layers.append(p)
    return SubNet(net.space, arch, sh, layers)


def recalibrate_bn(subnet: SubNet, calibration_batches: list[np.ndarray]) -> SubNet:
    """Recompute every BN running mean/var as the aggregate statistics of
    the calibration data (weights untouched, in place).  Idempotent for a
    fixed calibration set."""
    if not calibration_batches:
        raise ValueError("recalibrate_bn needs at least one calibration batch")
    sums: dict[str, np.ndarray] = {}
    sqs: dict[str, np.ndarray] = {}
    counts: dict[str, float] = {}

    def accumulate(key, bn_cache):
        m = bn_cache["m"]
        mean, var = bn_cache["batch_mean"], bn_cache["batch_var"]
        sums[key] = sums.get(key, 0.0) + m * mean
        sqs[key] = sqs.get(key, 0.0) + m * (var + mean * mean)
        counts[key] = counts.get(key, 0.0) + m

    for xb in calibration_batches:
        _, cache = subnet.forward(xb, training=True, need_cache=True)
        accumulate("stem", cache["stem"]["bn"])
        for i, (_, bcache) in enumerate(cache["blocks"]):
            accumulate(f"b{i}.expand", bcache["bn1"])
            accumulate(f"b{i}.dw", bcache["bn2"])
            accumulate(f"b{i}.project", bcache["bn3"])
        accumulate("head", cache["head"]["bn"])

    def finalize(key):
        mean = sums[key] / counts[key]
        var = sqs[key] / counts[key] - mean * mean
        return (mean.astype(np.float32), np.maximum(var, 0.0).astype(np.float32))

    subnet.sh.stem_rm, subnet.sh.stem_rv = finalize("stem")
    subnet.sh.head_rm, subnet.sh.head_rv = finalize("head")
    for i, p in enumerate(subnet.layers):
        for prefix in ("expand", "dw", "project"):
            rm, rv = finalize(f"b{i}.{prefix}")
            p[f"{prefix}_rm"], p[f"{prefix}_rv"] = rm, rv
    return subnet

"""Cheap surrogates for measurement during search: an accuracy-predictor
MLP trained on sampled (architecture, accuracy) pairs, and an additive
latency lookup table keyed by layer signature.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset
from .ops import (
    OptimizerState,
    cosine_lr,
    linear_backward,
    linear_forward,
    sgd_step,
)
from .space import ArchConfig, ArchSpace, validate_arch
from .supernet import Supernet
from .training import evaluate


# ---------------------------------------------------------------------------
# architecture encoding

def encoding_length(space: ArchSpace) -> int:
    slots = sum(space.max_depth(u) for u in range(space.n_units))
    per_slot = len(space.kernel_choices) + len(space.width_ratio_choices)
    return slots * per_slot + len(space.resolution_choices)


def encode_arch(arch: ArchConfig, space: ArchSpace) -> np.ndarray:
    """Flat float vector: per layer slot a one-hot of kernel choice
    concatenated with a one-hot of width choice; skipped slots stay all
    zero; a one-hot of the resolution choice is appended."""
    validate_arch(space, arch)
    nk, nw = len(space.kernel_choices), len(space.width_ratio_choices)
    vec = np.zeros(encoding_length(space), dtype=np.float32)
    pos = 0
    for u in range(space.n_units):
        for l in range(space.max_depth(u)):
            if l < arch.depths[u]:
                vec[pos + space.kernel_choices.index(arch.kernels[u][l])] = 1.0
                vec[pos + nk + space.width_ratio_choices.index(arch.widths[u][l])] = 1.0
            pos += nk + nw
    vec[pos + space.resolution_choices.index(arch.resolution)] = 1.0
    return vec


# ---------------------------------------------------------------------------
# accuracy predictor

HIDDEN = 400
PRED_EPOCHS = 500
PRED_LR = 0.01
PRED_BATCH = 256


@dataclass
class AccPredictor:
    """Three 400-unit fully connected relu layers plus a scalar linear
    output, clamped to [0,1] at inference.  Accuracy unit is fraction."""

    space: ArchSpace
    weights: list[np.ndarray]  # w1,b1,w2,b2,w3,b3,w4,b4
    holdout_rmse: float = float("nan")

    def predict_encoded(self, enc: np.ndarray) -> np.ndarray:
        h = enc.astype(np.float32)
        if h.ndim == 1:
            h = h[None]
        for i in range(0, 6, 2):
            h = np.maximum(linear_forward(h, self.weights[i], self.weights[i + 1]), 0.0)
        out = linear_forward(h, self.weights[6], self.weights[7])[:, 0]
        return np.clip(out, 0.0, 1.0)

    def __call__(self, arch: ArchConfig) -> float:
        return predict_accuracy(self, arch)


def predict_accuracy(pred: AccPredictor, arch: ArchConfig) -> float:
    return float(pred.predict_encoded(encode_arch(arch, pred.space))[0])


def _mlp_init(n_in: int, rng: np.random.Generator) -> list[np.ndarray]:
    dims = [n_in, HIDDEN, HIDDEN, HIDDEN, 1]
    weights = []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append((rng.standard_normal((b, a)) *
                        np.sqrt(2.0 / a)).astype(np.float32))
        weights.append(np.zeros(b, dtype=np.float32))
    # zero output layer: predictions start at 0 and the head fits a linear
    # regression on the random hidden features before the trunk moves
    weights[6][...] = 0.0
    return weights


def train_acc_predictor(pairs, space: ArchSpace, seed: int = 0,
                        epochs: int = PRED_EPOCHS, lr: float = PRED_LR,
                        batch_size: int = PRED_BATCH,
                        holdout_frac: float = 0.1,
                        warn=print) -> tuple[AccPredictor, float]:
    """Fit the MLP by SGD on squared error over a 90/10 split.

    `pairs` is a sequence of (encoding, accuracy) with accuracy in [0,1].
    Returns (predictor, holdout RMSE in accuracy points, i.e. percent)."""
    if len(pairs) < 100:
        raise ValueError(f"need at least 100 pairs, got {len(pairs)}")
    x = np.stack([np.asarray(e, dtype=np.float32) for e, _ in pairs])
    y = np.array([a for _, a in pairs], dtype=np.float32)
    if np.ptp(y) == 0.0:
        warn("warning: all pair accuracies identical; predictor will be constant")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_hold = max(1, int(round(holdout_frac * len(y))))
    hold, train = order[:n_hold], order[n_hold:]
    xt, yt = x[train], y[train]
    # fit in standardized target space so gradients are O(1); the affine
    # de-standardization is folded into the linear head afterwards
    y_mean = float(yt.mean())
    y_std = float(yt.std())
    if y_std < 1e-8:
        y_std = 1.0
    yt = (yt - y_mean) / y_std
    weights = _mlp_init(x.shape[1], rng)
    names = [f"p{i}" for i in range(len(weights))]
    params = dict(zip(names, weights))
    opt = OptimizerState(momentum=0.9, weight_decay=0.0, base_lr=lr,
                         no_decay=frozenset(names))
    steps_per_epoch = max(1, math.ceil(len(yt) / batch_size))
    total = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(len(yt))
        for s in range(steps_per_epoch):
            idx = perm[s * batch_size:(s + 1) * batch_size]
            xb, yb = xt[idx], yt[idx]
            acts = [xb]
            h = xb
            for i in range(0, 6, 2):
                h = np.maximum(linear_forward(h, params[names[i]],
                                              params[names[i + 1]]), 0.0)
                acts.append(h)
            out = linear_forward(h, params[names[6]], params[names[7]])[:, 0]
            diff = out - yb
            g = (2.0 / len(yb)) * diff[:, None]
            grads = {}
            gh, grads[names[6]], grads[names[7]] = linear_backward(
                acts[3], params[names[6]], g.astype(np.float32))
            for i in (4, 2, 0):
                gh = gh * (acts[i // 2 + 1] > 0)
                gh, grads[names[i]], grads[names[i + 1]] = linear_backward(
                    acts[i // 2], params[names[i]], gh)
            sgd_step(params, grads, opt, cosine_lr(step, total, lr))
            step += 1
    params[names[6]] *= y_std
    params[names[7]] *= y_std
    params[names[7]] += y_mean
    pred = AccPredictor(space, [params[n] for n in names])
    pred_hold = pred.predict_encoded(x[hold])
    rmse = float(np.sqrt(np.mean((pred_hold - y[hold]) ** 2))) * 100.0
    pred.holdout_rmse = rmse
    return pred, rmse


def save_predictor(path, pred: AccPredictor) -> None:
    tensors = {f"p{i}": w for i, w in enumerate(pred.weights)}
    meta = {"space": pred.space.to_dict(), "holdout_rmse": pred.holdout_rmse}
    ckpt.save_checkpoint(path, "predictor", tensors, meta)


def load_predictor(path) -> AccPredictor:
    kind, tensors, meta = ckpt.load_checkpoint(path)
    if kind != "predictor":
        raise ckpt.CheckpointError(f"expected a predictor checkpoint, got {kind!r}")
    weights = [tensors[f"p{i}"] for i in range(len(tensors))]
    weights = [w if w.ndim == 2 else w.ravel() for w in weights]
    return AccPredictor(ArchSpace.from_dict(meta["space"]), weights,
                        float(meta["holdout_rmse"]))


# ---------------------------------------------------------------------------
# pair collection

def collect_pairs(net: Supernet, space: ArchSpace, n_samples: int,
                  val_subset: Dataset, calibration: Dataset,
                  rng: np.random.Generator, progress=None):
    """Sample uniform configs, recalibrate BN, measure top-1 on the
    validation subset.  Returns a list of (arch, encoding, accuracy)."""
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    if val_subset.split == "test" or calibration.split == "test":
        raise ValueError("pair collection must not touch the test split")
    from .space import random_arch
    out = []
    for i in range(n_samples):
        arch = random_arch(space, rng)
        acc = evaluate(net, val_subset, arch=arch, calibration=calibration)
        out.append((arch, encode_arch(arch, space), acc))
        if progress is not None:
            progress(i, n_samples)
    return out


def save_pairs_csv(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        n_enc = len(records[0][1])
        writer.writerow([f"enc_{i}" for i in range(n_enc)] + ["accuracy"])
        for _, enc, acc in records:
            writer.writerow([f"{v:.0f}" for v in enc] + [f"{acc:.6f}"])


def load_pairs_csv(path) -> list[tuple[np.ndarray, float]]:
    with Path(path).open() as f:
        reader = csv.reader(f)
        header = next(reader)
        n_enc = len(header) - 1
        pairs = []
        for row in reader:
            enc = np.array([float(v) for v in row[:n_enc]], dtype=np.float32)
            pairs.append((enc, float(row[n_enc])))
    return pairs


# ---------------------------------------------------------------------------
# latency lookup table

TABLE_VERSION = 1


class MissingSignatureError(KeyError):
    pass


@dataclass
class LatencyTable:
    """Additive latency model: one entry per reachable layer signature
    (unit, layer, kernel, width, resolution) plus stem/head per resolution."""

    entries: dict[tuple, float]
    version: int = TABLE_VERSION

    def __call__(self, arch: ArchConfig) -> float:
        return predict_latency(self, arch)


def required_signatures(space: ArchSpace) -> list[tuple]:
    sigs = []
    for r in space.resolution_choices:
        sigs.append(("stem", -1, -1, -1, r))
        sigs.append(("head", -1, -1, -1, r))
        for u in range(space.n_units):
            for l in range(space.max_depth(u)):
                for k in space.kernel_choices:
                    for w in space.width_ratio_choices:
                        sigs.append((u, l, k, w, r))
    return sigs


def predict_latency(table: LatencyTable, arch: ArchConfig) -> float:
    """Sum of table entries for stem + every active layer + head at the
    config's resolution."""
    r = arch.resolution
    total = 0.0
    for sig in [("stem", -1, -1, -1, r)] + [
            (u, l, arch.kernels[u][l], arch.widths[u][l], r)
            for u in range(len(arch.depths)) for l in range(arch.depths[u])
    ] + [("head", -1, -1, -1, r)]:
        if sig not in table.entries:
            raise MissingSignatureError(f"latency table has no entry for {sig}")
        total += table.entries[sig]
    return total


# -- MAC arithmetic ---------------------------------------------------------

def _conv_out(h: int) -> int:
    # stride-2 same-padded conv: output = ceil(h / 2), any odd kernel
    return (h - 1) // 2 + 1


def _unit_input_spatial(space: ArchSpace, unit: int, r: int) -> int:
    h = _conv_out(r)  # stem is stride 2
    for _ in range(unit):
        h = _conv_out(h)
    return h


def stem_macs(space: ArchSpace, r: int) -> int:
    h = _conv_out(r)
    return space.stem_channels * 3 * 9 * h * h


def head_macs(space: ArchSpace, r: int) -> int:
    h = _unit_input_spatial(space, space.n_units, r)
    c_last = space.base_widths[-1]
    head_c = 4 * c_last
    return head_c * c_last * h * h + head_c * space.n_classes


def layer_macs(space: ArchSpace, unit: int, layer: int, k: int, w: int,
               r: int) -> int:
    """Multiplies in one MBConv block: expand 1x1 at the input spatial size,
    depthwise kxk and project 1x1 at the output spatial size."""
    h_in = _unit_input_spatial(space, unit, r)
    c_in = space.stem_channels if unit == 0 else space.base_widths[unit - 1]
    if layer > 0:
        c_in = space.base_widths[unit]
        h_in = _conv_out(h_in)
    c_out = space.base_widths[unit]
    h_out = _conv_out(h_in) if layer == 0 else h_in
    mid = c_in * w
    return (mid * c_in * h_in * h_in
            + mid * k * k * h_out * h_out
            + c_out * mid * h_out * h_out)


def arch_macs(space: ArchSpace, arch: ArchConfig) -> int:
    total = stem_macs(space, arch.resolution) + head_macs(space, arch.resolution)
    for u in range(space.n_units):
        for l in range(arch.depths[u]):
            total += layer_macs(space, u, l, arch.kernels[u][l],
                                arch.widths[u][l], arch.resolution)
    return total


def synth_latency_table(space: ArchSpace, alpha: float = 1e-6,
                        beta: float = 0.01) -> LatencyTable:
    """MAC-linear cost model: latency = alpha * MACs + beta per entry."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    entries = {}
    for sig in required_signatures(space):
        u, l, k, w, r = sig
        if u == "stem":
            macs = stem_macs(space, r)
        elif u == "head":
            macs = head_macs(space, r)
        else:
            macs = layer_macs(space, u, l, k, w, r)
        entries[sig] = alpha * macs + beta
    return LatencyTable(entries)


def validate_table(table: LatencyTable, space: ArchSpace) -> list[tuple]:
    """Return the reachable signatures missing from the table (empty = ok).
    Also rejects non-positive entries."""
    missing = [s for s in required_signatures(space) if s not in table.entries]
    bad = [s for s, v in table.entries.items() if v <= 0]
    if bad:
        raise ValueError(f"non-positive latency entries: {bad[:5]}")
    return missing


def save_latency_table(path, table: LatencyTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        f.write(f"# elastinet-latency-table v{table.version}\n")
        f.write("unit\tlayer\tkernel\twidth\tresolution\tms\n")
        for sig in sorted(table.entries, key=lambda s: (str(s[0]), s[1:])):
            u, l, k, w, r = sig
            f.write(f"{u}\t{l}\t{k}\t{w}\t{r}\t{table.entries[sig]!r}\n")


def load_latency_table(path) -> LatencyTable:
    entries = {}
    with Path(path).open() as f:
        header = f.readline().strip()
        if not header.startswith("# elastinet-latency-table v"):
            raise ValueError(f"{path}: missing latency-table version header")
        version = int(header.rsplit("v", 1)[1])
        f.readline()  # column header
        for line in f:
            line = line.strip()
            if not line:
                continue
            u, l, k, w, r, ms = line.split("\t")
            unit = u if u in ("stem", "head") else int(u)
            entries[(unit, int(l), int(k), int(w), int(r))] = float(ms)
    return LatencyTable(entries, version)

"""Progressive-shrinking training and the naive-sampling baseline.

The schedule runs six stages in fixed order: full network, elastic kernel,
two elastic-depth stages, two elastic-width stages.  Each fine-tune step
samples a batch resolution, samples one or more sub-networks from the
stage's cumulative space, distills against the frozen full network, and
applies one SGD step on the averaged gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, iter_batches
from .ops import (
    NumericsError,
    OptimizerState,
    cosine_lr,
    resize_bilinear,
    sgd_step,
    softmax,
    softmax_cross_entropy_backward,
    softmax_cross_entropy_forward,
)
from .space import ArchConfig, ArchSpace, canonical_arch, uniform_arch
from .supernet import SubNet, Supernet, extract_subnet, recalibrate_bn, sort_channels

# canonical large-scale stage settings: (name, epochs, initial lr,
# subnets per step, distillation)
CANONICAL_STAGES = (
    ("full", 180, 2.6, 1, False),
    ("kernel", 125, 0.96, 1, True),
    ("depth-1", 25, 0.08, 2, True),
    ("depth-2", 125, 0.24, 2, True),
    ("width-1", 25, 0.08, 4, True),
    ("width-2", 125, 0.24, 4, True),
)
CANONICAL_BATCH = 2048
WEIGHT_DECAY = 3e-5
MOMENTUM = 0.9


class ScheduleError(ValueError):
    pass


class TrainingDiverged(NumericsError):
    """Loss went non-finite; the net has been restored to the last good state."""


@dataclass(frozen=True)
class PsStage:
    name: str
    kernel_set: tuple[int, ...]
    depth_sets: tuple[tuple[int, ...], ...]  # per unit
    width_set: tuple[int, ...]
    epochs: int
    lr: float
    subnets_per_step: int
    distill: bool

    def is_width_stage(self) -> bool:
        return self.name.startswith("width")


@dataclass(frozen=True)
class PsSchedule:
    stages: tuple[PsStage, ...]
    batch_size: int
    canonical: tuple = CANONICAL_STAGES  # reference values, kept for reports


@dataclass(frozen=True)
class ScheduleOverrides:
    epoch_scale: float = 1.0
    epoch_floor: int = 0
    batch_size: int = CANONICAL_BATCH
    lr_scale: float | None = None  # default: batch_size / 2048
    # optional per-stage base LRs replacing the canonical six; the canonical
    # ratios taper hard after the full stage, which presumes a converged
    # full network — short schedules may want a flatter profile
    stage_lrs: tuple[float, ...] | None = None


def desk_overrides(batch_size: int = 64) -> ScheduleOverrides:
    """Desk default: 1/10 of the canonical epochs with a floor of 3."""
    return ScheduleOverrides(epoch_scale=0.1, epoch_floor=3,
                             batch_size=batch_size)


def _top(choices: tuple[int, ...], n: int) -> tuple[int, ...]:
    return tuple(sorted(choices)[-n:])


def build_ps_schedule(space: ArchSpace,
                      overrides: ScheduleOverrides | None = None) -> PsSchedule:
    """Stage list in the fixed order with cumulative sampling spaces:
    kernels open up first (max depth/width), then depths, then widths.
    Resolution is elastic in every stage."""
    ov = overrides or ScheduleOverrides()
    if ov.epoch_scale < 0 or ov.epoch_floor < 0 or ov.batch_size < 1:
        raise ScheduleError(f"invalid overrides: {ov}")
    stage_lrs = None
    if ov.stage_lrs is not None:
        stage_lrs = tuple(float(v) for v in ov.stage_lrs)
        if len(stage_lrs) != len(CANONICAL_STAGES) or \
                any(v <= 0 for v in stage_lrs):
            raise ScheduleError(f"stage_lrs needs {len(CANONICAL_STAGES)} "
                                f"positive values, got {ov.stage_lrs}")
    lr_scale = ov.lr_scale if ov.lr_scale is not None \
        else ov.batch_size / CANONICAL_BATCH
    kmax = (space.max_kernel,)
    wmax = (space.max_width,)
    dmax = tuple((space.max_depth(u),) for u in range(space.n_units))
    dtop2 = tuple(_top(space.depth_choices[u], 2) for u in range(space.n_units))
    dall = space.depth_choices
    wtop2 = _top(space.width_ratio_choices, 2)
    sampling = {
        "full": (kmax, dmax, wmax),
        "kernel": (space.kernel_choices, dmax, wmax),
        "depth-1": (space.kernel_choices, dtop2, wmax),
        "depth-2": (space.kernel_choices, dall, wmax),
        "width-1": (space.kernel_choices, dall, wtop2),
        "width-2": (space.kernel_choices, dall, space.width_ratio_choices),
    }
    stages = []
    for i, (name, epochs, lr, subnets, distill) in enumerate(CANONICAL_STAGES):
        if stage_lrs is not None:
            lr = stage_lrs[i]
        e = int(round(epochs * ov.epoch_scale))
        e = max(ov.epoch_floor, e)
        if name == "full":
            e = max(1, e)
        if e == 0:
            continue
        ks, ds, ws = sampling[name]
        stages.append(PsStage(name, ks, ds, ws, e, lr * lr_scale,
                              subnets, distill))
    if not stages:
        raise ScheduleError("overrides produced an empty schedule")
    return PsSchedule(tuple(stages), ov.batch_size)


def sample_arch(space: ArchSpace, stage: PsStage,
                rng: np.random.Generator) -> ArchConfig:
    """Independent uniform draws from the stage's active sets; resolution
    uniform over the space's resolution choices."""
    depths, kernels, widths = [], [], []
    for u in range(space.n_units):
        d = int(rng.choice(stage.depth_sets[u]))
        md = space.max_depth(u)
        depths.append(d)
        kernels.append(tuple(int(rng.choice(stage.kernel_set)) for _ in range(md)))
        widths.append(tuple(int(rng.choice(stage.width_set)) for _ in range(md)))
    r = int(rng.choice(space.resolution_choices))
    return canonical_arch(space, ArchConfig(tuple(depths), tuple(kernels),
                                            tuple(widths), r))


def probe_configs(space: ArchSpace) -> list[ArchConfig]:
    """The 8-config probe grid: min/max depth x min/max width x min/max
    kernel, broadcast uniformly, at the maximal resolution."""
    d_lo = min(min(c) for c in space.depth_choices)
    d_hi = max(max(c) for c in space.depth_choices)
    probes = []
    for d in sorted({d_lo, d_hi}):
        for w in sorted({space.width_ratio_choices[0], space.max_width}):
            for k in sorted({space.kernel_choices[0], space.max_kernel}):
                probes.append(uniform_arch(space, d, w, k))
    return probes


# ---------------------------------------------------------------------------
# losses

def kd_loss(student_logits, teacher_logits, labels, lam: float = 1.0,
            temp: float = 1.0):
    """Hard-label cross entropy plus lam * T^2 * KL(teacher || student) at
    temperature T, mean reduction.  Returns (loss, grad wrt student logits)."""
    ce, probs = softmax_cross_entropy_forward(student_logits, labels)
    grad = softmax_cross_entropy_backward(probs, labels)
    if lam == 0.0 or teacher_logits is None:
        return ce, grad
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"teacher {teacher_logits.shape} vs "
                         f"student {student_logits.shape}")
    n = student_logits.shape[0]
    pt = softmax(teacher_logits / temp, axis=1)
    zs = student_logits / temp
    zs = zs - zs.max(axis=1, keepdims=True)
    log_ps = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    log_pt = np.log(np.maximum(pt, 1e-12))
    kl = float((pt * (log_pt - log_ps)).sum(axis=1).mean())
    loss = ce + lam * temp * temp * kl
    grad = grad + lam * temp * (np.exp(log_ps) - pt) / n
    return loss, grad


# ---------------------------------------------------------------------------
# reports

@dataclass
class StageReport:
    name: str
    epochs: int
    steps: int
    losses: list[float] = field(default_factory=list)
    probe_accs: list[dict] = field(default_factory=list)  # {epoch, label, acc}


@dataclass
class TrainReport:
    seed: int
    stages: list[StageReport] = field(default_factory=list)
    probe_labels: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    total_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "wall_clock_s": self.wall_clock_s,
            "total_steps": self.total_steps,
            "probe_labels": self.probe_labels,
            "stages": [{"name": s.name, "epochs": s.epochs, "steps": s.steps,
                        "losses": s.losses, "probe_accs": s.probe_accs}
                       for s in self.stages],
        }


# ---------------------------------------------------------------------------
# stage runner

def _make_optimizer(net, lr0: float) -> OptimizerState:
    return OptimizerState(momentum=MOMENTUM, weight_decay=WEIGHT_DECAY,
                          base_lr=lr0, no_decay=net.no_decay_names())


def train_stage(net: Supernet, stage: PsStage, data: Dataset,
                batch_size: int, rng: np.random.Generator,
                teacher: Supernet | None = None,
                report: StageReport | None = None) -> StageReport:
    """Fine-tune the supernet on one stage.  Per step: sample a resolution,
    resize the batch, sample `subnets_per_step` configs, average their
    distillation gradients, take one Nesterov SGD step under a cosine
    schedule over the stage.  A non-finite loss aborts the stage after
    restoring the last epoch-boundary snapshot."""
    space = net.space
    steps_per_epoch = max(1, int(np.ceil(len(data) / batch_size)))
    total_steps = stage.epochs * steps_per_epoch
    report = report or StageReport(stage.name, stage.epochs, total_steps)
    opt = _make_optimizer(net, stage.lr)
    params = net.named_params()
    step = 0
    snapshot = net.state_snapshot()
    for _epoch in range(stage.epochs):
        for xb, yb in iter_batches(data, batch_size, rng):
            lr = cosine_lr(step, total_steps, stage.lr)
            r = int(rng.choice(space.resolution_choices))
            xr = resize_bilinear(xb, r)
            t_logits = None
            if stage.distill and teacher is not None:
                t_logits = teacher.forward(_at_resolution(teacher.max_arch(), r),
                                           xr, training=False)
            grads_sum: dict[str, np.ndarray] = {}
            loss_sum = 0.0
            for _ in range(stage.subnets_per_step):
                arch = _at_resolution(sample_arch(space, stage, rng), r)
                logits, cache = net.forward(arch, xr, training=True,
                                            need_cache=True)
                loss, glogits = kd_loss(logits, t_logits, yb)
                loss_sum += loss
                for name, g in net.backward(cache, glogits).items():
                    if name in grads_sum:
                        grads_sum[name] += g
                    else:
                        grads_sum[name] = g
            n_sub = stage.subnets_per_step
            loss = loss_sum / n_sub
            if not np.isfinite(loss):
                net.load_snapshot(snapshot)
                raise TrainingDiverged(
                    f"stage {stage.name}: non-finite loss at step {step}")
            if n_sub > 1:
                for g in grads_sum.values():
                    g /= n_sub
            sgd_step(params, grads_sum, opt, lr)
            report.losses.append(loss)
            step += 1
        snapshot = net.state_snapshot()
    return report


def _at_resolution(arch: ArchConfig, r: int) -> ArchConfig:
    return ArchConfig(arch.depths, arch.kernels, arch.widths, r)


def run_schedule(net: Supernet, schedule: PsSchedule, train_data: Dataset,
                 seed: int, probe_data: Dataset | None = None,
                 probe_every: int = 0,
                 checkpoint_hook=None) -> tuple[Supernet, TrainReport]:
    """Run all stages in order.  The teacher is frozen after the full stage;
    channel sorting is applied on entry to each width stage.  probe_every=N
    evaluates the 8-config probe grid every N epochs (0: stage ends only)."""
    rng = np.random.default_rng(seed)
    probes = probe_configs(net.space)
    report = TrainReport(seed=seed, probe_labels=[p.label() for p in probes])
    teacher = None
    t0 = time.monotonic()
    for stage in schedule.stages:
        if stage.is_width_stage():
            for unit in net.units:
                for layer in unit:
                    sort_channels(layer)
        steps_per_epoch = max(1, int(np.ceil(len(train_data) / schedule.batch_size)))
        sreport = StageReport(stage.name, stage.epochs,
                              stage.epochs * steps_per_epoch)
        if probe_every > 0 and probe_data is not None:
            # probe at epoch boundaries: run the stage one epoch at a time
            one_epoch = PsStage(stage.name, stage.kernel_set, stage.depth_sets,
                                stage.width_set, 1, stage.lr,
                                stage.subnets_per_step, stage.distill)
            for epoch in range(stage.epochs):
                train_stage(net, one_epoch, train_data, schedule.batch_size,
                            rng, teacher, report=sreport)
                if (epoch + 1) % probe_every == 0:
                    _record_probes(net, probes, probe_data, sreport, epoch)
        else:
            train_stage(net, stage, train_data, schedule.batch_size, rng,
                        teacher, report=sreport)
            if probe_data is not None:
                _record_probes(net, probes, probe_data, sreport, stage.epochs - 1)
        report.stages.append(sreport)
        report.total_steps += sreport.steps
        if stage.name == "full":
            teacher = net.clone()
        if checkpoint_hook is not None:
            checkpoint_hook(stage.name, net)
    report.wall_clock_s = time.monotonic() - t0
    return net, report


def _record_probes(net, probes, probe_data, sreport, epoch):
    for arch in probes:
        acc = evaluate(net, probe_data, arch=arch, calibration=probe_data)
        sreport.probe_accs.append({"epoch": epoch, "label": arch.label(),
                                   "acc": acc})


def train_naive(net: Supernet, space: ArchSpace, data: Dataset,
                epochs: int, batch_size: int, lr0: float, seed: int,
                subnets_per_step: int = 1) -> tuple[Supernet, TrainReport]:
    """Baseline: from scratch, every step samples uniformly from the full
    space (all elastic dimensions at once), same optimizer and cosine LR
    policy, no distillation."""
    full_stage = PsStage("naive", space.kernel_choices, space.depth_choices,
                         space.width_ratio_choices, epochs, lr0,
                         subnets_per_step, distill=False)
    rng = np.random.default_rng(seed)
    report = TrainReport(seed=seed)
    t0 = time.monotonic()
    sreport = train_stage(net, full_stage, data, batch_size, rng, teacher=None)
    report.stages.append(sreport)
    report.total_steps = sreport.steps
    report.wall_clock_s = time.monotonic() - t0
    return net, report


def finetune_subnet(subnet: SubNet, data: Dataset, epochs: int,
                    batch_size: int, lr0: float, seed: int) -> list[float]:
    """Fine-tune an extracted subnet with plain cross entropy and cosine LR.
    Returns the per-step loss curve."""
    rng = np.random.default_rng(seed)
    opt = OptimizerState(momentum=MOMENTUM, weight_decay=WEIGHT_DECAY,
                         base_lr=lr0, no_decay=subnet.no_decay_names())
    steps_per_epoch = max(1, int(np.ceil(len(data) / batch_size)))
    total = epochs * steps_per_epoch
    losses, step = [], 0
    r = subnet.resolution
    for _ in range(epochs):
        for xb, yb in iter_batches(data, batch_size, rng):
            params = subnet.named_params()
            xr = resize_bilinear(xb, r)
            logits, cache = subnet.forward(xr, training=True, need_cache=True)
            loss, probs = softmax_cross_entropy_forward(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"subnet fine-tune: non-finite loss "
                                       f"at step {step}")
            grads = subnet.backward(cache, softmax_cross_entropy_backward(probs, yb))
            sgd_step(params, grads, opt, cosine_lr(step, total, lr0))
            losses.append(loss)
            step += 1
    return losses


# ---------------------------------------------------------------------------
# evaluation

def evaluate(model, dataset: Dataset, arch: ArchConfig | None = None,
             calibration: Dataset | None = None, batch_size: int = 256,
             calibration_batches: int = 2) -> float:
    """Top-1 accuracy on `dataset` at the model's (or arch's) resolution.

    With an arch, the sub-network is extracted from the supernet and its BN
    stats are recalibrated on `calibration` first (required)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if arch is not None:
        if not isinstance(model, Supernet):
            raise TypeError("arch-based evaluation needs a Supernet")
        if calibration is None:
            raise ValueError("arch-based evaluation needs calibration data")
        subnet = extract_subnet(model, arch)
        batches = []
        for i, (xb, _) in enumerate(iter_batches(calibration, batch_size)):
            if i >= calibration_batches:
                break
            batches.append(resize_bilinear(xb, arch.resolution))
        recalibrate_bn(subnet, batches)
        model = subnet
    if isinstance(model, SubNet):
        r = model.resolution
        predict = lambda xb: model.forward(resize_bilinear(xb, r))
    else:
        march = model.max_arch()
        r = march.resolution
        predict = lambda xb: model.forward(march, resize_bilinear(xb, r))
    correct = 0
    for xb, yb in iter_batches(dataset, batch_size):
        logits = predict(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(dataset)

"""Discrete architecture design space and sub-network configurations.

A space is a grid of per-unit depths, per-layer kernel sizes and width
expansion ratios, plus a set of input resolutions.  A configuration picks
one value for every slot; slots past a unit's chosen depth are inactive and
carry placeholder values (the maximal choice) so that equality and encoding
are well defined.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

import numpy as np


class SpaceError(ValueError):
    """Raised for malformed spaces or configs that do not fit a space."""


@dataclass(frozen=True)
class ArchSpace:
    n_units: int
    depth_choices: tuple[tuple[int, ...], ...]  # per unit, sorted ascending
    width_ratio_choices: tuple[int, ...]        # global, sorted ascending
    kernel_choices: tuple[int, ...]             # global, sorted odd ints
    resolution_choices: tuple[int, ...]
    base_widths: tuple[int, ...]                # output channels per unit
    stem_channels: int
    n_classes: int

    def __post_init__(self):
        if self.n_units < 1 or len(self.depth_choices) != self.n_units:
            raise SpaceError("need one depth choice list per unit")
        if len(self.base_widths) != self.n_units:
            raise SpaceError("need one base width per unit")
        for choices in (self.width_ratio_choices, self.kernel_choices,
                        self.resolution_choices, *self.depth_choices):
            if not choices:
                raise SpaceError("every choice list must be non-empty")
            if list(choices) != sorted(choices):
                raise SpaceError(f"choice list {choices} must be sorted ascending")
        for k in self.kernel_choices:
            if k % 2 == 0:
                raise SpaceError(f"kernel size {k} must be odd")
        if min(self.resolution_choices) < 8:
            raise SpaceError("resolutions must be >= 8")

    @property
    def max_kernel(self) -> int:
        return self.kernel_choices[-1]

    @property
    def max_width(self) -> int:
        return self.width_ratio_choices[-1]

    def max_depth(self, unit: int) -> int:
        return self.depth_choices[unit][-1]

    def to_dict(self) -> dict:
        return {
            "n_units": self.n_units,
            "depth_choices": [list(d) for d in self.depth_choices],
            "width_ratio_choices": list(self.width_ratio_choices),
            "kernel_choices": list(self.kernel_choices),
            "resolution_choices": list(self.resolution_choices),
            "base_widths": list(self.base_widths),
            "stem_channels": self.stem_channels,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpace":
        return cls(
            n_units=int(d["n_units"]),
            depth_choices=tuple(tuple(int(x) for x in u) for u in d["depth_choices"]),
            width_ratio_choices=tuple(int(x) for x in d["width_ratio_choices"]),
            kernel_choices=tuple(int(x) for x in d["kernel_choices"]),
            resolution_choices=tuple(int(x) for x in d["resolution_choices"]),
            base_widths=tuple(int(x) for x in d["base_widths"]),
            stem_channels=int(d["stem_channels"]),
            n_classes=int(d["n_classes"]),
        )


def mobile_space() -> ArchSpace:
    """The canonical large mobile space: 5 units, depths {2,3,4}, width
    ratios {3,4,6}, kernels {3,5,7}, resolutions 128..224 step 4."""
    return ArchSpace(
        n_units=5,
        depth_choices=((2, 3, 4),) * 5,
        width_ratio_choices=(3, 4, 6),
        kernel_choices=(3, 5, 7),
        resolution_choices=tuple(range(128, 225, 4)),
        base_widths=(24, 40, 80, 112, 160),
        stem_channels=16,
        n_classes=1000,
    )


def desk_space() -> ArchSpace:
    """Small default space sized so a full training run fits on a CPU."""
    return ArchSpace(
        n_units=3,
        depth_choices=((1, 2),) * 3,
        width_ratio_choices=(2, 3, 4),
        kernel_choices=(3, 5, 7),
        resolution_choices=(24, 28, 32),
        base_widths=(16, 24, 40),
        stem_channels=8,
        n_classes=10,
    )


@dataclass(frozen=True)
class ArchConfig:
    """One sub-network: per-unit depth, per-slot kernel and width ratio,
    and an input resolution.  Slots at index >= depth are placeholders."""

    depths: tuple[int, ...]
    kernels: tuple[tuple[int, ...], ...]  # per unit, one entry per slot
    widths: tuple[tuple[int, ...], ...]
    resolution: int

    def to_dict(self) -> dict:
        return {
            "depths": list(self.depths),
            "kernels": [list(k) for k in self.kernels],
            "widths": [list(w) for w in self.widths],
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            depths=tuple(int(x) for x in d["depths"]),
            kernels=tuple(tuple(int(x) for x in u) for u in d["kernels"]),
            widths=tuple(tuple(int(x) for x in u) for u in d["widths"]),
            resolution=int(d["resolution"]),
        )

    def label(self) -> str:
        units = []
        for u, d in enumerate(self.depths):
            slots = ",".join(f"k{self.kernels[u][l]}w{self.widths[u][l]}"
                             for l in range(d))
            units.append(f"unit{u}:[{slots}]")
        return ";".join(units) + f";R={self.resolution}"


def validate_arch(space: ArchSpace, arch: ArchConfig) -> None:
    if len(arch.depths) != space.n_units:
        raise SpaceError(f"config has {len(arch.depths)} units, space has {space.n_units}")
    if arch.resolution not in space.resolution_choices:
        raise SpaceError(f"resolution {arch.resolution} not in {space.resolution_choices}")
    for u in range(space.n_units):
        if arch.depths[u] not in space.depth_choices[u]:
            raise SpaceError(f"depth {arch.depths[u]} invalid for unit {u}")
        md = space.max_depth(u)
        if len(arch.kernels[u]) != md or len(arch.widths[u]) != md:
            raise SpaceError(f"unit {u} needs {md} kernel/width slots")
        for l in range(arch.depths[u]):
            if arch.kernels[u][l] not in space.kernel_choices:
                raise SpaceError(f"kernel {arch.kernels[u][l]} not in {space.kernel_choices}")
            if arch.widths[u][l] not in space.width_ratio_choices:
                raise SpaceError(f"width ratio {arch.widths[u][l]} not in {space.width_ratio_choices}")


def canonical_arch(space: ArchSpace, arch: ArchConfig) -> ArchConfig:
    """Rewrite placeholder slots (index >= depth) to the maximal choices so
    that configs equal modulo unused slots compare equal."""
    validate_arch(space, arch)
    kernels, widths = [], []
    for u in range(space.n_units):
        d = arch.depths[u]
        ks = list(arch.kernels[u][:d]) + [space.max_kernel] * (space.max_depth(u) - d)
        ws = list(arch.widths[u][:d]) + [space.max_width] * (space.max_depth(u) - d)
        kernels.append(tuple(ks))
        widths.append(tuple(ws))
    return ArchConfig(tuple(arch.depths), tuple(kernels), tuple(widths), arch.resolution)


def max_arch(space: ArchSpace) -> ArchConfig:
    return ArchConfig(
        depths=tuple(space.max_depth(u) for u in range(space.n_units)),
        kernels=tuple((space.max_kernel,) * space.max_depth(u) for u in range(space.n_units)),
        widths=tuple((space.max_width,) * space.max_depth(u) for u in range(space.n_units)),
        resolution=space.resolution_choices[-1],
    )


def uniform_arch(space: ArchSpace, depth: int, width: int, kernel: int,
                 resolution: int | None = None) -> ArchConfig:
    """Broadcast one (depth, width, kernel) triple across all units/layers."""
    r = space.resolution_choices[-1] if resolution is None else resolution
    depths, kernels, widths = [], [], []
    for u in range(space.n_units):
        if depth not in space.depth_choices[u]:
            raise SpaceError(f"depth {depth} invalid for unit {u}")
        md = space.max_depth(u)
        depths.append(depth)
        kernels.append(tuple([kernel] * depth + [space.max_kernel] * (md - depth)))
        widths.append(tuple([width] * depth + [space.max_width] * (md - depth)))
    arch = ArchConfig(tuple(depths), tuple(kernels), tuple(widths), r)
    validate_arch(space, arch)
    return arch


def random_arch(space: ArchSpace, rng: np.random.Generator) -> ArchConfig:
    """Uniform independent draws for every gene, canonical placeholders."""
    depths, kernels, widths = [], [], []
    for u in range(space.n_units):
        d = int(rng.choice(space.depth_choices[u]))
        md = space.max_depth(u)
        ks = [int(rng.choice(space.kernel_choices)) for _ in range(md)]
        ws = [int(rng.choice(space.width_ratio_choices)) for _ in range(md)]
        depths.append(d)
        kernels.append(tuple(ks))
        widths.append(tuple(ws))
    r = int(rng.choice(space.resolution_choices))
    return canonical_arch(space, ArchConfig(tuple(depths), tuple(kernels),
                                            tuple(widths), r))


def count_subnetworks(space: ArchSpace) -> int:
    """Exact count of distinct (depth, kernel, width) configurations,
    resolution not included (multiply by len(resolution_choices) for the
    total number of deployable variants)."""
    per_layer = len(space.kernel_choices) * len(space.width_ratio_choices)
    total = 1
    for u in range(space.n_units):
        total *= sum(per_layer ** d for d in space.depth_choices[u])
    return total


def transform_param_count(space: ArchSpace) -> int:
    """Extra parameters per layer spent on kernel transform matrices: one
    (k^2 x k^2) matrix per adjacent step down the kernel-size chain."""
    ks = sorted(space.kernel_choices)
    return sum((k * k) ** 2 for k in ks[:-1])


def enumerate_archs(space: ArchSpace, include_resolutions: bool = True,
                    limit: int = 10 ** 6):
    """Yield every canonical config in the space, lexicographic order.
    Guarded: raises if the space exceeds `limit` configs."""
    n = count_subnetworks(space)
    if include_resolutions:
        n *= len(space.resolution_choices)
    if n > limit:
        raise SpaceError(f"space has {n} configs, exceeds enumeration limit {limit}")
    per_layer = list(itertools.product(space.kernel_choices, space.width_ratio_choices))
    resolutions = space.resolution_choices if include_resolutions \
        else (space.resolution_choices[-1],)

    def unit_variants(u: int):
        md = space.max_depth(u)
        for d in space.depth_choices[u]:
            for combo in itertools.product(per_layer, repeat=d):
                ks = tuple(k for k, _ in combo) + (space.max_kernel,) * (md - d)
                ws = tuple(w for _, w in combo) + (space.max_width,) * (md - d)
                yield d, ks, ws

    all_units = [list(unit_variants(u)) for u in range(space.n_units)]
    for r in resolutions:
        for combo in itertools.product(*all_units):
            yield ArchConfig(
                depths=tuple(c[0] for c in combo),
                kernels=tuple(c[1] for c in combo),
                widths=tuple(c[2] for c in combo),
                resolution=r,
            )


_UNIFORM_RE = re.compile(r"^\s*([DWKR])\s*=\s*(\d+)\s*$", re.IGNORECASE)
_UNIT_RE = re.compile(r"^unit(\d+):\[([^\]]*)\]$", re.IGNORECASE)
_SLOT_RE = re.compile(r"^k(\d+)w(\d+)$", re.IGNORECASE)


def parse_arch_spec(text: str, space: ArchSpace) -> ArchConfig:
    """Parse the CLI mini-grammar.

    Uniform form: ``D=2,W=3,K=5`` with optional ``R=28`` — broadcasts the
    triple to every unit and layer.  Verbose form:
    ``unit0:[k3w4,k5w3];unit1:[k3w2];R=28`` — one unit per segment, depth
    given by the number of slots.
    """
    text = text.strip()
    if "unit" in text.lower():
        segments = [s for s in text.split(";") if s.strip()]
        depths = [None] * space.n_units
        kernels = [None] * space.n_units
        widths = [None] * space.n_units
        resolution = space.resolution_choices[-1]
        for seg in segments:
            seg = seg.strip()
            m = _UNIFORM_RE.match(seg)
            if m and m.group(1).upper() == "R":
                resolution = int(m.group(2))
                continue
            m = _UNIT_RE.match(seg)
            if not m:
                raise SpaceError(f"cannot parse arch segment {seg!r}")
            u = int(m.group(1))
            if not 0 <= u < space.n_units:
                raise SpaceError(f"unit index {u} out of range")
            slots = [s.strip() for s in m.group(2).split(",") if s.strip()]
            ks, ws = [], []
            for s in slots:
                sm = _SLOT_RE.match(s)
                if not sm:
                    raise SpaceError(f"cannot parse layer slot {s!r}")
                ks.append(int(sm.group(1)))
                ws.append(int(sm.group(2)))
            md = space.max_depth(u)
            if len(slots) > md:
                raise SpaceError(f"unit {u} allows at most {md} layers")
            depths[u] = len(slots)
            kernels[u] = tuple(ks + [space.max_kernel] * (md - len(ks)))
            widths[u] = tuple(ws + [space.max_width] * (md - len(ws)))
        for u in range(space.n_units):
            if depths[u] is None:
                raise SpaceError(f"missing spec for unit {u}")
        arch = ArchConfig(tuple(depths), tuple(kernels), tuple(widths), resolution)
        return canonical_arch(space, arch)

    fields: dict[str, int] = {}
    for part in text.split(","):
        m = _UNIFORM_RE.match(part)
        if not m:
            raise SpaceError(f"cannot parse arch field {part!r}")
        fields[m.group(1).upper()] = int(m.group(2))
    for req in ("D", "W", "K"):
        if req not in fields:
            raise SpaceError(f"uniform arch spec needs {req}=")
    return uniform_arch(space, fields["D"], fields["W"], fields["K"],
                        fields.get("R"))

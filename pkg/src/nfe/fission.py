"""Network fission: disjoint weight-group masks and multi-exit execution plans.

A fission plan assigns each backbone stage a number of weight groups. Stage
weights are partitioned elementwise into those groups by categorical draws;
an exit's path uses its own group where one exists and falls back to group 1
otherwise. Common path prefixes are deduplicated into a small execution DAG
so the multi-exit forward costs no more than a dense single-model forward
(plus exit heads).
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError

RATIO_TOL = 1e-9


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FissionPlan:
    """Per-stage group counts and grouping ratios defining a multi-exit topology.

    ``groups_per_stage[i]`` is the number of disjoint weight groups in stage
    ``i+1`` (stages are 1-based in all public APIs). ``group_ratios[i]`` holds
    the categorical probabilities used to assign weights to those groups.
    """

    num_exits: int
    num_stages: int
    groups_per_stage: tuple[int, ...]
    group_ratios: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if self.num_exits < 1:
            raise ConfigError(f"num_exits must be >= 1, got {self.num_exits}")
        if self.num_stages < 1:
            raise ConfigError(f"num_stages must be >= 1, got {self.num_stages}")
        if len(self.groups_per_stage) != self.num_stages:
            raise ConfigError(
                f"groups_per_stage has {len(self.groups_per_stage)} entries "
                f"for {self.num_stages} stages"
            )
        if self.groups_per_stage[0] != 1:
            raise ConfigError(
                f"stage 1 must be fully shared (1 group), got {self.groups_per_stage[0]}"
            )
        for i, g in enumerate(self.groups_per_stage, start=1):
            if not 1 <= g <= self.num_exits:
                raise ConfigError(
                    f"stage {i}: group count {g} outside [1, {self.num_exits}]"
                )
        if len(self.group_ratios) != self.num_stages:
            raise ConfigError("group_ratios must have one entry per stage")
        for i, (g, ratios) in enumerate(
            zip(self.groups_per_stage, self.group_ratios), start=1
        ):
            if len(ratios) != g:
                raise ConfigError(
                    f"stage {i}: {len(ratios)} ratios for {g} groups"
                )
            if any(r < 0 for r in ratios):
                raise ConfigError(f"stage {i}: negative group ratio")
            if abs(sum(ratios) - 1.0) > RATIO_TOL:
                raise ConfigError(
                    f"stage {i}: group ratios sum to {sum(ratios)!r}, expected 1"
                )

    def with_two_group_ratio(self, ratio: float) -> "FissionPlan":
        """Return a copy where every 2-group stage uses ratios (ratio, 1-ratio)."""
        if not 0.0 < ratio < 1.0:
            raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
        new_ratios = []
        for g, r in zip(self.groups_per_stage, self.group_ratios):
            new_ratios.append((ratio, 1.0 - ratio) if g == 2 else r)
        return FissionPlan(
            self.num_exits, self.num_stages, self.groups_per_stage, tuple(new_ratios)
        )

    def is_monotone(self) -> bool:
        return all(
            a <= b for a, b in zip(self.groups_per_stage, self.groups_per_stage[1:])
        )

    def to_dict(self) -> dict:
        return {
            "num_exits": self.num_exits,
            "num_stages": self.num_stages,
            "groups_per_stage": list(self.groups_per_stage),
            "group_ratios": [list(r) for r in self.group_ratios],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FissionPlan":
        return cls(
            int(d["num_exits"]),
            int(d["num_stages"]),
            tuple(int(g) for g in d["groups_per_stage"]),
            tuple(tuple(float(x) for x in r) for r in d["group_ratios"]),
        )


def _uniform_ratios(groups_per_stage: Sequence[int]) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple([1.0 / g] * g) for g in groups_per_stage)


def default_plan(num_exits: int, num_stages: int) -> FissionPlan:
    """Balanced-grouping plan: stage i gets max(1, N - (K - i)) groups.

    Counting down one group per stage from the last stage reproduces the
    standard fission schedule; it requires num_exits <= num_stages so the
    countdown reaches a fully shared first stage.
    """
    if num_exits < 1 or num_stages < 1:
        raise ConfigError(
            f"num_exits and num_stages must be positive, got ({num_exits}, {num_stages})"
        )
    if num_exits > num_stages:
        raise ConfigError(
            f"num_exits ({num_exits}) cannot exceed num_stages ({num_stages}): "
            "the group countdown cannot terminate at a shared first stage"
        )
    groups = tuple(
        max(1, num_exits - (num_stages - i)) for i in range(1, num_stages + 1)
    )
    return FissionPlan(num_exits, num_stages, groups, _uniform_ratios(groups))


def make_plan(
    groups_per_stage: Sequence[int],
    num_exits: int | None = None,
    group_ratios: Sequence[Sequence[float]] | None = None,
) -> FissionPlan:
    """Build a (possibly non-monotone) custom plan from explicit group counts."""
    groups = tuple(int(g) for g in groups_per_stage)
    if num_exits is None:
        num_exits = max(groups) if groups else 1
    ratios = (
        _uniform_ratios(groups)
        if group_ratios is None
        else tuple(tuple(float(x) for x in r) for r in group_ratios)
    )
    return FissionPlan(num_exits, len(groups), groups, ratios)


def parse_variant_name(name: str) -> tuple[int, ...]:
    """Decode names like ``Res*2*4`` or ``WRN1*3`` into per-stage group counts.

    Convention used by this toolkit: after the alphabetic prefix, the name
    carries one character per stage; a digit marks a stage that carries a
    second weight group, ``*`` marks a fully shared stage. Stage 1 is always
    shared regardless of its character. This encoding is a documented
    convention of the toolkit, not a universal standard.
    """
    i = 0
    while i < len(name) and name[i].isalpha():
        i += 1
    code = name[i:]
    if not code:
        raise ConfigError(f"variant name {name!r} carries no stage code")
    groups = []
    for pos, ch in enumerate(code, start=1):
        if ch == "*":
            groups.append(1)
        elif ch.isdigit():
            groups.append(1 if pos == 1 else 2)
        else:
            raise ConfigError(f"variant name {name!r}: bad character {ch!r}")
    return tuple(groups)


# ---------------------------------------------------------------------------
# Group masks
# ---------------------------------------------------------------------------


def sample_categorical(
    shape: Sequence[int], ratios: Sequence[float], rng: np.random.Generator
) -> np.ndarray:
    """Independent 1-based categorical draws for every weight position."""
    cum = np.cumsum(np.asarray(ratios, dtype=np.float64))
    u = rng.random(tuple(shape))
    assign = np.searchsorted(cum, u, side="right")
    np.clip(assign, 0, len(cum) - 1, out=assign)
    return (assign + 1).astype(np.int64)


def masks_from_assignments(assignments: np.ndarray, num_groups: int) -> list[np.ndarray]:
    """Turn a 1-based assignment tensor into disjoint binary masks."""
    return [
        (assignments == j).astype(np.uint8) for j in range(1, num_groups + 1)
    ]


def partition_stage(
    weight_shape: Sequence[int],
    num_groups: int,
    ratios: Sequence[float],
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Partition a weight tensor into ``num_groups`` disjoint binary masks.

    Each position is assigned by one categorical draw with the given ratios,
    so the masks are pairwise disjoint and sum to the all-ones tensor. A
    single group short-circuits to the all-ones mask without consuming rng
    state.
    """
    if num_groups < 1:
        raise ConfigError(f"num_groups must be >= 1, got {num_groups}")
    if len(ratios) != num_groups:
        raise ConfigError(f"{len(ratios)} ratios for {num_groups} groups")
    if abs(sum(ratios) - 1.0) > RATIO_TOL:
        raise ConfigError(f"ratios sum to {sum(ratios)!r}, expected 1")
    if num_groups == 1:
        return [np.ones(tuple(weight_shape), dtype=np.uint8)]
    assign = sample_categorical(weight_shape, ratios, rng)
    return masks_from_assignments(assign, num_groups)


def apply_pai(group_masks: Sequence[np.ndarray], pai_mask: np.ndarray) -> list[np.ndarray]:
    """Intersect every group mask with a pruning-at-initialization mask.

    After this the group masks partition the surviving positions of
    ``pai_mask`` instead of the all-ones tensor.
    """
    pai_mask = np.asarray(pai_mask)
    for m in group_masks:
        if m.shape != pai_mask.shape:
            raise ValueError(
                f"mask shape {m.shape} does not match pai mask shape {pai_mask.shape}"
            )
    if pai_mask.size and not pai_mask.any():
        warnings.warn("pai mask removes every weight in a tensor", stacklevel=2)
    return [(m.astype(np.uint8) & pai_mask.astype(np.uint8)) for m in group_masks]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.uint8)
    a.setflags(write=False)
    return a


@dataclass
class GroupMaskSet:
    """Disjoint per-stage group masks plus the PaI mask they partition.

    ``layers[i]`` lists (name, shape) for the groupable tensors of stage
    ``i+1``; ``pai_masks[i][name]`` and ``group_masks[i][j][name]`` are binary
    uint8 arrays of that shape. Arrays are write-protected after construction.
    """

    plan: FissionPlan
    sparsity: float
    seed: int | None
    layers: list[list[tuple[str, tuple[int, ...]]]]
    pai_masks: list[dict[str, np.ndarray]]
    group_masks: list[list[dict[str, np.ndarray]]]

    def __post_init__(self):
        for stage in self.pai_masks:
            for name in stage:
                stage[name] = _freeze(stage[name])
        for stage in self.group_masks:
            for group in stage:
                for name in group:
                    group[name] = _freeze(group[name])

    def validate(self) -> None:
        """Check binary values, pairwise disjointness, and the partition identity."""
        if len(self.layers) != self.plan.num_stages:
            raise ConfigError("mask set covers a different number of stages than its plan")
        for i, stage_layers in enumerate(self.layers):
            g = self.plan.groups_per_stage[i]
            if len(self.group_masks[i]) != g:
                raise ConfigError(f"stage {i + 1}: expected {g} groups")
            for name, shape in stage_layers:
                pai = self.pai_masks[i][name]
                if pai.shape != tuple(shape):
                    raise ConfigError(f"stage {i + 1} layer {name}: pai shape mismatch")
                total = np.zeros(shape, dtype=np.int64)
                for j in range(g):
                    m = self.group_masks[i][j][name]
                    if m.shape != tuple(shape):
                        raise ConfigError(
                            f"stage {i + 1} layer {name} group {j + 1}: shape mismatch"
                        )
                    vals = np.unique(m)
                    if not np.all(np.isin(vals, [0, 1])):
                        raise ConfigError("mask entries must be 0 or 1")
                    total += m
                # Disjointness and partition in one check: disjoint binary
                # masks are exactly those whose sum never exceeds 1, and the
                # partition requires the sum to equal the pai mask.
                if not np.array_equal(total, pai.astype(np.int64)):
                    raise ConfigError(
                        f"stage {i + 1} layer {name}: group masks do not partition the pai mask"
                    )

    def group_nonzeros(self, stage: int, group: int) -> int:
        """Surviving weight count of one (stage, group), both 1-based."""
        masks = self.group_masks[stage - 1][group - 1]
        return int(sum(int(m.sum()) for m in masks.values()))

    def empty_groups(self) -> list[tuple[int, int]]:
        out = []
        for i in range(self.plan.num_stages):
            for j in range(self.plan.groups_per_stage[i]):
                if self.group_nonzeros(i + 1, j + 1) == 0:
                    out.append((i + 1, j + 1))
        return out

    def stage_weight_count(self, stage: int) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layers[stage - 1])

    def total_weights(self) -> int:
        return sum(self.stage_weight_count(i + 1) for i in range(len(self.layers)))

    def total_surviving(self) -> int:
        return int(
            sum(int(p.sum()) for stage in self.pai_masks for p in stage.values())
        )


def build_group_masks(
    plan: FissionPlan,
    stage_shapes: Sequence[Sequence[tuple[str, tuple[int, ...]]]],
    pai_masks: Sequence[Mapping[str, np.ndarray]] | None = None,
    sparsity: float = 0.0,
    seed: int = 0,
) -> GroupMaskSet:
    """Draw group masks for every stage/layer and intersect them with PaI masks.

    ``stage_shapes[i]`` lists (name, shape) pairs for stage i+1 in a fixed
    order; identical seed, plan, and shapes always produce identical masks.
    """
    if len(stage_shapes) != plan.num_stages:
        raise ConfigError(
            f"got shapes for {len(stage_shapes)} stages, plan has {plan.num_stages}"
        )
    rng = np.random.default_rng(seed)
    layers = [[(n, tuple(s)) for n, s in stage] for stage in stage_shapes]
    pai_out: list[dict[str, np.ndarray]] = []
    groups_out: list[list[dict[str, np.ndarray]]] = []
    for i, stage_layers in enumerate(layers):
        g = plan.groups_per_stage[i]
        ratios = plan.group_ratios[i]
        stage_pai: dict[str, np.ndarray] = {}
        stage_groups: list[dict[str, np.ndarray]] = [dict() for _ in range(g)]
        for name, shape in stage_layers:
            if pai_masks is None:
                p = np.ones(shape, dtype=np.uint8)
            else:
                p = np.asarray(pai_masks[i][name], dtype=np.uint8)
                if p.shape != shape:
                    raise ValueError(
                        f"stage {i + 1} layer {name}: pai mask shape {p.shape} != {shape}"
                    )
            masks = partition_stage(shape, g, ratios, rng)
            masks = apply_pai(masks, p)
            stage_pai[name] = p
            for j in range(g):
                stage_groups[j][name] = masks[j]
        pai_out.append(stage_pai)
        groups_out.append(stage_groups)
    return GroupMaskSet(plan, float(sparsity), seed, layers, pai_out, groups_out)


# ---------------------------------------------------------------------------
# Exit paths and the execution DAG
# ---------------------------------------------------------------------------


def group_for(stage: int, exit_index: int, plan: FissionPlan) -> int:
    """Group used by an exit at a stage: its own group if present, else group 1."""
    if not 1 <= stage <= plan.num_stages:
        raise ConfigError(f"stage {stage} outside [1, {plan.num_stages}]")
    if not 1 <= exit_index <= plan.num_exits:
        raise ConfigError(f"exit {exit_index} outside [1, {plan.num_exits}]")
    g = plan.groups_per_stage[stage - 1]
    return exit_index if exit_index <= g else 1


def exit_path_groups(plan: FissionPlan, exit_index: int) -> list[int]:
    """Group sequence (one per stage) on an exit's input-to-output path."""
    return [group_for(i, exit_index, plan) for i in range(1, plan.num_stages + 1)]


STEM_LINEAGE = -1


@dataclass(frozen=True)
class DagNode:
    """One deduplicated stage computation: which group runs on which input.

    ``lineage`` is the node id producing this node's input activation, or
    ``STEM_LINEAGE`` for stage-1 nodes fed by the shared stem.
    """

    stage: int
    group: int
    lineage: int


@dataclass
class ExecutionDag:
    """Deduplicated forward plan: nodes, dataflow edges, and exit terminals."""

    nodes: list[DagNode]
    edges: list[tuple[int, int]]
    exit_heads: list[int]
    exit_paths: list[list[int]] = field(default_factory=list)

    def nodes_at_stage(self, stage: int) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.stage == stage]


def build_execution_dag(plan: FissionPlan) -> ExecutionDag:
    """Deduplicate exit paths into a DAG sharing every common prefix.

    Two exits share the node at stage i exactly when their group assignments
    agree at every stage <= i; each distinct (stage, group, input lineage)
    appears once.
    """
    nodes: list[DagNode] = []
    index: dict[tuple[int, int], int] = {}  # (lineage, group) -> node id
    paths: list[list[int]] = [[] for _ in range(plan.num_exits)]
    for e in range(1, plan.num_exits + 1):
        lineage = STEM_LINEAGE
        for stage in range(1, plan.num_stages + 1):
            grp = group_for(stage, e, plan)
            key = (lineage, grp)
            if key not in index:
                index[key] = len(nodes)
                nodes.append(DagNode(stage, grp, lineage))
            node_id = index[key]
            paths[e - 1].append(node_id)
            lineage = node_id
    # Stage-major node order keeps execution sequential over stages.
    order = sorted(range(len(nodes)), key=lambda i: (nodes[i].stage, i))
    remap = {old: new for new, old in enumerate(order)}
    renumbered = [
        DagNode(
            nodes[old].stage,
            nodes[old].group,
            nodes[old].lineage if nodes[old].lineage == STEM_LINEAGE else remap[nodes[old].lineage],
        )
        for old in order
    ]
    paths = [[remap[i] for i in p] for p in paths]
    edges = [
        (n.lineage, i) for i, n in enumerate(renumbered) if n.lineage != STEM_LINEAGE
    ]
    heads = [p[-1] for p in paths]
    return ExecutionDag(renumbered, edges, heads, paths)


# ---------------------------------------------------------------------------
# Mask container serialization
# ---------------------------------------------------------------------------

_MAGIC = b"NFEMASK1"


def mask_container_bytes(mask_set: GroupMaskSet) -> bytes:
    """Encode masks as bit-packed arrays behind a JSON header.

    The header carries the plan, seed, and sparsity so a fission topology is
    exactly reproducible from the container alone.
    """
    header = {
        "format": "nfe-mask-container-v1",
        "plan": mask_set.plan.to_dict(),
        "sparsity": mask_set.sparsity,
        "seed": mask_set.seed,
        "stages": [
            {"layers": [{"name": n, "shape": list(s)} for n, s in stage]}
            for stage in mask_set.layers
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<Q", len(blob)), blob]
    for i, stage in enumerate(mask_set.layers):
        for name, _ in stage:
            chunks.append(np.packbits(mask_set.pai_masks[i][name].reshape(-1)).tobytes())
        for j in range(mask_set.plan.groups_per_stage[i]):
            for name, _ in stage:
                chunks.append(
                    np.packbits(mask_set.group_masks[i][j][name].reshape(-1)).tobytes()
                )
    return b"".join(chunks)


def mask_container_from_bytes(raw: bytes) -> GroupMaskSet:
    """Decode a container produced by :func:`mask_container_bytes`."""
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a mask container (bad magic)")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    plan = FissionPlan.from_dict(header["plan"])
    layers = [
        [(l["name"], tuple(l["shape"])) for l in stage["layers"]]
        for stage in header["stages"]
    ]

    def read_mask(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal off
        n = int(np.prod(shape))
        nbytes = (n + 7) // 8
        bits = np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=off)
        off += nbytes
        return np.unpackbits(bits, count=n).reshape(shape)

    pai_masks = []
    group_masks = []
    for i, stage in enumerate(layers):
        pai_masks.append({name: read_mask(shape) for name, shape in stage})
        group_masks.append(
            [
                {name: read_mask(shape) for name, shape in stage}
                for _ in range(plan.groups_per_stage[i])
            ]
        )
    ms = GroupMaskSet(
        plan,
        float(header["sparsity"]),
        header["seed"],
        layers,
        pai_masks,
        group_masks,
    )
    ms.validate()
    return ms


def save_mask_container(mask_set: GroupMaskSet, path) -> None:
    """Write a mask container file (see :func:`mask_container_bytes`)."""
    with open(path, "wb") as f:
        f.write(mask_container_bytes(mask_set))


def load_mask_container(path) -> GroupMaskSet:
    """Read a mask container written by :func:`save_mask_container`."""
    with open(path, "rb") as f:
        return mask_container_from_bytes(f.read())

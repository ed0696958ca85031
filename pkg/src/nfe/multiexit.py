"""Multi-exit model construction, DAG execution, and compute-cost accounting.

fission_transform rewires a staged backbone into an N-exit model: every DAG
node is a structural copy of its stage whose groupable weights are tied to
the backbone's tensors and masked by the node's weight group. Normalization
layers and shortcut convolutions are owned per node (paths that diverge see
different activation statistics), and each exit gets its own classifier head.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbones import (
    GROUPABLE_TYPES,
    StagedBackbone,
    groupable_named_modules,
    rebuild_backbone,
)
from .errors import ConfigError, DeadExitError
from .fission import (
    STEM_LINEAGE,
    ExecutionDag,
    FissionPlan,
    GroupMaskSet,
    build_execution_dag,
    build_group_masks,
)


class MultiExitModel(nn.Module):
    """Backbone rewired into N exits executing along a shared-prefix DAG.

    ``forward`` returns one logit tensor per exit. Groupable stage weights are
    shared across nodes (and with the source backbone); masks are buffers, so
    they follow device/dtype moves but are not trainable parameters.
    """

    def __init__(
        self,
        stem: nn.Module,
        node_modules: list[nn.Module],
        heads: list[nn.Module],
        dag: ExecutionDag,
        plan: FissionPlan,
        mask_set: GroupMaskSet,
        backbone_config: dict,
    ):
        super().__init__()
        self.stem = stem
        self.nodes = nn.ModuleList(node_modules)
        self.heads = nn.ModuleList(heads)
        self.dag = dag
        self.plan = plan
        self.mask_set = mask_set
        self.backbone_config = dict(backbone_config)
        self._mask_entries: list[tuple[nn.Parameter, str]] = []
        for stage in range(1, plan.num_stages + 1):
            first = dag.nodes_at_stage(stage)[0]
            for k, (name, mod) in enumerate(groupable_named_modules(self.nodes[first])):
                buf = f"pai_s{stage}_{k}"
                pai = mask_set.pai_masks[stage - 1][name]
                self.register_buffer(
                    buf, torch.from_numpy(np.array(pai, dtype=np.float32)), persistent=False
                )
                self._mask_entries.append((mod.weight, buf))

    @property
    def num_exits(self) -> int:
        return self.plan.num_exits

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = self.stem(x)
        acts: list[torch.Tensor | None] = [None] * len(self.dag.nodes)
        for idx, node in enumerate(self.dag.nodes):
            src = feats if node.lineage == STEM_LINEAGE else acts[node.lineage]
            acts[idx] = self.nodes[idx](src)
        return [self.heads[j](acts[h]) for j, h in enumerate(self.dag.exit_heads)]

    def forward_exit(self, exit_index: int, x: torch.Tensor) -> torch.Tensor:
        """Run one exit end to end without any prefix sharing (1-based index)."""
        if not 1 <= exit_index <= self.num_exits:
            raise ConfigError(f"exit {exit_index} outside [1, {self.num_exits}]")
        feats = self.stem(x)
        for node_id in self.dag.exit_paths[exit_index - 1]:
            feats = self.nodes[node_id](feats)
        return self.heads[exit_index - 1](feats)

    def apply_weight_masks(self) -> None:
        """Zero shared weights at pruned positions (call after optimizer steps)."""
        with torch.no_grad():
            for param, buf in self._mask_entries:
                param.mul_(getattr(self, buf))

    def pruned_positions_are_zero(self) -> bool:
        with torch.no_grad():
            for param, buf in self._mask_entries:
                mask = getattr(self, buf)
                if bool((param[mask == 0] != 0).any()):
                    return False
        return True

    def materialize_exit(self, exit_index: int) -> StagedBackbone:
        """Export one exit as a standalone plain backbone.

        The result carries this exit's masked stage weights baked in, plus its
        path's normalization/shortcut state and its head. Its plain sequential
        forward is the reference semantics for the DAG execution.
        """
        if not 1 <= exit_index <= self.num_exits:
            raise ConfigError(f"exit {exit_index} outside [1, {self.num_exits}]")
        ref = rebuild_backbone(self.backbone_config)
        ref.stem.load_state_dict(self.stem.state_dict())
        for stage_pos, node_id in enumerate(self.dag.exit_paths[exit_index - 1]):
            node_mod = self.nodes[node_id]
            sd = node_mod.state_dict()
            for name, mod in groupable_named_modules(node_mod):
                sd[f"{name}.weight"] = (mod.weight * mod.weight_mask).detach()
            ref.stages[stage_pos].load_state_dict(sd)
        ref.head.load_state_dict(self.heads[exit_index - 1].state_dict())
        return ref


def fission_transform(
    backbone: StagedBackbone,
    plan: FissionPlan,
    mask_set: GroupMaskSet | None = None,
    seed: int = 0,
) -> MultiExitModel:
    """Rewire a staged backbone into a multi-exit model under a fission plan.

    The backbone's stem and groupable stage weights are adopted (shared, not
    copied); per-node normalization and shortcut layers start as copies of the
    backbone's. Construction fails loudly if any exit path crosses a weight
    group that pruning left empty.
    """
    if plan.num_stages != backbone.num_stages:
        raise ConfigError(
            f"plan has {plan.num_stages} stages, backbone has {backbone.num_stages}"
        )
    if mask_set is None:
        mask_set = build_group_masks(plan, backbone.stage_shapes(), seed=seed)
    shapes = [[(n, tuple(s)) for n, s in st] for st in backbone.stage_shapes()]
    if shapes != mask_set.layers:
        raise ConfigError("mask set layer layout does not match the backbone stages")
    mask_set.validate()

    empty = mask_set.empty_groups()
    if empty:
        raise DeadExitError(
            f"group masks with no surviving weights at (stage, group): {empty}; "
            "every group lies on some exit's path"
        )
    for i in range(plan.num_stages):
        for j in range(plan.groups_per_stage[i]):
            for name, _ in mask_set.layers[i]:
                if int(mask_set.group_masks[i][j][name].sum()) == 0:
                    warnings.warn(
                        f"stage {i + 1} group {j + 1} layer {name} has an all-zero mask",
                        stacklevel=2,
                    )

    dag = build_execution_dag(plan)
    node_modules = []
    for node in dag.nodes:
        stage_idx = node.stage - 1
        node_mod = copy.deepcopy(backbone.stages[stage_idx])
        canon = dict(groupable_named_modules(backbone.stages[stage_idx]))
        for name, mod in groupable_named_modules(node_mod):
            mod.weight = canon[name].weight
            group_mask = mask_set.group_masks[stage_idx][node.group - 1][name]
            mod.weight_mask = torch.from_numpy(np.array(group_mask, dtype=np.float32))
        node_modules.append(node_mod)

    ref_param = next(backbone.parameters())
    heads = [copy.deepcopy(backbone.head)]
    for _ in range(plan.num_exits - 1):
        heads.append(
            backbone.make_head().to(dtype=ref_param.dtype, device=ref_param.device)
        )

    model = MultiExitModel(
        backbone.stem, node_modules, heads, dag, plan, mask_set, backbone.config
    )
    model.apply_weight_masks()
    return model


def parameter_breakdown(model: MultiExitModel) -> dict[str, int]:
    """Unique-parameter accounting: shared weights vs replicated node/head state."""
    shared_ids = {id(p) for p, _ in model._mask_entries}
    stem = sum(p.numel() for p in model.stem.parameters())
    shared = sum(p.numel() for p, _ in model._mask_entries)
    heads = sum(p.numel() for p in model.heads.parameters())
    node_extra = sum(
        p.numel()
        for p in model.nodes.parameters()
        if id(p) not in shared_ids
    )
    total = sum(p.numel() for p in model.parameters())  # deduplicates shared tensors
    return {
        "stem": stem,
        "shared_stage_weights": shared,
        "replicated_node_state": node_extra,
        "heads": heads,
        "total_unique": total,
    }


# ---------------------------------------------------------------------------
# FLOPs accounting (theoretical multiply-accumulates from nonzero weights)
# ---------------------------------------------------------------------------


@dataclass
class FlopsReport:
    """Multiply-accumulate counts for one input, and ratios vs a dense single model."""

    per_exit: list[float]
    total: float
    dense_total: float
    ratio: float
    conv_masked: float
    conv_dense: float
    conv_ratio: float

    def to_dict(self) -> dict:
        return {
            "per_exit": list(self.per_exit),
            "total": self.total,
            "dense_total": self.dense_total,
            "ratio": self.ratio,
            "conv_masked": self.conv_masked,
            "conv_dense": self.conv_dense,
            "conv_ratio": self.conv_ratio,
        }


class _MacCounter:
    """Forward hooks accumulating per-module MACs, split by groupable layers."""

    def __init__(self):
        self.by_module: dict[int, float] = {}
        self.groupable: dict[int, float] = {}
        self._handles = []

    def _macs(self, module: nn.Module, output: torch.Tensor) -> float | None:
        if isinstance(module, nn.Conv2d):  # includes GroupableConv2d
            if isinstance(module, GROUPABLE_TYPES) and module.weight_mask is not None:
                nnz = float(((module.weight != 0) & (module.weight_mask != 0)).sum())
            else:
                nnz = float(module.weight.numel())
            spatial = float(output.shape[-2] * output.shape[-1])
            macs = nnz * spatial
            if module.bias is not None:
                macs += float(module.out_channels) * spatial
            return macs
        if isinstance(module, nn.Linear):
            if isinstance(module, GROUPABLE_TYPES) and module.weight_mask is not None:
                nnz = float(((module.weight != 0) & (module.weight_mask != 0)).sum())
            else:
                nnz = float(module.weight.numel())
            macs = nnz
            if module.bias is not None:
                macs += float(module.out_features)
            return macs
        if isinstance(module, nn.BatchNorm2d):
            return float(output.numel())  # one scale-and-shift per element
        if isinstance(module, nn.BatchNorm1d):
            return float(output.numel())
        return None

    def attach(self, root: nn.Module) -> None:
        def hook(module, inputs, output):
            macs = self._macs(module, output)
            if macs is None:
                return
            key = id(module)
            self.by_module[key] = self.by_module.get(key, 0.0) + macs
            if isinstance(module, GROUPABLE_TYPES):
                self.groupable[key] = self.groupable.get(key, 0.0) + macs

        for m in root.modules():
            self._handles.append(m.register_forward_hook(hook))

    def detach(self) -> None:
        for h in self._handles:
            h.remove()
        self._handles = []

    def region_total(self, region: nn.Module) -> float:
        ids = {id(m) for m in region.modules()}
        return sum(v for k, v in self.by_module.items() if k in ids)

    def region_groupable(self, region: nn.Module) -> float:
        ids = {id(m) for m in region.modules()}
        return sum(v for k, v in self.groupable.items() if k in ids)


def _count_single(model: nn.Module, x: torch.Tensor) -> _MacCounter:
    counter = _MacCounter()
    counter.attach(model)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        model(x)
    model.train(was_training)
    counter.detach()
    return counter


def count_flops(model: MultiExitModel, input_shape: tuple | None = None) -> FlopsReport:
    """Theoretical MAC counts of the deduplicated multi-exit forward.

    Each DAG node is counted once (prefix sharing), groupable layers count
    only nonzero masked weights, and the reference cost is a freshly built
    dense single backbone with one head at the same input shape.
    """
    if input_shape is None:
        input_shape = tuple(model.backbone_config["input_shape"])
    x = torch.zeros((1, *input_shape))
    counter = _count_single(model, x)

    stem = counter.region_total(model.stem)
    node_totals = [counter.region_total(n) for n in model.nodes]
    head_totals = [counter.region_total(h) for h in model.heads]
    conv_masked = sum(counter.region_groupable(n) for n in model.nodes)

    per_exit = []
    for j in range(model.num_exits):
        path = model.dag.exit_paths[j]
        per_exit.append(stem + sum(node_totals[i] for i in path) + head_totals[j])
    total = stem + sum(node_totals) + sum(head_totals)

    dense = rebuild_backbone(model.backbone_config)
    dense_counter = _count_single(dense, x)
    dense_total = dense_counter.region_total(dense)
    conv_dense = sum(
        dense_counter.region_groupable(stage) for stage in dense.stages
    )

    return FlopsReport(
        per_exit=per_exit,
        total=total,
        dense_total=dense_total,
        ratio=total / dense_total,
        conv_masked=conv_masked,
        conv_dense=conv_dense,
        conv_ratio=conv_masked / conv_dense,
    )

"""Desk-scale ablation sweeps.

Each axis trains one model per cell and reports stripped-model top-1,
arranged with the same row/column layout as the corresponding design-choice
study: head kind per module, distillation baselines, alignment level x
placement, map variants, classifier toggle, and map-head placement. Nothing
about the orderings is asserted; the sweep exists to exercise every
configuration end to end.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbone import PatchConfig
from .data import LabeledSample
from .errors import ConfigError
from .evaluation import evaluate
from .reporting import render_table_heatmap, text_table, write_csv, write_json
from .trainer import TrainConfig, build_model, strip, train

AXIS_ALIASES = {
    "a": "head-kind", "b": "kd-baselines", "c": "placement-3dsim",
    "d": "map-variant", "e": "classifier-3dsim", "f": "placement-2dsim",
    "kd": "kd-baselines",
}
AXES = ("head-kind", "kd-baselines", "placement-3dsim", "map-variant",
        "classifier-3dsim", "placement-2dsim")


@dataclass
class AblationTable:
    axis: str
    row_labels: list[str]
    col_labels: list[str]
    values: np.ndarray  # (rows, cols) top-1 scores

    def rows(self) -> list[list]:
        out = []
        for label, row in zip(self.row_labels, self.values):
            out.append([label] + [f"{v:.4f}" for v in row])
        return out


def canonical_axis(axis: str) -> str:
    axis = AXIS_ALIASES.get(axis.lower(), axis.lower())
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; one of {AXES} "
                          f"(aliases {sorted(AXIS_ALIASES)})")
    return axis


def _positions(depth: int) -> tuple[int, int, int]:
    """First, middle, last layer of the desk-scale backbone."""
    return 1, max(1, depth // 2), depth


def _run_cell(cfg: TrainConfig, patch_cfg: PatchConfig,
              train_samples, eval_samples, provider, num_joints) -> float:
    provider_dim = provider.feature_dim if cfg.uses_provider else None
    joints = num_joints if cfg.uses_maps else None
    model = build_model(patch_cfg, cfg, num_joints=joints,
                        provider_dim=provider_dim)
    train(model, train_samples, provider=provider)
    report, _ = evaluate(strip(model), eval_samples, patch_cfg.num_classes)
    return report.top1


def run_ablation(axis: str, train_samples: list[LabeledSample],
                 eval_samples: list[LabeledSample], patch_cfg: PatchConfig,
                 base_cfg: TrainConfig, provider,
                 num_joints: int) -> AblationTable:
    axis = canonical_axis(axis)
    first, mid, last = _positions(patch_cfg.depth)
    map_only = replace(base_cfg, align_layers=(), kd_baseline="none")
    align_only = replace(base_cfg, map_layers=(), kd_baseline="none")

    def cell(cfg):
        return _run_cell(cfg, patch_cfg, train_samples, eval_samples,
                         provider, num_joints)

    if axis == "head-kind":
        kinds = ["fc", "mlp", "transformer"]
        rows = ["map-head", "align-head"]
        values = np.array([
            [cell(replace(map_only, map_head_kind=k)) for k in kinds],
            [cell(replace(align_only, align_head_kind=k)) for k in kinds],
        ])
        return AblationTable(axis, rows, kinds, values)

    if axis == "kd-baselines":
        rows = ["baseline", "fd-class", "fd-distill", "ld-class", "ld-distill",
                "align-head"]
        configs = [
            replace(base_cfg, map_layers=(), align_layers=(), kd_baseline="none"),
            replace(base_cfg, map_layers=(), align_layers=(),
                    kd_baseline="fd-class"),
            replace(base_cfg, map_layers=(), align_layers=(),
                    kd_baseline="fd-distill"),
            replace(base_cfg, map_layers=(), align_layers=(),
                    kd_baseline="ld-class"),
            replace(base_cfg, map_layers=(), align_layers=(),
                    kd_baseline="ld-distill"),
            align_only,
        ]
        values = np.array([[cell(c)] for c in configs])
        return AblationTable(axis, rows, ["top1"], values)

    if axis == "placement-3dsim":
        levels = ["global", "local", "both"]
        placements = [(first,), (mid,), (last,), (first, mid, last)]
        cols = [",".join(str(p) for p in placement) for placement in placements]
        values = np.array([
            [cell(replace(align_only, align_level=level,
                          align_layers=placement))
             for placement in placements]
            for level in levels
        ])
        return AblationTable(axis, levels, cols, values)

    if axis == "map-variant":
        variants = ["full", "flat", "depth"]
        values = np.array([[cell(replace(map_only, map_variant=v))]
                           for v in variants])
        return AblationTable(axis, variants, ["top1"], values)

    if axis == "classifier-3dsim":
        levels = ["global", "local"]
        values = np.array([
            [cell(replace(align_only, align_level=level, with_classifier=flag))
             for flag in (True, False)]
            for level in levels
        ])
        return AblationTable(axis, levels, ["with-classifier", "without"], values)

    # placement-2dsim
    placements = [(first,), (mid,), (last,), (first, mid), (first, last)]
    cols = [",".join(str(p) for p in placement) for placement in placements]
    values = np.array([[cell(replace(map_only, map_layers=placement))
                        for placement in placements]])
    return AblationTable(axis, ["top1"], cols, values)


def write_ablation(table: AblationTable, out_dir) -> dict[str, Path]:
    """CSV, aligned text, JSON, and a heatmap figure for one sweep."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = f"ablation_{table.axis}"
    header = [table.axis] + table.col_labels
    paths = {
        "csv": write_csv(out_dir / f"{name}.csv", header, table.rows()),
        "json": write_json(out_dir / f"{name}.json", {
            "axis": table.axis, "rows": table.row_labels,
            "cols": table.col_labels, "values": table.values.tolist(),
        }),
        "png": render_table_heatmap(table.row_labels, table.col_labels,
                                    table.values, out_dir / f"{name}.png",
                                    title=table.axis),
    }
    txt = out_dir / f"{name}.txt"
    txt.write_text(text_table(header, table.rows()))
    paths["txt"] = txt
    return paths

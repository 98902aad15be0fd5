"""Ablation grids over fusion weights, timesteps, and depth sources.

Each grid cell is trained from scratch over a list of seeds and scored on
the test split; cells aggregate to mean and standard deviation.  A failed
run is recorded and the grid moves on.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import ConfigError
from .train import TrainConfig, train, evaluate

__all__ = ["GRID_NAMES", "grid_cells", "run_grid", "rows_to_csv", "CellResult"]

GRID_NAMES = ("weights", "timestep", "depth-source")

MANUAL_WEIGHT_PAIRS = ((0.6, 0.4), (0.8, 0.2), (0.9, 0.1), (0.95, 0.05),
                       (0.99, 0.01), (1.0, 0.0))
TIMESTEP_TAPS = (0, 50, 100, 200)


def grid_cells(grid: str, base: TrainConfig) -> list:
    """(cell_name, TrainConfig) pairs for one grid."""
    if grid == "weights":
        cells = [(f"manual_{wr:g}:{wp:g}",
                  replace(base, fusion_mode="manual", w_rgb=wr, w_pd=wp))
                 for wr, wp in MANUAL_WEIGHT_PAIRS]
        cells.append(("structured", replace(base, fusion_mode="structured")))
        return cells
    if grid == "timestep":
        return [(f"t{t}", replace(base, fusion_mode="structured", t=(t,)))
                for t in TIMESTEP_TAPS]
    if grid == "depth-source":
        cells = [("rgb_only", replace(base, fusion_mode="rgb_only",
                                      pd_source="none"))]
        for prof in ("sensor", "sharp", "smooth", "quantized"):
            cells.append((f"single_{prof}",
                          replace(base, fusion_mode="structured",
                                  pd_source="single", pd_profile=prof)))
        cells.append(("addition_of_3", replace(base, fusion_mode="structured",
                                               pd_source="addition")))
        cells.append(("pdam_of_3", replace(base, fusion_mode="structured",
                                           pd_source="pdam")))
        return cells
    raise ConfigError(f"unknown grid {grid!r}; use one of {GRID_NAMES}")


@dataclass
class CellResult:
    name: str
    pa: list
    ma: list
    miou: list
    failed_seeds: list

    def stats(self):
        def agg(xs):
            if not xs:
                return float("nan"), float("nan")
            arr = np.asarray(xs, dtype=np.float64)
            return float(arr.mean()), float(arr.std())
        return {"pa": agg(self.pa), "ma": agg(self.ma), "miou": agg(self.miou)}


def run_grid(grid: str, train_samples, test_samples, base: TrainConfig,
             seeds=(0, 1, 2, 3, 4), multiscale: bool = False,
             log=None) -> list:
    """Train every cell for every seed; returns a list of CellResult."""
    results = []
    for name, cfg in grid_cells(grid, base):
        cell = CellResult(name=name, pa=[], ma=[], miou=[], failed_seeds=[])
        for seed in seeds:
            run_cfg = replace(cfg, seed=int(seed))
            try:
                res = train(train_samples, test_samples, run_cfg)
                scores = evaluate(res.model, test_samples, res.pd_names,
                                  multiscale=multiscale)
            except (ConfigError, ArithmeticError, ValueError) as e:
                cell.failed_seeds.append(int(seed))
                if log:
                    log(f"cell {name} seed {seed} failed: {e}")
                continue
            cell.pa.append(scores.pixel_accuracy)
            cell.ma.append(scores.mean_accuracy)
            cell.miou.append(scores.mean_iou)
            if log:
                log(f"cell {name} seed {seed}: miou={scores.mean_iou:.4f}")
        results.append(cell)
    return results


def rows_to_csv(results) -> str:
    """One row per cell: means, stds, seed counts."""
    out = ["cell,pa_mean,pa_std,ma_mean,ma_std,miou_mean,miou_std,n_ok,n_failed"]
    for cell in results:
        st = cell.stats()
        out.append(",".join([
            cell.name,
            f"{st['pa'][0]:.4f}", f"{st['pa'][1]:.4f}",
            f"{st['ma'][0]:.4f}", f"{st['ma'][1]:.4f}",
            f"{st['miou'][0]:.4f}", f"{st['miou'][1]:.4f}",
            str(len(cell.pa)), str(len(cell.failed_seeds)),
        ]))
    return "\n".join(out) + "\n"

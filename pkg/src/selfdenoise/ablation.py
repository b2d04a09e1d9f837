"""Ablation grids over aux heads, noise type, spatial sampling, sigma, drop rate and placement.

Each preset is a list of (label, config override) cells in table order.
Every cell is trained once per seed and evaluated 1-shot and 5-shot on the
same episodes, so differences between cells are paired by seed.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import make_config, merge
from .data import FewShotDataset
from .fewshot import Z95
from .pipeline import evaluate_config, pretrain

Cell = Tuple[str, dict]


def _noise(kind="none", spatial=False, sigma=0.06, p_drop=0.1, per_block=(True, True, True)) -> dict:
    return {"kind": kind, "spatial": spatial, "sigma": sigma, "p_drop": p_drop, "per_block": list(per_block)}


def _cell(aux: bool, noise: dict, pool_mode: str = "max") -> dict:
    return {"model": {"aux": aux, "pool_mode": pool_mode}, "noise": noise}


def _aux_noise() -> List[Cell]:
    return [
        ("aux=no noise=none", _cell(False, _noise())),
        ("aux=yes noise=none", _cell(True, _noise())),
        ("aux=no noise=dropout", _cell(False, _noise("dropout"))),
        ("aux=no noise=gaussian", _cell(False, _noise("gaussian"))),
        ("aux=yes noise=gaussian", _cell(True, _noise("gaussian"))),
    ]


def _spatial() -> List[Cell]:
    return [
        ("none", _cell(True, _noise())),
        ("dropout spatial", _cell(True, _noise("dropout", True))),
        ("gaussian spatial", _cell(True, _noise("gaussian", True))),
        ("gaussian(avg) spatial", _cell(True, _noise("gaussian", True), "avg")),
        ("dropout non-spatial", _cell(True, _noise("dropout"))),
        ("gaussian non-spatial", _cell(True, _noise("gaussian"))),
        ("gaussian(avg) non-spatial", _cell(True, _noise("gaussian"), "avg")),
    ]


SIGMAS = (0.15, 0.1, 0.08, 0.06, 0.04)
DROP_PROBS = (0.2, 0.15, 0.1, 0.05, 0.02)
PLACEMENTS = ((), (1,), (2,), (3,), (1, 2), (1, 3), (2, 3), (1, 2, 3))


def _sigma() -> List[Cell]:
    return [(f"sigma={s:g}", _cell(True, _noise("gaussian", sigma=s))) for s in SIGMAS]


def _pdrop() -> List[Cell]:
    return [(f"p_drop={p:g}", _cell(True, _noise("dropout", p_drop=p))) for p in DROP_PROBS]


def _placement() -> List[Cell]:
    cells = []
    for where in PLACEMENTS:
        flags = [b in where for b in (1, 2, 3)]
        label = "G" + "".join(str(b) for b in where) if where else "none"
        noise = _noise("gaussian", per_block=flags) if where else _noise()
        cells.append((label, _cell(True, noise)))
    return cells


PRESETS = {
    "aux_noise": _aux_noise,
    "spatial": _spatial,
    "sigma": _sigma,
    "pdrop": _pdrop,
    "placement": _placement,
}


def preset_cells(name: str) -> List[Cell]:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown ablation preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class AblationRow:
    config: str
    seed: str  # a seed number, or "mean" for the aggregate row
    shot1_mean: float
    shot1_ci95: float
    shot5_mean: float
    shot5_ci95: float


FIELDS = ("config", "seed", "shot1_mean", "shot1_ci95", "shot5_mean", "shot5_ci95")


def run_cell(ds: FewShotDataset, label: str, override: dict, seed: int, base: Optional[dict] = None,
             episodes: int = 500, n_way: Optional[int] = None, shots: Sequence[int] = (1, 5)) -> AblationRow:
    cfg = make_config(merge(base or make_config(), override))
    cfg["train"]["seed"] = seed
    model, _ = pretrain(cfg, ds)
    stats = {}
    for k in shots:
        rep = evaluate_config(model, ds, cfg, k_shot=k, episodes=episodes, n_way=n_way, seed=seed)
        stats[k] = (rep.mean_acc, rep.ci95)
    s1 = stats.get(1, (math.nan, math.nan))
    s5 = stats.get(5, (math.nan, math.nan))
    return AblationRow(label, str(seed), s1[0], s1[1], s5[0], s5[1])


def _run_cell_args(args):
    return run_cell(*args[:4], **args[4])


def aggregate(rows: Sequence[AblationRow], label: str) -> AblationRow:
    """Mean over seeds; the interval is 1.96 s / sqrt(n) across the per-seed means."""
    def stat(values):
        v = np.array([x for x in values if not math.isnan(x)])
        if v.size == 0:
            return math.nan, math.nan
        ci = float(Z95 * v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return float(v.mean()), ci

    m1, c1 = stat([r.shot1_mean for r in rows])
    m5, c5 = stat([r.shot5_mean for r in rows])
    return AblationRow(label, "mean", m1, c1, m5, c5)


def run_cells(ds: FewShotDataset, cells: Sequence[Cell], seeds: Sequence[int] = (0, 1, 2),
              base: Optional[dict] = None, episodes: int = 500, n_way: Optional[int] = None,
              shots: Sequence[int] = (1, 5), jobs: int = 1) -> List[AblationRow]:
    """Per-seed rows for every cell followed by that cell's aggregate row."""
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    opts = {"base": base, "episodes": episodes, "n_way": n_way, "shots": tuple(shots)}
    work = [(ds, label, override, seed, opts) for label, override in cells for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, work))
    else:
        results = [_run_cell_args(w) for w in work]
    rows: List[AblationRow] = []
    for i, (label, _) in enumerate(cells):
        per_seed = results[i * len(seeds):(i + 1) * len(seeds)]
        rows.extend(per_seed)
        rows.append(aggregate(per_seed, label))
    return rows


def run_preset(ds: FewShotDataset, preset: str, **kwargs) -> List[AblationRow]:
    return run_cells(ds, preset_cells(preset), **kwargs)


def means(rows: Sequence[AblationRow], shot: int = 1) -> Dict[str, float]:
    """Aggregate mean accuracy per config label."""
    key = "shot1_mean" if shot == 1 else "shot5_mean"
    return {r.config: getattr(r, key) for r in rows if r.seed == "mean"}


def to_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        w.writerow([r.config, r.seed] + [f"{getattr(r, f):.6f}" for f in FIELDS[2:]])
    return buf.getvalue()

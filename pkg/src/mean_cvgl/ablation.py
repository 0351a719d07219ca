"""Dilation-rate ablation over DEG, DEC or both."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Sequence

from mean_cvgl.config import ConfigError, TrainConfig
from mean_cvgl.trainer import evaluate_both, fit

DILATION_GRID = (
    (1, 1, 1), (2, 2, 2), (3, 3, 3),
    (1, 1, 2), (1, 1, 3),
    (2, 2, 1), (2, 2, 3),
    (3, 3, 1), (3, 3, 2),
    (1, 2, 3),
)
TARGETS = ("deg", "dec", "both")


@dataclass
class AblationRow:
    dilations: tuple
    d2s_r1: float
    d2s_ap: float
    s2d_r1: float
    s2d_ap: float

    def as_dict(self) -> dict:
        return {"dilations": list(self.dilations), "d2s_R@1": self.d2s_r1, "d2s_AP": self.d2s_ap,
                "s2d_R@1": self.s2d_r1, "s2d_AP": self.s2d_ap}


def parse_grid(entries) -> List[tuple]:
    grid = []
    for e in entries:
        rates = tuple(int(x) for x in (e.split(",") if isinstance(e, str) else e))
        if len(rates) != 3 or any(r not in (1, 2, 3) for r in rates):
            raise ConfigError(f"invalid dilation triple {e!r}; expected three rates from {{1, 2, 3}}")
        grid.append(rates)
    if not grid:
        raise ConfigError("empty ablation grid")
    return grid


def run_ablation(config: TrainConfig, index, store, target: str = "deg",
                 grid: Sequence = DILATION_GRID, eval_index=None) -> List[AblationRow]:
    """Train one short run per dilation triple and collect R@1/AP in both directions.

    The module not under test keeps the rates from ``config``. Every run
    shares the same seed, so rows differ only by the dilation setting.
    """
    if target not in TARGETS:
        raise ConfigError(f"ablation target must be one of {TARGETS}")
    rows = []
    for rates in parse_grid(grid):
        cfg = copy.deepcopy(config)
        cfg.eval_every = 0
        if target in ("deg", "both"):
            cfg.model.deg_dilations = rates
        if target in ("dec", "both"):
            cfg.model.dec_dilations = rates
        result = fit(cfg, index, store)
        reps = evaluate_both(result.state.model, eval_index or index, store)
        d2s, s2d = reps["drone->satellite"], reps["satellite->drone"]
        rows.append(AblationRow(rates, d2s.recall_at[1], d2s.ap, s2d.recall_at[1], s2d.ap))
    return rows


def format_table(rows: Sequence[AblationRow], target: str = "deg") -> str:
    head = f"{'setting (' + target.upper() + ')':<16}{'D->S R@1':>10}{'D->S AP':>10}{'S->D R@1':>10}{'S->D AP':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        name = "x=" + ",".join(str(d) for d in r.dilations)
        lines.append(f"{name:<16}{100 * r.d2s_r1:>10.2f}{100 * r.d2s_ap:>10.2f}"
                     f"{100 * r.s2d_r1:>10.2f}{100 * r.s2d_ap:>10.2f}")
    return "\n".join(lines)

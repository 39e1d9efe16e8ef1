"""Ablation matrix: the QSM/DFC table, the convolution-design table and the depth grid.

Every row is a full train + evaluate run at the given TrainConfig. Rows that
share a network configuration (the plain baseline appears in two tables) are
trained once and reused.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from flowsr.autodiff.tensor import Tensor
from flowsr.data import load_split
from flowsr.errors import ConfigError
from flowsr.metrics import COLUMNS, MetricReport
from flowsr.model import NetworkConfig
from flowsr.report import format_csv, format_table, plot_ablation, plot_grid
from flowsr.train import TrainConfig, evaluate, train

# row name -> network overrides
TABLE2 = [
    ("Baseline", dict(conv_variant="none", qsm_enabled=False)),
    ("Baseline+QSM", dict(conv_variant="none", qsm_enabled=True)),
    ("Baseline+DFC", dict(conv_variant="dfc", qsm_enabled=False)),
    ("Ours", dict(conv_variant="dfc", qsm_enabled=True)),
]
TABLE3 = [
    ("Baseline", dict(conv_variant="none", qsm_enabled=False)),
    ("Baseline+NDC", dict(conv_variant="ndc", qsm_enabled=False)),
    ("Baseline+LDFC", dict(conv_variant="ldfc", qsm_enabled=False)),
    ("Baseline+RDFC", dict(conv_variant="rdfc", qsm_enabled=False)),
    ("Baseline+ADFC", dict(conv_variant="adfc", qsm_enabled=False)),
    ("Baseline+DFC", dict(conv_variant="dfc", qsm_enabled=False)),
]
DESK_DEPTHS = (1, 2)
FULL_DEPTHS = (4, 5, 6, 7)
TABLE4 = [
    (f"FEU{u}-FFB{b}", dict(feu_per_ffb=u, ffb_count=b, conv_variant="dfc", qsm_enabled=True))
    for u in DESK_DEPTHS
    for b in DESK_DEPTHS
]
TABLES = {"table2": TABLE2, "table3": TABLE3, "table4": TABLE4}
TITLES = {
    "table2": "Ablation: quaternion spatial modeling (QSM) and dynamic flow convolution (DFC)",
    "table3": "Ablation: design of the flow convolution (NDC = plain deformable convolution)",
    "table4": "Ablation: FEU x FFB depth, PSNR (dB)",
}


@dataclass
class AblationResult:
    reports: Dict[str, MetricReport] = field(default_factory=dict)  # row name -> EMA report
    tables: Dict[str, str] = field(default_factory=dict)  # table name -> plain text
    csv: Dict[str, str] = field(default_factory=dict)
    rows: Dict[str, List[tuple]] = field(default_factory=dict)
    files: List[Path] = field(default_factory=list)


def _key(cfg: NetworkConfig) -> Tuple:
    return tuple(sorted(cfg.to_dict().items()))


def table4_text(rows: Dict[str, MetricReport], depths: Sequence[int] = DESK_DEPTHS) -> Tuple[str, np.ndarray]:
    grid = np.array([[rows[f"FEU{u}-FFB{b}"].psnr for b in depths] for u in depths])
    header = (
        f"desk reduction: FEU, FFB in {{{', '.join(map(str, depths))}}} "
        f"(full grid {{{', '.join(map(str, FULL_DEPTHS))}}})"
    )
    body = [(f"FEU {u}",) + tuple(grid[i]) for i, u in enumerate(depths)]
    text = format_table(("FEU \\ FFB",) + tuple(f"FFB {b}" for b in depths), body, title=f"{TITLES['table4']}\n{header}")
    return text, grid


def run_ablation(
    tables: Sequence[str],
    tcfg: TrainConfig,
    base: NetworkConfig,
    data_root,
    out_dir,
    variants: Optional[Sequence[str]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> AblationResult:
    """Train and evaluate every needed row, then write tables, CSVs and bar charts."""
    unknown = [t for t in tables if t not in TABLES]
    if unknown:
        raise ConfigError(f"unknown ablation table(s) {unknown}; choose from {sorted(TABLES)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test = load_split(data_root, "test", base.scale)
    if tcfg.eval_limit:
        test = test[: tcfg.eval_limit]
    result = AblationResult()
    cache: Dict[Tuple, MetricReport] = {}

    for table in tables:
        rows = [(n, o) for n, o in TABLES[table] if variants is None or n in variants]
        if not rows:
            continue
        for name, overrides in rows:
            cfg = NetworkConfig.from_dict({**base.to_dict(), **overrides})
            key = _key(cfg)
            if key not in cache:
                run_dir = out_dir / "runs" / name
                if log is not None:
                    log(f"ablate: training {name} ({cfg.conv_variant}, qsm {'on' if cfg.qsm_enabled else 'off'}, "
                        f"{cfg.feu_per_ffb}x{cfg.ffb_count})")
                res = train(tcfg, cfg, data_root, out_dir=run_dir)
                ema = {k: Tensor(v) for k, v in res.ema.items()}
                cache[key], _ = evaluate(test, "model", ema, cfg, label=name)
                if log is not None:
                    log(f"ablate: {name} psnr {cache[key].psnr:.4f} in {res.seconds:.0f}s")
            result.reports[name] = cache[key]

        table_rows = [(n,) + result.reports[n].means() for n, _ in rows]
        result.rows[table] = table_rows
        if table == "table4" and variants is None:
            text, grid = table4_text(result.reports)
            result.files.append(plot_grid(grid, DESK_DEPTHS, DESK_DEPTHS, out_dir / f"{table}.png", TITLES[table]))
        else:
            text = format_table(("Methods",) + COLUMNS, table_rows, title=TITLES[table])
            result.files.append(plot_ablation(table_rows, out_dir / f"{table}.png", TITLES[table]))
        result.tables[table] = text
        result.csv[table] = format_csv(("Methods",) + COLUMNS, table_rows)
        (out_dir / f"{table}.txt").write_text(text)
        (out_dir / f"{table}.csv").write_text(result.csv[table])
        result.files += [out_dir / f"{table}.txt", out_dir / f"{table}.csv"]
    return result

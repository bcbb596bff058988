"""Experiment sweeps built from repeated pipeline runs."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError
from .pipeline import RunConfig, RunResult, run

ROBUSTNESS_AXES = {
    "latency": "latency_ms",
    "pos_std": "pos_std",
    "rot_std": "rot_std",
    "drop_prob": "token_drop_prob",
}
LATENCY_SET_MS = (0.0, 100.0, 200.0, 300.0, 400.0, 500.0)
DEFAULT_THRESHOLDS = (0.0, 1e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1, 0.5, 1.0)


def _ap_columns(result: RunResult) -> dict:
    agg = result.aggregates()
    out = {"ap05": agg["overall"]["ap_05"], "ap07": agg["overall"]["ap_07"]}
    for name in ("short", "middle", "long"):
        out[f"{name}_ap05"] = agg[name]["ap_05"]
        out[f"{name}_ap07"] = agg[name]["ap_07"]
    return out


def write_table(rows: list[dict], path: str | Path) -> None:
    """CSV with the column order of the first row; None becomes an empty field."""
    if not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        cols = list(rows[0])
        writer.writerow(cols)
        for r in rows:
            writer.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])


def _child(config: RunConfig, out: Path | None, name: str, **changes) -> RunConfig:
    return replace(config, out_dir=None if out is None else out / name, **changes)


def sweep_bandwidth(config: RunConfig, thresholds=DEFAULT_THRESHOLDS, out_dir: str | Path | None = None) -> list[dict]:
    """Dense baseline first, then one STT run per threshold (ascending), all on the same seed.

    Each row carries the mean transmitted cells per frame, the share of
    dense cells, the compression ratio (dense / transmitted, None when
    nothing was sent), mean log2-MB volume and mean AP.
    """
    thresholds = sorted(float(t) for t in thresholds)
    if len(thresholds) < 2:
        raise ConfigError("a bandwidth sweep needs at least two thresholds")
    out = None if out_dir is None else Path(out_dir)
    dense = run(_child(config, out, "dense", mode="dense-baseline"))
    rows = [_bandwidth_row("dense", dense, dense)]
    for thr in thresholds:
        result = run(_child(config, out, f"stt_{thr:g}", mode="stt", stt=replace(config.stt, threshold=thr)))
        rows.append(_bandwidth_row(thr, result, dense))
    if out is not None:
        write_table(rows, out / "tradeoff.csv")
    return rows


def _bandwidth_row(threshold, result: RunResult, dense: RunResult) -> dict:
    fraction = result.total_tokens / dense.total_tokens if dense.total_tokens else None
    return {
        "threshold": threshold,
        "mean_tokens": result.mean_tokens,
        "dense_fraction": fraction,
        "compression": (1.0 / fraction) if fraction else None,
        "mean_comm_log2mb": result.mean_comm_log2mb,
        "total_bytes": result.total_bytes,
        **_ap_columns(result),
    }


def sweep_robustness(config: RunConfig, axis: str, values, out_dir: str | Path | None = None) -> list[dict]:
    """One run per perturbation value with every other setting fixed."""
    if axis not in ROBUSTNESS_AXES:
        raise ConfigError(f"axis must be one of {sorted(ROBUSTNESS_AXES)}, got {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("robustness sweep needs at least one value")
    out = None if out_dir is None else Path(out_dir)
    rows = []
    for v in values:
        noise = replace(config.noise, **{ROBUSTNESS_AXES[axis]: float(v)})
        result = run(_child(config, out, f"{axis}_{float(v):g}", noise=noise))
        rows.append({"axis": axis, "value": float(v), "mean_tokens": result.mean_tokens,
                     "total_bytes": result.total_bytes, **_ap_columns(result)})
    if out is not None:
        write_table(rows, out / f"robustness_{axis}.csv")
    return rows


def ablation(config: RunConfig, components=("AT", "temporal"), out_dir: str | Path | None = None) -> list[dict]:
    """Grid over the listed components being on or off; spatial fusion is always on."""
    components = tuple(components)
    unknown = set(components) - {"AT", "temporal"}
    if unknown:
        raise ConfigError(f"unknown ablation components {sorted(unknown)}")
    if config.mode not in ("stt", "dense-baseline"):
        raise ConfigError("ablation needs a fusing mode (stt or dense-baseline)")
    out = None if out_dir is None else Path(out_dir)
    settings = [{}]
    for comp in components:
        settings = [{**s, comp: flag} for s in settings for flag in (False, True)]
    rows = []
    for s in settings:
        use_at = s.get("AT", config.use_at)
        temporal = s.get("temporal", config.temporal)
        name = f"at{int(use_at)}_temporal{int(temporal)}"
        result = run(_child(config, out, name, use_at=use_at, temporal=temporal))
        rows.append({"AT": use_at, "temporal": temporal,
                     "max_fusion_inputs": max((r.fusion_inputs for r in result.rows), default=0),
                     **_ap_columns(result)})
    if out is not None:
        write_table(rows, out / "ablation.csv")
    return rows

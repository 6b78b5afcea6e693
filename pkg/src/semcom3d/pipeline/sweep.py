"""Parameter sweeps over SNR, CSI estimator or keep rate, written as one CSV plus optional plots."""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from ..errors import InvalidArgumentError
from .config import RunConfig, coerce
from .link import Transmitter, build_estimator, prepare, run_link, stage, write_rows

logger = logging.getLogger(__name__)

AXES = {"snr": "snr_db", "estimator": "estimator", "keep_rate": "keep_rate"}


def _variant(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "snr":
        return cfg.replace(snr_db=list(value))
    if axis == "keep_rate":
        # a keep rate only means something for the masked (student) path
        return cfg.replace(keep_rate=float(value), codec_mode="student")
    return cfg.replace(estimator=str(value))


def sweep(cfg: RunConfig, axis: str, values=None, tx: Transmitter | None = None, plot: bool = True,
          csv_name: str | None = None):
    """Run every axis value and write ``sweep_<axis>.csv`` (and PNG plots) to the output directory.

    For the snr axis ``values`` replaces the SNR list (default: the config's);
    for the other axes every value runs over the config's full SNR list.
    Returns ``(rows, csv_path, plot_paths)``.
    """
    if axis not in AXES:
        raise InvalidArgumentError(f"unknown sweep axis {axis!r}; expected one of {tuple(AXES)}")
    if values is None:
        values = cfg.snr_db if axis == "snr" else [getattr(cfg, AXES[axis])]
    values = list(values)
    if not values:
        raise InvalidArgumentError(f"empty value list for sweep axis {axis!r}")
    if axis == "snr":
        variants = [_variant(cfg, axis, [float(v) for v in values])]
    else:
        variants = [_variant(cfg, axis, coerce(AXES[axis], v)) for v in values]
    for v in variants:
        v.validate()
    tx = tx or prepare(variants[0])
    rows = []
    for v in variants:
        vtx = tx
        if axis == "estimator":
            with stage("train-gdce", v.config_hash()):
                prior, gdce, pilots = build_estimator(v, tx.pilots)
            vtx = dataclasses.replace(tx, prior=prior, gdce=gdce, pilots=pilots)
        if axis == "keep_rate":
            tx.codec.cfg.keep_rate = v.keep_rate
        rows.extend(run_link(v, vtx).rows)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / (csv_name or f"sweep_{axis}.csv")
    write_rows(rows, csv_path)
    plots = plot_rows(rows, axis, out) if plot else []
    return rows, csv_path, plots


def summarize(rows, key: str = "psnr_db", by: str = "snr_db"):
    """Mean and standard error of ``key`` per value of ``by``, pooling seeds and held-out views.

    Per-view values are used when present so one seed still yields an error bar.
    """
    groups: dict = {}
    for r in rows:
        samples = [v[key] for v in r["views"]] if r.get("views") and key in r["views"][0] else [r[key]]
        groups.setdefault(r[by], []).extend(samples)
    out = {}
    for k, vals in groups.items():
        a = np.asarray(vals, dtype=float)
        se = float(a.std(ddof=1) / np.sqrt(a.size)) if a.size > 1 else 0.0
        out[k] = (float(a.mean()), se)
    return out


def is_monotone(summary: dict) -> bool:
    """Non-decreasing in the sorted key within one standard error of each neighbour pair."""
    keys = sorted(summary)
    for a, b in zip(keys, keys[1:]):
        (ma, sa), (mb, sb) = summary[a], summary[b]
        if mb < ma - max(sa, sb):
            return False
    return True


def plot_rows(rows, axis: str, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    group_key = {"snr": None, "estimator": "estimator", "keep_rate": "keep_rate"}[axis]
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[group_key] if group_key else "all", []).append(r)
    metrics = [("psnr_db", "PSNR (dB)"), ("ssim", "SSIM")]
    if axis == "estimator":
        metrics.append(("nmse_db", "NMSE (dB)"))
    for key, label in metrics:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, grp in groups.items():
            valid = [r for r in grp if r.get(key) is not None]
            if not valid:
                continue
            s = summarize(valid, key)
            xs = sorted(s)
            ax.errorbar(xs, [s[x][0] for x in xs], yerr=[s[x][1] for x in xs], marker="o", capsize=3,
                        label=str(name))
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(label)
        if len(groups) > 1:
            ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        p = out / f"sweep_{axis}_{key}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths

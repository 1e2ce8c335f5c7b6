"""Parameter sweeps over episodes and plot-ready reports.

Episodes are independent functions of their seed, so a sweep can fan
them out to worker processes; results are always returned in seed order,
which keeps serial and parallel runs byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .config import ClusteredChannelParams, ScenarioConfig
from .errors import InvalidArgument
from .harness import dft_pool, run_episode, summarize
from .network import Xbm, checkpoint_bytes, checkpoint_from_bytes

logger = logging.getLogger(__name__)

AXES = ("L_max", "N_CSI_U", "B_g_L_csi", "geometry", "environment")
ENVIRONMENTS = ("A", "B")
REPORT_SCHEMA = "xbeam-report/1"
ROW_FIELDS = ["point", "episode", "seed", "source", "env", "nx", "ny", "L_max", "N_CSI",
              "B_g", "L_csi", "U", "U_a", "ssb_gap_db", "csi_gap_db", "snr_db", "sse", "esse",
              "overhead_res"]
METRICS = ("ssb_gap_db", "csi_gap_db", "snr_db", "sse", "esse")


@dataclass(frozen=True)
class SweepPoint:
    label: str
    cfg: ScenarioConfig
    ch: ClusteredChannelParams
    env: str = "A"


def environment(ch: ClusteredChannelParams, name: str) -> ClusteredChannelParams:
    if name == "A":
        return ch
    if name == "B":
        return ch.shifted()
    raise InvalidArgument(f"unknown environment {name!r}; expected one of {ENVIRONMENTS}")


def _clamp_n_csi(cfg: ScenarioConfig, n_csi: int, source: str) -> ScenarioConfig:
    pool = dft_pool(cfg).size if source == "dft" else cfg.N_CSI_pool
    if n_csi > pool:
        msg = f"N_CSI={n_csi} exceeds the CSI-RS pool of {pool} beams; clamped to {pool}"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        n_csi = pool
    return cfg.with_(N_CSI=n_csi, N_CSI_pool=max(cfg.N_CSI_pool, n_csi))


def sweep_points(cfg: ScenarioConfig, ch: ClusteredChannelParams, axis: str, values,
                 source: str = "dft") -> list[SweepPoint]:
    """Expand an axis and its values into concrete configurations.

    ``L_max`` and ``geometry`` take integers (the array is square for
    ``geometry``), ``N_CSI_U`` and ``B_g_L_csi`` take pairs and
    ``environment`` takes ``"A"`` or ``"B"``.
    """
    if axis not in AXES:
        raise InvalidArgument(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    points = []
    for v in values:
        if axis == "L_max":
            c, label = cfg.with_(L_max=int(v)), f"L_max={int(v)}"
            points.append(SweepPoint(label, c, ch))
        elif axis == "N_CSI_U":
            n_csi, U = (int(x) for x in v)
            c = _clamp_n_csi(cfg, n_csi, source)
            c = c.with_(U_min=U, U_max=U, user_pool=max(cfg.user_pool, U))
            points.append(SweepPoint(f"N_CSI={c.N_CSI},U={U}", c, ch))
        elif axis == "B_g_L_csi":
            b_g, l_csi = (int(x) for x in v)
            points.append(SweepPoint(f"B_g={b_g},L_csi={l_csi}",
                                     cfg.with_(B_g=b_g, L_csi=l_csi), ch))
        elif axis == "geometry":
            n = int(v)
            points.append(SweepPoint(f"nx=ny={n}", cfg.with_(nx_phys=n, ny_phys=n), ch))
        else:
            points.append(SweepPoint(f"env={v}", cfg, environment(ch, str(v)), str(v)))
    return points


# --------------------------------------------------------------------------
# episode execution
# --------------------------------------------------------------------------

_WORKER_MODEL: Xbm | None = None


def _init_worker(model_bytes: bytes | None, cfg: ScenarioConfig):
    import torch

    global _WORKER_MODEL
    torch.set_num_threads(1)
    _WORKER_MODEL = None if model_bytes is None else checkpoint_from_bytes(model_bytes, cfg=cfg)


def _episode_row(args) -> dict:
    cfg, ch, source, seed, schedule, heldout = args
    res = run_episode(cfg, ch, source, seed, _WORKER_MODEL, heldout=heldout, schedule=schedule)
    return res.row()


def run_episodes(cfg: ScenarioConfig, ch: ClusteredChannelParams, source: str, seeds,
                 model: Xbm | None = None, workers: int = 1, schedule: bool = True,
                 heldout: bool = True) -> list[dict]:
    """Metric rows for the given episode seeds, in seed order."""
    global _WORKER_MODEL
    seeds = [int(s) for s in seeds]
    jobs = [(cfg, ch, source, s, schedule, heldout) for s in seeds]
    if model is not None and model.cfg != cfg:
        model = checkpoint_from_bytes(checkpoint_bytes(model), cfg=cfg)
    if workers <= 1 or len(seeds) <= 1:
        saved, _WORKER_MODEL = _WORKER_MODEL, model
        try:
            return [_episode_row(j) for j in jobs]
        finally:
            _WORKER_MODEL = saved
    blob = None if model is None else checkpoint_bytes(model)
    chunk = max(1, len(jobs) // (4 * workers))
    with ProcessPoolExecutor(workers, mp_context=get_context("spawn"), initializer=_init_worker,
                             initargs=(blob, cfg)) as pool:
        return list(pool.map(_episode_row, jobs, chunksize=chunk))


def sweep(cfg: ScenarioConfig, ch: ClusteredChannelParams, axis: str, values,
          source: str = "dft", model: Xbm | None = None, n_episodes: int = 200,
          seed: int = 0, workers: int = 1) -> tuple[list[dict], list[dict]]:
    """Run ``n_episodes`` episodes per point; returns ``(rows, per-point summaries)``.

    Every point uses the same episode seeds ``seed .. seed + n_episodes - 1``
    so points are compared on paired user draws.
    """
    rows, summaries = [], []
    seeds = range(seed, seed + n_episodes)
    for point in sweep_points(cfg, ch, axis, values, source):
        logger.info("sweep point %s (%d episodes)", point.label, n_episodes)
        out = run_episodes(point.cfg, point.ch, source, seeds, model, workers)
        c = point.cfg
        for i, r in enumerate(out):
            rows.append({"point": point.label, "episode": i, "env": point.env,
                         "nx": c.nx_phys, "ny": c.ny_phys, "L_max": c.L_max, "N_CSI": c.N_CSI,
                         "B_g": c.B_g, "L_csi": c.L_csi, **r})
        summaries.append(point_summary(point.label, out))
    return rows, summaries


def point_summary(label: str, rows: list[dict]) -> dict:
    return {"point": label, **{m: summarize([r[m] for r in rows]) for m in METRICS}}


# --------------------------------------------------------------------------
# CSV and reports
# --------------------------------------------------------------------------

def write_rows(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in ROW_FIELDS})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_rows(path) -> list[dict]:
    """Parse a metrics CSV written by :func:`write_rows`."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InvalidArgument(f"{path} is empty")
        missing = set(METRICS) - set(reader.fieldnames)
        if missing:
            raise InvalidArgument(f"{path} lacks columns {sorted(missing)}")
        rows = []
        for line in reader:
            row = dict(line)
            try:
                for m in METRICS:
                    row[m] = float(row[m])
            except (TypeError, ValueError) as exc:
                raise InvalidArgument(f"{path}: malformed value ({exc})") from exc
            rows.append(row)
    return rows


def cdf_points(values) -> tuple[list[float], list[float]]:
    """Empirical CDF as ``(x, F)``: distinct sorted values and the share at or below each."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return [], []
    x, counts = np.unique(v, return_counts=True)
    return x.tolist(), (np.cumsum(counts) / v.size).tolist()


def heatmap(rows: list[dict], metric: str, row_key: str = "N_CSI", col_key: str = "U"):
    """Mean of ``metric`` on the grid spanned by two row fields."""
    rk = sorted({int(r[row_key]) for r in rows})
    ck = sorted({int(r[col_key]) for r in rows})
    grid = np.full((len(rk), len(ck)), np.nan)
    for i, a in enumerate(rk):
        for j, b in enumerate(ck):
            vals = [float(r[metric]) for r in rows
                    if int(r[row_key]) == a and int(r[col_key]) == b]
            if vals:
                grid[i, j] = float(np.mean(vals))
    return {"rows": rk, "cols": ck, "row_key": row_key, "col_key": col_key,
            "values": [[None if np.isnan(x) else x for x in line] for line in grid]}


def build_report(rows: list[dict]) -> dict:
    """CDFs of every metric per (point, source) and N_CSI x U heatmaps."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(f"{r.get('point', '')}|{r.get('source', '')}", []).append(r)
    report = {"schema": REPORT_SCHEMA, "groups": []}
    for key in sorted(groups):
        g = groups[key]
        point, source = key.split("|", 1)
        entry = {"point": point, "source": source, "n": len(g), "cdf": {}, "summary": {}}
        for m in METRICS:
            x, f = cdf_points([r[m] for r in g])
            entry["cdf"][m] = {"x": x, "F": f}
            entry["summary"][m] = summarize([r[m] for r in g])
        report["groups"].append(entry)
    if rows and all(k in rows[0] and rows[0][k] != "" for k in ("N_CSI", "U")):
        report["heatmaps"] = {m: heatmap(rows, m) for m in ("ssb_gap_db", "csi_gap_db", "esse")}
    else:
        report["heatmaps"] = {}
    return report


CDF_FIELDS = ["point", "source", "metric", "x", "F"]


def write_report(rows: list[dict], out_dir) -> dict:
    """Write ``report.json`` and a long-format ``cdf.csv``; returns the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(rows)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    with open(out / "cdf.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CDF_FIELDS)
        for g in report["groups"]:
            for m, c in g["cdf"].items():
                for x, f in zip(c["x"], c["F"]):
                    w.writerow([g["point"], g["source"], m, repr(x), repr(f)])
    return report

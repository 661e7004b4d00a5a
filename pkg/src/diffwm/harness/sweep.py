"""Parameter sweeps with atomic CSV / JSON output."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import infotheory as it
from ..attack import DIFFUSION_MODES
from ..watermark import hex_to_bits
from .config import ExperimentConfig, build
from .runner import CSV_COLUMNS, TrialRecord, run_trials


class SweepError(RuntimeError):
    pass


def fmt(v) -> str:
    """Stable text form for CSV cells."""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def atomic_write(path, data: str | bytes):
    """Write to a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def grid_points(grid: dict) -> list[dict]:
    """Cartesian product in key order of ``grid``; the last key varies fastest."""
    if not grid:
        return [{}]
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def trials_csv(records: list[TrialRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        vals = r.csv_values()
        w.writerow([fmt(vals[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def soft_csv(points: list[tuple[int, list[TrialRecord]]]) -> str:
    """Sidecar with per-bit data for MI estimation.

    ``soft_i`` is the decoder logit of bit i on the attacked image and
    ``state_i`` the carrier projection of the noised state (nan for
    classical attacks).
    """
    B = max(r.B for _, recs in points for r in recs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", "trial_id", "B", "message"]
               + [f"soft_{i}" for i in range(B)] + [f"state_{i}" for i in range(B)])
    for p, recs in points:
        for r in recs:
            pad = [""] * (B - r.B)
            state = r.state_proj if r.state_proj is not None else np.full(r.B, np.nan)
            w.writerow([p, r.trial_id, r.B, r.message_hex]
                       + [fmt(float(x)) for x in r.soft] + pad
                       + [fmt(float(x)) for x in state] + pad)
    return buf.getvalue()


def read_soft_csv(path) -> dict[int, dict]:
    """Per-point arrays ``bits``, ``soft`` and ``state`` from a sidecar file."""
    out: dict[int, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            p, B = int(row["point"]), int(row["B"])
            d = out.setdefault(p, {"bits": [], "soft": [], "state": []})
            d["bits"].append(hex_to_bits(row["message"], B))
            d["soft"].append([float(row[f"soft_{i}"]) for i in range(B)])
            d["state"].append([float(row[f"state_{i}"]) for i in range(B)])
    return {p: {k: np.array(v) for k, v in d.items()} for p, d in out.items()}


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return math.nan, math.nan
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def summarize_point(cfg: ExperimentConfig, point: dict, records: list[TrialRecord]) -> dict:
    setup = build(cfg)
    n = len(records)
    s: dict = {"params": point, "n": n}
    for col in ("bit_acc", "decode_success", "psnr_db", "ssim", "snr_emp", "content_match"):
        m, se = _mean_se([float(getattr(r, col)) for r in records])
        s[col] = {"mean": _json_num(m), "stderr": _json_num(se)}
    s["snr_analytic"] = _json_num(records[0].snr_analytic)

    bits = np.stack([r.bits for r in records])
    soft = np.stack([r.soft for r in records])
    bins = cfg.mi.bins
    mi_out = it.mi_plugin_message(bits, soft, bins, label="I(M;D(I'))")
    s["mi_output_plugin"] = {"value": mi_out.value, "stderr": mi_out.stderr}
    if cfg.attack.mode in DIFFUSION_MODES:
        t = cfg.attack.resolved_t_start(setup.attack_sched)
        s["t_start"] = t
        state = np.stack([r.state_proj for r in records])
        mi_state = it.mi_plugin_message(bits, state, bins, label=f"I(M;X_{t})")
        s["mi_state_plugin"] = {"value": mi_state.value, "stderr": mi_state.stderr}
        dpi = it.dpi_report([mi_state, mi_out])
        s["dpi_pass"] = dpi.passed
        if setup.prior.K == 1:
            mi_a = it.mi_message_state_analytic(setup.key, setup.attack_sched, setup.prior, t).value
            bound = it.fano_success_upper(min(mi_a, setup.key.B), setup.key.B)
            p = s["decode_success"]["mean"]
            binom_se = math.sqrt(bound * (1 - bound) / n)
            s["mi_state_analytic"] = mi_a
            s["fano_success_upper"] = bound
            s["fano_pass"] = p <= bound + 3 * binom_se
    return s


@dataclass(frozen=True)
class SweepResult:
    csv_path: Path
    soft_path: Path
    summary_path: Path
    summary: dict
    records: list


def run_sweep(cfg: ExperimentConfig, grid: dict | None = None, out_dir=None,
              name: str | None = None) -> SweepResult:
    """Run every grid point for ``cfg.trials`` trials and write the outputs.

    Trial ids restart at 0 for each point, so points are paired on the same
    content, payload and noise seeds.  Nothing is written unless every point
    succeeds.
    """
    grid = cfg.sweep if grid is None else grid
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise SweepError(f"sweep parameter {k!r} needs a non-empty list of values")
    out_dir = Path(cfg.output.dir if out_dir is None else out_dir)
    name = cfg.output.name if name is None else name

    all_records: list[TrialRecord] = []
    per_point: list[tuple[int, list[TrialRecord]]] = []
    summaries = []
    for p, point in enumerate(grid_points(grid)):
        try:
            pcfg = cfg.with_overrides(point)
            recs = run_trials(pcfg)
            summaries.append(summarize_point(pcfg, point, recs))
        except Exception as e:
            raise SweepError(f"grid point {p} {point} failed: {e}") from e
        per_point.append((p, recs))
        all_records.extend(recs)

    summary = {"master_seed": cfg.master_seed, "trials": cfg.trials, "grid": grid,
               "points": summaries}
    csv_path = out_dir / f"{name}.csv"
    soft_path = out_dir / f"{name}.soft.csv"
    summary_path = out_dir / f"{name}.summary.json"
    atomic_write(csv_path, trials_csv(all_records))
    atomic_write(soft_path, soft_csv(per_point))
    atomic_write(summary_path, json.dumps(summary, indent=2) + "\n")
    return SweepResult(csv_path, soft_path, summary_path, summary, all_records)

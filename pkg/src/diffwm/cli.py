"""Command-line interface.

Exit codes: 0 success, 1 verification or run failure, 2 configuration or
usage error.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import infotheory as it
from . import watermark as wm
from .attack import MODES, AttackError, run_attack
from .codec import render
from .harness import calibrate as cal
from .harness.config import ConfigError, ExperimentConfig, build, from_dict, load_config
from .harness.plot import PlotError, plot
from .harness.seeding import derived_seed, trial_streams
from .harness.sweep import SweepError, atomic_write, read_soft_csv, run_sweep
from .harness.verify import FAULTS, verify
from .prior import sample_content

log = logging.getLogger("diffwm")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=d, help="master seed (u64), overrides the config")
    p.add_argument("--out", default=d, help="output file or directory")
    p.add_argument("--trials", type=int, default=d, help="number of trials, overrides the config")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="only print results")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffwm", description="Diffusion watermark-removal testbed")
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    cmd("embed", "sample content and payloads, write watermarked images (.npz)")
    p = cmd("attack", "attack images from an .npz written by embed")
    p.add_argument("--input", "--in", dest="input", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--t-start", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p = cmd("decode", "decode images in an .npz and score them against stored payloads")
    p.add_argument("--input", required=True)
    p = cmd("sweep", "run a parameter sweep and write CSV + summary JSON")
    p.add_argument("--grid", help="JSON object parameter -> list (default: config 'sweep')")
    p.add_argument("--name", help="output file stem")
    p = cmd("mi", "plug-in mutual information from a sweep's soft-decode sidecar")
    p.add_argument("--input", required=True, help="sweep CSV or its .soft.csv sidecar")
    p.add_argument("--bins", type=int, default=None)
    p = cmd("fano", "Fano upper bound on decode success")
    p.add_argument("--mi", type=float, required=True, help="I(M;Y) in bits")
    p.add_argument("--B", type=int, required=True, help="payload bits")
    p = cmd("verify", "run the invariant suite")
    p.add_argument("--only", nargs="*", help="restrict to these modules")
    p.add_argument("--fault", action="append", default=[], choices=FAULTS, help=argparse.SUPPRESS)
    p = cmd("plot", "SVG chart of a CSV column against another")
    p.add_argument("--input", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--group-by", default=None)
    p = cmd("export", "write images from an .npz as 8-bit grayscale PNGs")
    p.add_argument("--input", required=True)
    p.add_argument("--index", type=int, nargs="*", help="rows to export (default: all)")
    p = cmd("calibrate", "calibrate classical attack strengths and the reference weight")
    p.add_argument("--what", choices=("classical", "lambda", "all"), default="all")
    p.add_argument("--target-psnr", type=float, default=30.0)
    p.add_argument("--guided-config", help="config for the guided half of the lambda sweep")
    return ap


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    data = cfg.to_dict()
    if args.seed is not None:
        data["master_seed"] = args.seed
    if args.trials is not None:
        data["trials"] = args.trials
    return from_dict(data)


def _emit(obj):
    print(json.dumps(obj, indent=2))


def _load_npz(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input not found: {p}")
    with np.load(p) as f:
        return {k: f[k] for k in f.files}


def _save_npz(path, **arrays):
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(path, buf.getvalue())


def cmd_embed(args, cfg):
    setup = build(cfg)
    ids = np.arange(cfg.trials)
    seeds = np.array([derived_seed(cfg.master_seed, int(i)) for i in ids], dtype=np.uint64)
    streams = [trial_streams(int(s), cfg.attack.seed) for s in seeds]
    C, z = zip(*(sample_content(setup.prior, s[0]) for s in streams))
    bits = np.stack([wm.Message.random(setup.key.B, s[1]).bits for s in streams])
    images = setup.codec.to_image(wm.embed(np.stack(z), bits, setup.key))
    out = Path(args.out or "out/embed.npz")
    _save_npz(out, images=images, bits=bits, content=np.array(C), seeds=seeds, trial_ids=ids)
    _emit({"out": str(out), "n": int(ids.size), "messages": [wm.bits_to_hex(b) for b in bits[:5]]})
    return EXIT_OK


def cmd_attack(args, cfg):
    over = {k: v for k, v in (("mode", args.mode), ("t_start", args.t_start), ("gamma", args.gamma),
                              ("lam", args.lam)) if v is not None}
    if over:
        cfg = cfg.with_overrides(over)
    setup = build(cfg)
    data = _load_npz(args.input)
    rngs = [trial_streams(int(s), cfg.attack.seed)[2] for s in data["seeds"]]
    images, _ = run_attack(data["images"], cfg.attack, setup.attack_sched, setup.prior, setup.codec,
                           rngs, key=setup.key, rmap=setup.rmap)
    out = Path(args.out or "out/attacked.npz")
    _save_npz(out, **{**data, "images": images, "source": data["images"]})
    _emit({"out": str(out), "n": len(images), "mode": cfg.attack.mode})
    return EXIT_OK


def cmd_decode(args, cfg):
    setup = build(cfg)
    data = _load_npz(args.input)
    dec = wm.decode_bits(data["images"], setup.key, setup.codec)
    rows = [{"index": i, "decoded": wm.bits_to_hex(b)} for i, b in enumerate(dec)]
    res: dict = {"n": len(rows)}
    if "bits" in data:
        acc = (dec == data["bits"]).mean(axis=1)
        for r, a, ok in zip(rows, acc, (dec == data["bits"]).all(axis=1)):
            r["bit_acc"], r["decode_success"] = float(a), bool(ok)
        res["mean_bit_acc"] = float(acc.mean())
        res["decode_success_rate"] = float((dec == data["bits"]).all(axis=1).mean())
    res["rows"] = rows
    if args.out:
        atomic_write(args.out, json.dumps(res, indent=2) + "\n")
    _emit(res if not args.out else {k: v for k, v in res.items() if k != "rows"})
    return EXIT_OK


def cmd_sweep(args, cfg):
    grid = cfg.sweep
    if args.grid:
        try:
            grid = json.loads(args.grid)
        except json.JSONDecodeError as e:
            raise UsageError(f"--grid is not valid JSON: {e}") from None
        if not isinstance(grid, dict):
            raise UsageError("--grid must be a JSON object")
        cfg = from_dict({**cfg.to_dict(), "sweep": grid})
    res = run_sweep(cfg, grid, args.out, args.name)
    for p in res.summary["points"]:
        log.info("%s  bit_acc=%.4f  success=%.4f", p["params"], p["bit_acc"]["mean"],
                 p["decode_success"]["mean"])
    _emit({"csv": str(res.csv_path), "soft": str(res.soft_path), "summary": str(res.summary_path)})
    return EXIT_OK


def _soft_path(path: Path) -> Path:
    if path.name.endswith(".soft.csv"):
        return path
    return path.with_name(path.name[:-4] + ".soft.csv" if path.suffix == ".csv" else path.name + ".soft.csv")


def cmd_mi(args, cfg):
    path = _soft_path(Path(args.input))
    if not path.is_file():
        raise UsageError(f"soft-decode sidecar not found: {path}")
    bins = args.bins or cfg.mi.bins
    out = []
    for p, d in sorted(read_soft_csv(path).items()):
        e = it.mi_plugin_message(d["bits"], d["soft"], bins)
        row = {"point": p, "n": e.n, "output": {"total": e.value, "stderr": e.stderr,
                                               "per_bit": list(e.per_bit)}}
        if np.all(np.isfinite(d["state"])):
            s = it.mi_plugin_message(d["bits"], d["state"], bins)
            row["state"] = {"total": s.value, "stderr": s.stderr, "per_bit": list(s.per_bit)}
        out.append(row)
    res = {"bins": bins, "note": "plug-in through the decoder: a lower bound on I(M; image)",
           "points": out}
    if args.out:
        atomic_write(args.out, json.dumps(res, indent=2) + "\n")
    _emit(res)
    return EXIT_OK


def cmd_fano(args, cfg):
    try:
        val = it.fano_success_upper(args.mi, args.B)
    except it.InfoError as e:
        raise UsageError(str(e)) from None
    _emit({"mi": args.mi, "B": args.B, "success_upper": val})
    return EXIT_OK


def cmd_verify(args, cfg):
    rep = verify(faults=args.fault, only=args.only)
    for line in rep.lines():
        print(line)
    print(f"verify: {'PASS' if rep.passed else 'FAIL'} "
          f"({sum(c.passed for c in rep.checks)}/{len(rep.checks)} checks)")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_plot(args, cfg):
    out = plot(args.input, args.x, args.y, args.group_by, args.out)
    _emit({"svg": str(out)})
    return EXIT_OK


def cmd_export(args, cfg):
    from PIL import Image

    setup = build(cfg)
    if setup.rmap is None:
        raise UsageError(f"d={cfg.prior.d} is not a perfect square; nothing to render")
    data = _load_npz(args.input)
    images = data["images"]
    idx = args.index if args.index else range(len(images))
    out_dir = Path(args.out or "out/png")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in idx:
        if not 0 <= i < len(images):
            raise UsageError(f"index {i} out of range for {len(images)} images")
        grid = np.round(render(images[i], setup.rmap) * 255).astype(np.uint8)
        path = out_dir / f"image_{i:05d}.png"
        Image.fromarray(grid, mode="L").save(path)
        written.append(str(path))
    _emit({"written": written})
    return EXIT_OK


def cmd_calibrate(args, cfg):
    res = {}
    if args.what in ("classical", "all"):
        res["classical"] = cal.calibrate_classical(cfg, args.target_psnr)
    if args.what in ("lambda", "all"):
        guided = load_config(args.guided_config) if args.guided_config else cfg.with_overrides({"mode": "guided"})
        guided = from_dict({**guided.to_dict(), "trials": cfg.trials, "master_seed": cfg.master_seed})
        res["lambda"] = cal.calibrate_lambda(cfg.with_overrides({"mode": "unguided"}), guided)
    if args.out:
        atomic_write(args.out, json.dumps(res, indent=2) + "\n")
    _emit(res)
    return EXIT_OK


COMMANDS = {
    "embed": cmd_embed, "attack": cmd_attack, "decode": cmd_decode, "sweep": cmd_sweep,
    "mi": cmd_mi, "fano": cmd_fano, "verify": cmd_verify, "plot": cmd_plot,
    "export": cmd_export, "calibrate": cmd_calibrate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, AttackError, PlotError, wm.WatermarkError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SweepError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

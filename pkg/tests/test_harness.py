import csv
import json
import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from diffwm.harness import (CSV_COLUMNS, ConfigError, ExperimentConfig, derived_seed, from_dict,
                            load_config, run_sweep, run_trial, run_trials, splitmix64, verify)
from diffwm.harness import config as hc
from diffwm.harness.plot import PlotError, aggregate, plot
from diffwm.harness.seeding import trial_streams
from diffwm.harness.sweep import SweepError, read_soft_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def small(**over):
    data = {"trials": 12, "master_seed": 3, "attack": {"mode": "unguided", "t_start": 40}}
    data.update(over)
    return from_dict(data)


def test_minimal_config_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    c = load_config(p)
    assert (c.prior.d, c.watermark.B, c.prior.K, c.prior.sigma) == (64, 32, 4, 1.0)
    assert (c.schedule.kind, c.schedule.T) == ("linear", 1000)
    assert c.watermark.resolved_rho() == pytest.approx(2.5 * math.sqrt(32))


def test_b_larger_than_d_rejected():
    with pytest.raises(ConfigError, match="watermark.B"):
        from_dict({"prior": {"d": 16}, "watermark": {"B": 17}})


@pytest.mark.parametrize("data,frag", [
    ({"prior": {"dd": 3}}, "unknown key"),
    ({"sheduel": {}}, "unknown top-level"),
    ({"trials": 0}, "trials"),
    ({"attack": {"mode": "jpeg"}}, "attack"),
    ({"attack": {"t_start": 2000}}, "t_start"),
    ({"prior": {"d": 10}, "watermark": {"B": 4}, "attack": {"mode": "blur"}}, "perfect square"),
    ({"sweep": {"colour": [1]}}, "sweep.colour"),
    ({"schedule": {"kind": "cubic"}}, "schedule"),
])
def test_config_errors_name_the_field(data, frag):
    with pytest.raises(ConfigError, match=frag):
        from_dict(data)


def test_malformed_and_missing(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


@pytest.mark.parametrize("name", ["default", "guided", "classical_noise", "classical_blur",
                                  "classical_crop_resize"])
def test_round_trip(name):
    c = load_config(CONFIGS / f"{name}.json")
    again = hc.loads(c.dumps())
    assert again == c and again.dumps() == c.dumps()


def test_splitmix64_known_values():
    assert splitmix64(0) == 0
    # first output of the reference SplitMix64 generator seeded with 0
    assert splitmix64(0x9E3779B97F4A7C15) == 0xE220A8397B1DCDAF

    def reference(z):
        # independent formulation with Python big ints reduced at the end of each multiply
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 % 2 ** 64
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB % 2 ** 64
        return z ^ (z >> 31)

    for z in (1, 12345, 2 ** 63, 2 ** 64 - 1):
        assert splitmix64(z) == reference(z)
    assert derived_seed(7, 5) == splitmix64(7 ^ 5)


def test_streams_are_independent_of_attack_seed():
    a = trial_streams(99, 0)
    b = trial_streams(99, 5)
    assert np.array_equal(a[0].standard_normal(4), b[0].standard_normal(4))
    assert np.array_equal(a[1].integers(0, 2, 8), b[1].integers(0, 2, 8))
    assert not np.array_equal(a[2].standard_normal(4), b[2].standard_normal(4))


def test_run_trial_determinism():
    c = small()
    a, b = run_trial(c, 4), run_trial(c, 4)
    assert a.same_as(b) and a.seed == derived_seed(3, 4)
    assert np.array_equal(a.state_proj, b.state_proj)


def test_seed_isolation_under_permutation():
    c = small()
    fwd = run_trials(c, trial_ids=[0, 1, 2, 3, 4, 5])
    rev = run_trials(c, trial_ids=[5, 3, 1, 4, 0, 2])
    by_id = {r.trial_id: r for r in rev}
    assert all(r.same_as(by_id[r.trial_id]) for r in fwd)
    assert run_trial(c, 3).same_as(by_id[3])


def test_noise_zero_is_identity():
    # exact decoding needs the per-bit amplitude at 6 sigma
    recs = run_trials(small(attack={"mode": "noise", "noise_sigma": 0.0},
                            watermark={"rho": 6 * math.sqrt(32)}))
    assert all(r.bit_acc == 1.0 and r.psnr_db == 99.0 and r.decode_success for r in recs)
    assert all(r.t_start is None and r.state_proj is None for r in recs)


def test_guided_defaults_fail_to_decode():
    recs = run_trials(load_config(CONFIGS / "guided.json"))
    assert sum(not r.decode_success for r in recs) >= 499


def test_one_point_sweep_equals_trials(tmp_path):
    c = small()
    res = run_sweep(c, {"t_start": [40]}, out_dir=tmp_path, name="one")
    with open(res.csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    recs = run_trials(c)
    assert len(rows) == len(recs) == 12
    assert tuple(rows[0]) == CSV_COLUMNS
    for row, r in zip(rows, recs):
        assert int(row["trial_id"]) == r.trial_id and float(row["bit_acc"]) == r.bit_acc
        assert int(row["seed"]) == r.seed
    soft = read_soft_csv(res.soft_path)[0]
    assert np.array_equal(soft["bits"], np.stack([r.bits for r in recs]))
    assert np.array_equal(soft["soft"], np.stack([r.soft for r in recs]))


def test_sweep_byte_identical_and_monotone(tmp_path):
    c = small(trials=40)
    grid = {"t_start": [100, 500, 1000]}
    a = run_sweep(c, grid, out_dir=tmp_path / "a", name="s")
    b = run_sweep(c, grid, out_dir=tmp_path / "b", name="s")
    for f in ("csv_path", "soft_path", "summary_path"):
        assert getattr(a, f).read_bytes() == getattr(b, f).read_bytes()
    means = [p["bit_acc"]["mean"] for p in a.summary["points"]]
    ses = [p["bit_acc"]["stderr"] for p in a.summary["points"]]
    for i in range(2):
        assert means[i + 1] <= means[i] + 3 * math.hypot(ses[i], ses[i + 1])
    summary = json.loads(a.summary_path.read_text())
    assert [p["params"]["t_start"] for p in summary["points"]] == [100, 500, 1000]
    assert all("mi_output_plugin" in p and "dpi_pass" in p for p in summary["points"])


def test_failed_sweep_leaves_nothing(tmp_path):
    with pytest.raises(SweepError, match="grid point 1"):
        run_sweep(small(), {"t_start": [10, 5000]}, out_dir=tmp_path, name="bad")
    assert list(tmp_path.iterdir()) == []
    with pytest.raises(SweepError):
        run_sweep(small(), {"t_start": []}, out_dir=tmp_path)


def test_plot_outputs(tmp_path):
    c = small(trials=10)
    res = run_sweep(c, {"t_start": [10, 200, 1000]}, out_dir=tmp_path, name="p")
    svg = plot(res.csv_path, "t_start", "bit_acc", group_by="mode")
    root = ET.parse(svg).getroot()
    assert root.tag.endswith("svg")
    ns = "{http://www.w3.org/2000/svg}"
    assert len(root.findall(f"{ns}polyline")) == 1
    assert len(root.findall(f"{ns}circle")) == 3
    assert plot(res.csv_path, "t_start", "bit_acc", group_by="mode", out_path=tmp_path / "again.svg"
                ).read_bytes() == svg.read_bytes()


def test_plot_single_point(tmp_path):
    p = tmp_path / "one.csv"
    p.write_text("x,y\n1,0.5\n1,0.7\n")
    root = ET.parse(plot(p, "x", "y")).getroot()
    ns = "{http://www.w3.org/2000/svg}"
    assert root.findall(f"{ns}polyline") == [] and len(root.findall(f"{ns}circle")) == 1


def test_plot_errors(tmp_path):
    p = tmp_path / "one.csv"
    p.write_text("x,y\n1,a\n")
    with pytest.raises(PlotError, match="'z'"):
        plot(p, "x", "z")
    with pytest.raises(PlotError, match="numeric"):
        plot(p, "x", "y")


def test_aggregate_stats():
    rows = [{"x": "1", "y": "1"}, {"x": "1", "y": "3"}, {"x": "2", "y": "5"}]
    out = aggregate(rows, "x", "y", None)[""]
    assert out[0] == (1.0, 2.0, 1.0) and out[1] == (2.0, 5.0, 0.0)


def test_verify_subset_and_fault():
    ok = verify(only=("watermark",))
    assert ok.passed and len(ok.checks) == 4
    bad = verify(faults=("flip_grad_sign",), only=("watermark", "attack"))
    failed = {c.name for c in bad.checks if not c.passed}
    assert "wm_loss_grad vs finite differences" in failed
    assert not bad.passed


def test_verify_covers_every_module():
    from diffwm.harness.verify import CHECKS
    mods = {m for m, _, _ in CHECKS}
    assert mods == {"schedule", "prior", "watermark", "codec", "diffusion", "attack", "infotheory",
                    "metrics", "harness"}


def test_experiment_config_is_frozen():
    with pytest.raises(Exception):
        ExperimentConfig().trials = 3


def test_xor_mixing_replays_low_bit_seeds():
    from diffwm.harness.calibrate import HELDOUT_SEED, seed_sets_disjoint
    # masters 0 and 1 cover the same trial seeds over an even-sized range
    assert not seed_sets_disjoint(0, 1, 500)
    assert seed_sets_disjoint(0, HELDOUT_SEED, 500)


def test_calibration_is_held_out():
    from diffwm.harness.calibrate import seed_sets_disjoint
    calib = json.loads((CONFIGS / "calibration.json").read_text())
    evaluation = load_config(CONFIGS / "default.json")
    for part in (calib["classical"], calib["lambda"]):
        assert seed_sets_disjoint(part["master_seed"], evaluation.master_seed,
                                  max(part["trials"], evaluation.trials))

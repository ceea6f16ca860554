#!/usr/bin/env python3
"""Drive cli.main end to end in a scratch directory and check outputs and exit codes."""

from __future__ import annotations

import contextlib
import io
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import cli
from parsers.experiment_config import ExperimentConfig
from parsers.presets import load_preset, preset_payload
from services.analytic import make_mixture_pair
from services.reporting import read_json, read_samples_csv, write_samples_csv
from services.rng import stream

QUIET = ["--log-level", "WARNING"]


def run(*argv: str) -> int:
    return cli.main([*argv, *QUIET])


def check_preset_dump(workdir: Path) -> list[str]:
    errors: list[str] = []
    target = workdir / "dump" / "product2d.json"
    if run("preset-dump", "--preset", "product2d", "--out", str(target)) != 0:
        return ["preset-dump to a file did not exit 0"]
    if ExperimentConfig.from_dict(read_json(target)) != load_preset("product2d"):
        errors.append("dumped preset does not load back to the same config")
    buffer = io.StringIO()
    with contextlib.redirect_stdout(buffer):
        code = run("preset-dump", "--preset", "mixture2d")
    if code != 0 or json.loads(buffer.getvalue()) != ExperimentConfig.from_dict(preset_payload("mixture2d")).to_dict():
        errors.append("preset-dump to stdout did not print the preset payload")
    return errors


def check_sample(workdir: Path) -> list[str]:
    errors: list[str] = []
    payload = preset_payload("product2d")
    payload["sampler"] = {**payload["sampler"], "steps_per_t": 0}
    config_path = workdir / "no_steps.json"
    config_path.write_text(json.dumps(payload), encoding="utf-8")

    if run("sample", "--config", str(config_path), "--quick", "--seed", "4", "--out", str(workdir / "hmc0")) != 0:
        return ["sample with the config sampler did not exit 0"]
    if run("sample", "--config", str(config_path), "--method", "reverse", "--quick", "--seed", "4", "--out", str(workdir / "rev")) != 0:
        return ["sample --method reverse did not exit 0"]
    hmc0 = (workdir / "hmc0" / "samples.csv").read_bytes()
    rev = (workdir / "rev" / "samples.csv").read_bytes()
    if hmc0 != rev:
        errors.append("HMC with zero steps per level should write the reverse samples byte for byte")
    if read_samples_csv(workdir / "rev" / "samples.csv").shape != (cli.QUICK_SAMPLES, 2):
        errors.append("quick sample run should write QUICK_SAMPLES points")
    stats = read_json(workdir / "rev" / "stats.json")
    if stats["sampler"]["kind"] != "REVERSE" or stats["sampler"]["seed"] != 4 or "config_hash" not in stats:
        errors.append(f"stats.json is missing sampler provenance: {sorted(stats)}")
    if run("sample", "--config", str(config_path), "--method", "langevin", "--out", str(workdir / "bad")) != 2:
        errors.append("unknown --method should exit 2")
    return errors


def check_eval(workdir: Path) -> list[str]:
    errors: list[str] = []
    payload = preset_payload("mixture2d")
    config_path = workdir / "mixture.json"
    config_path.write_text(json.dumps(payload), encoding="utf-8")
    left, right = make_mixture_pair()
    points = np.concatenate([left.sample(200, stream(2)), right.sample(200, stream(3))])
    inside = write_samples_csv(points, workdir / "inside.csv")
    far = write_samples_csv(np.full((400, 2), 5.0), workdir / "far.csv")

    code = run("eval", "--config", str(config_path), "--quick", "--samples", str(inside), "--out", str(workdir / "eval_in"))
    if code != 0:
        errors.append(f"eval of in-bounds samples exited {code}")
    else:
        report = read_json(workdir / "eval_in" / "metrics.json")
        if list(report)[:4] != ["mmd", "ll", "ll_out_of_bounds", "ll_reliable"]:
            errors.append(f"metrics.json fields are {list(report)}")
        if len(report["metadata"].get("mode_coverage", [])) != 6:
            errors.append("mixture eval should report coverage of 6 modes")
    code = run("eval", "--config", str(config_path), "--quick", "--samples", str(far), "--out", str(workdir / "eval_far"))
    if code != 4:
        errors.append(f"eval of out-of-bounds samples exited {code}, expected 4")
    return errors


def check_verify(workdir: Path) -> list[str]:
    out = workdir / "verify"
    code = run("verify", "--quick", "--out", str(out))
    if code != 0:
        return [f"verify --quick exited {code}"]
    errors: list[str] = []
    report = read_json(out / "verification.json")
    if {c["claim"] for c in report["claims"]} != set(cli.EXPECTED_VERDICTS) - {"negation_gap"}:
        errors.append(f"verification.json claims {[c['claim'] for c in report['claims']]}")
    if not (out / "gap_table.csv").exists():
        errors.append("verify did not write gap_table.csv")
    return errors


def check_plot(workdir: Path) -> list[str]:
    errors: list[str] = []
    a = write_samples_csv(np.random.default_rng(0).uniform(-1.0, 1.0, size=(5, 2)), workdir / "a.csv")
    b = write_samples_csv(np.random.default_rng(1).uniform(-1.0, 1.0, size=(7, 2)), workdir / "b.csv")
    first, second = workdir / "plot1.svg", workdir / "plot2.svg"
    if run("plot", str(a), str(b), "--out", str(first)) != 0 or run("plot", str(a), str(b), "--out", str(second)) != 0:
        return ["plot did not exit 0"]
    svg = first.read_text(encoding="utf-8")
    if svg.count("<use") < 12:
        errors.append(f"SVG has {svg.count('<use')} marker elements for 12 points")
    if first.read_bytes() != second.read_bytes():
        errors.append("plotting the same inputs twice gave different SVG bytes")
    if run("plot", *[str(a)] * 5, "--out", str(workdir / "five.svg")) != 2:
        errors.append("plot with 5 inputs should exit 2")
    return errors


def check_exit_codes(workdir: Path) -> list[str]:
    errors: list[str] = []
    if run("sample", "--out", str(workdir / "none")) != 2:
        errors.append("sample without --config or --preset should exit 2")
    if run("sample", "--config", str(workdir / "missing.json")) != 2:
        errors.append("missing config file should exit 2")
    if run("sample", "--config", "x.json", "--preset", "product2d") != 2:
        errors.append("--config with --preset should exit 2")
    if run("train", "--preset", "product2d", "--out", str(workdir / "t")) != 2:
        errors.append("train on an all-analytic preset should exit 2")

    payload = {
        "name": "diverge",
        "schedule": {"kind": "linear", "T": 20},
        "distributions": {"ring": {"type": "named", "name": "ring"}},
        "models": {
            "ring": {
                "kind": "neural",
                "distribution": "ring",
                "checkpoint": str(workdir / "ckpt" / "ring.ckpt"),
                "architecture": {"hidden_dim": 16, "n_blocks": 1},
                "train": {"iterations": 5, "batch_size": 32, "learning_rate": 1e200, "log_every": 0},
            }
        },
        "tree": {"leaf": "ring"},
    }
    config_path = workdir / "diverge.json"
    config_path.write_text(json.dumps(payload), encoding="utf-8")
    code = run("train", "--config", str(config_path), "--out", str(workdir / "diverge"))
    if code != 3:
        errors.append(f"diverging training exited {code}, expected 3")
    if (workdir / "ckpt" / "ring.ckpt").exists():
        errors.append("an aborted training run should not write a checkpoint")
    return errors


def main() -> int:
    checks = {
        "preset-dump": check_preset_dump,
        "sample": check_sample,
        "eval": check_eval,
        "verify": check_verify,
        "plot": check_plot,
        "exit codes": check_exit_codes,
    }
    failures: list[str] = []
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        for name, check in checks.items():
            try:
                failures.extend(f"{name}: {err}" for err in check(workdir))
            except Exception as exc:  # pylint: disable=broad-except
                failures.append(f"{name}: raised {type(exc).__name__}: {exc}")

    if failures:
        print("CLI check FAILED")
        for err in failures:
            print(f"- {err}")
        return 1
    print("CLI check PASSED")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point.

Exit codes: 0 success, 1 run or configuration error, 2 verification failure.
The default output root comes from ``STFUSION_OUT`` (fallback ``results``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .checks import gradcheck
from .errors import StfusionError
from .experiments import DEFAULT_THRESHOLDS, LATENCY_SET_MS, ROBUSTNESS_AXES, ablation, sweep_bandwidth, sweep_robustness
from .pipeline import MODES, RunConfig, run
from .stt import SttConfig
from .world import NoiseSpec, ScenarioConfig, generate_scenario, load_scenario, occlusion_scenario, save_scenario

log = logging.getLogger("stfusion")

OUT_ENV = "STFUSION_OUT"
PRESETS = ("default", "sparse", "dense", "occluded", "occlusion")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _scenario(name: str, seed: int, frames: int | None):
    path = Path(name)
    if path.is_file():
        return load_scenario(path)
    if name == "occlusion":
        return occlusion_scenario(frames=frames or 5, seed=seed)
    if name in PRESETS:
        overrides = {} if frames is None else {"frames": frames}
        return generate_scenario(ScenarioConfig.preset(name, **overrides), seed)
    raise StfusionError(f"scenario {name!r} is neither a file nor one of the presets {PRESETS}")


def _out_root(args) -> Path:
    return Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "results"))


def _config(args, out_dir: Path | None) -> RunConfig:
    scenario = _scenario(args.scenario, args.seed, args.frames)
    noise = NoiseSpec(args.pos_std, args.rot_std, args.latency_ms, args.drop_prob, args.seed)
    return RunConfig(scenario, SttConfig(args.rho, args.threshold, args.tau), noise, args.mode,
                     mada_seed=args.seed, budget_bytes=args.budget_bytes, out_dir=out_dir)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="occluded", help="scenario JSON file or preset name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=None, help="override the preset frame count")
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--tau", type=int, default=1)
    p.add_argument("--mode", choices=MODES, default="stt")
    p.add_argument("--budget-bytes", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--latency-ms", type=float, default=None)
    p.add_argument("--pos-std", type=float, default=0.0)
    p.add_argument("--rot-std", type=float, default=0.0)
    p.add_argument("--drop-prob", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stfusion", description="Collaborative BEV perception simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="one simulation run")
    _common(p)

    p = sub.add_parser("sweep-bandwidth", help="threshold sweep against the dense baseline")
    _common(p)
    p.add_argument("--thresholds", type=float, nargs="+", default=list(DEFAULT_THRESHOLDS))

    p = sub.add_parser("sweep-robustness", help="latency, pose noise or token drop sweep")
    _common(p)
    p.add_argument("--axis", choices=sorted(ROBUSTNESS_AXES), required=True)
    p.add_argument("--values", type=float, nargs="+", default=None)

    p = sub.add_parser("ablate", help="toggle the align transform and the temporal agent")
    _common(p)
    p.add_argument("--components", nargs="+", choices=("AT", "temporal"), default=["AT", "temporal"])

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-scenario", help="write a scenario JSON file")
    p.add_argument("--preset", choices=PRESETS, default="default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--out", required=True, help="destination file")
    return parser


def _print_rows(rows: list[dict]) -> None:
    for r in rows:
        print(json.dumps(r))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gradcheck":
            results = gradcheck(args.seed)
            for r in results:
                print(r.line())
            failed = [r.name for r in results if not r.passed]
            if failed:
                print(f"failing components: {', '.join(failed)}", file=sys.stderr)
                return 2
            return 0
        if args.command == "gen-scenario":
            scenario = _scenario(args.preset, args.seed, args.frames)
            save_scenario(scenario, args.out)
            print(f"wrote {args.out}")
            return 0
        out = _out_root(args)
        if args.command == "run":
            result = run(_config(args, out))
            print(json.dumps({k: v for k, v in result.summary().items() if k != "messages"}, indent=1))
        elif args.command == "sweep-bandwidth":
            _print_rows(sweep_bandwidth(_config(args, None), args.thresholds, out))
        elif args.command == "sweep-robustness":
            values = args.values
            if values is None:
                values = LATENCY_SET_MS if args.axis == "latency" else {
                    "pos_std": (0.0, 0.1, 0.2), "rot_std": (0.0, 0.01, 0.02), "drop_prob": (0.0, 0.5, 1.0)}[args.axis]
            _print_rows(sweep_robustness(_config(args, None), args.axis, values, out))
        elif args.command == "ablate":
            _print_rows(ablation(_config(args, None), args.components, out))
        log.info("outputs written to %s", out)
        return 0
    except (StfusionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

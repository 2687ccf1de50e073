"""Command-line entry point.

Exit codes: 0 clean, 1 anomalies found, 2 data error, 3 I/O or format
error, 64 usage error. ``--config FILE`` reads ``key=value`` lines that act
as flags placed before the command line, so explicit flags win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import detector as det
from . import evaluation as ev
from . import inject as inj
from .ingest import (CanFrame, DecodeError, SignalSpec, TraceError, frames_to_samples, parse_trace,
                     samples_to_arrays, write_samples_csv)
from .simatrix import (DEFAULT_EPSILON, LutError, Quantizer, Reference, derive_self_info, load_lut,
                       save_lut, train)
from .synth import SCENARIO_SAMPLES, gen_drive_trace

log = logging.getLogger("selfinfo_ads")

EXIT_OK, EXIT_ANOMALY, EXIT_DATA, EXIT_IO, EXIT_USAGE = 0, 1, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_signal_flags(p):
    g = p.add_argument_group("candump signal decoding")
    g.add_argument("--format", choices=("candump", "csv"), help="trace format (default: sniff first line)")
    g.add_argument("--can-id", type=lambda s: int(s, 16), help="CAN id carrying the signal (hex)")
    g.add_argument("--byte-offset", type=int, default=0)
    g.add_argument("--bit-length", type=int, default=16)
    g.add_argument("--scale", type=float, default=0.01)
    g.add_argument("--offset", type=float, default=0.0)


def _add_quantizer_flags(p, required_width: bool):
    p.add_argument("--bin-width", type=float, required=required_width, default=None if required_width else 1.0)
    p.add_argument("--min-value", type=float, default=0.0)
    p.add_argument("--max-value", type=float, default=250.0)


def _add_detector_flags(p):
    p.add_argument("--mode", choices=("streaming", "windowed"), default="streaming")
    p.add_argument("--threshold", type=float, help="threshold in bits (default: calibrate from the LUT)")
    p.add_argument("--quantile", type=float, default=det.DEFAULT_QUANTILE)
    p.add_argument("--window", type=int, default=det.DEFAULT_WINDOW)
    p.add_argument("--decay", type=float, help="enable online reference update with this retention factor")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selfinfo-ads", description="Self-information CAN signal anomaly detector")
    parser.add_argument("--config", help="key=value file supplying default flags")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic drive trace (timestamp,value CSV)")
    p.add_argument("--scenario", choices=("highway", "urban"), required=True)
    p.add_argument("--samples", type=int, help="default: the scenario's standard length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a reference LUT from a clean trace")
    p.add_argument("trace")
    _add_signal_flags(p)
    _add_quantizer_flags(p, required_width=True)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--quantile", type=float, default=det.DEFAULT_QUANTILE)
    p.add_argument("--out", required=True, help="LUT output path")

    p = sub.add_parser("detect", help="detect anomalies in a trace against a LUT")
    p.add_argument("trace")
    p.add_argument("--lut", required=True)
    _add_signal_flags(p)
    _add_detector_flags(p)
    p.add_argument("--out", help="events CSV (default: stdout)")

    p = sub.add_parser("inject", help="inject attacks into a sample CSV")
    p.add_argument("trace")
    p.add_argument("--out", required=True, help="attacked trace CSV")
    p.add_argument("--truth", required=True, help="ground-truth CSV output")
    p.add_argument("--campaign", help="campaign CSV to apply (otherwise one is planned)")
    p.add_argument("--campaign-out", help="write the applied campaign here")
    p.add_argument("--one-time", type=int, default=0)
    p.add_argument("--replay", type=int, default=0)
    p.add_argument("--deviation", type=float, default=20.0)
    p.add_argument("--separation", type=int, default=128)
    p.add_argument("--min-effect", type=float, default=0.0)
    p.add_argument("--valid-min", type=float, default=0.0)
    p.add_argument("--valid-max", type=float, default=160.0)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="score an events CSV against ground truth")
    p.add_argument("--events", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--trace-len", type=int, required=True)
    p.add_argument("--tolerance", type=int, default=2)
    p.add_argument("--out", help="report CSV (default: stdout)")

    p = sub.add_parser("bench", help="benchmark the detection loop")
    p.add_argument("--lut", help="LUT to benchmark (default: train on a synthetic urban drive)")
    p.add_argument("--trace", help="sample CSV (default: synthetic urban drive)")
    p.add_argument("--samples", type=int, default=SCENARIO_SAMPLES["urban"])
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quantile", type=float, default=1.0)

    p = sub.add_parser("repro", help="run the full highway/urban experiment")
    p.add_argument("scenario", choices=("highway", "urban"))
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--samples", type=int)
    p.add_argument("--deviation", type=float, default=20.0)
    _add_detector_flags(p)
    p.set_defaults(quantile=1.0)
    p.add_argument("--out-dir", default="out")

    p = sub.add_parser("sweep", help="deviation sweep with noise-contaminated training")
    p.add_argument("--scenario", choices=("highway", "urban"), default="urban")
    p.add_argument("--samples", type=int, default=60_000)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--deviations", default="10,20,40")
    p.add_argument("--noise", type=float, default=ev.SweepConfig.noise_kmh)
    p.add_argument("--attacks", type=int, default=20)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="report CSV (default: stdout)")
    return parser


def read_config(path: str) -> List[str]:
    """Turn ``key=value`` lines into flags; ``key=true`` becomes a bare switch."""
    args = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line without '=': {line!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() == "true":
            args.append(flag)
        elif value.lower() != "false":
            args += [flag, value]
    return args


def _splice_config(argv: List[str]) -> List[str]:
    if "--config" not in argv:
        return argv
    k = argv.index("--config")
    if k + 1 >= len(argv):
        raise UsageError("--config needs a path")
    path = argv[k + 1]
    rest = argv[:k] + argv[k + 2:]
    extra = read_config(path)
    # config flags go right after the subcommand so later (explicit) flags override them
    for i, a in enumerate(rest):
        if not a.startswith("-"):
            return rest[:i + 1] + extra + rest[i + 1:]
    return rest + extra


def _load_values(args):
    """Read a trace as (timestamps, values); candump needs --can-id."""
    with open(args.trace) as fh:
        records = parse_trace(fh, getattr(args, "format", None))
    if records and isinstance(records[0], CanFrame):
        if args.can_id is None:
            raise UsageError("candump input needs --can-id")
        spec = SignalSpec(can_id=args.can_id, byte_offset=args.byte_offset, bit_length=args.bit_length,
                          scale=args.scale, offset=args.offset, max_physical=float("inf"))
        records = frames_to_samples(records, spec)
    t, v = samples_to_arrays(records)
    if v.size < 2:
        raise ValueError("fewer than 2 samples")
    return t, v


def _read_csv_values(path):
    with open(path) as fh:
        records = parse_trace(fh, "csv")
    return samples_to_arrays(records)


def cmd_gen(args) -> int:
    n = args.samples or SCENARIO_SAMPLES[args.scenario]
    t, v = gen_drive_trace(args.scenario, n, args.seed)
    with open(args.out, "w") as fh:
        write_samples_csv(fh, t, v)
    print(f"wrote {n} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    q = Quantizer(args.min_value, args.max_value, args.bin_width)
    _, values = _load_values(args)
    bins = q.bins(values)
    ref = Reference(train(bins, q.order), q, args.epsilon)
    matrix = derive_self_info(ref.counts, ref.epsilon)
    theta = det.threshold_from_counts(matrix, ref.counts, args.quantile)
    save_lut(args.out, ref)
    print(f"order        {q.order}")
    print(f"transitions  {ref.counts.total}")
    print(f"seen cells   {ref.counts.seen_cells}")
    print(f"e_max        {matrix.e_max:.6f} bits")
    print(f"threshold    {theta:.6f} bits (q={args.quantile})")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    ref = load_lut(args.lut)
    config = det.DetectorConfig(mode=args.mode, threshold_bits=args.threshold, window_len=args.window,
                                quantile=args.quantile, decay=args.decay)
    t, values = _load_values(args)
    bins = ref.quantizer.bins(values)
    matrix = ref.matrix()
    if config.threshold_bits is not None:
        theta = config.threshold_bits
    elif config.mode == "windowed":
        raise UsageError("windowed mode needs --threshold (window thresholds are not stored in the LUT)")
    else:
        theta = det.threshold_from_counts(matrix, ref.counts, config.quantile)
    events = det.detect(matrix, config, bins, theta, timestamps=t, counts=ref.counts)
    if args.out:
        with open(args.out, "w") as fh:
            det.write_events(fh, events)
    else:
        det.write_events(sys.stdout, events)
    log.info("threshold %.6f bits, %d events", theta, len(events))
    return EXIT_ANOMALY if events else EXIT_OK


def cmd_inject(args) -> int:
    t, values = _read_csv_values(args.trace)
    valid = (args.valid_min, args.valid_max)
    if args.campaign:
        with open(args.campaign) as fh:
            campaign = inj.read_campaign(fh)
    else:
        campaign = inj.plan_campaign(values.size, args.one_time, args.replay, args.seed,
                                     deviation_pct=args.deviation, separation=args.separation,
                                     values=values, min_effect=args.min_effect, valid_range=valid)
    attacked, truth = inj.apply_campaign(values, campaign, valid_range=valid, strict=args.strict)
    with open(args.out, "w") as fh:
        write_samples_csv(fh, t, attacked)
    with open(args.truth, "w") as fh:
        inj.write_truth(fh, truth)
    if args.campaign_out:
        with open(args.campaign_out, "w") as fh:
            inj.write_campaign(fh, campaign)
    print(f"applied {len(campaign)} attacks")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    with open(args.events) as fh:
        events = sorted(det.read_events(fh), key=lambda e: e.index)
    with open(args.truth) as fh:
        truth = inj.read_truth(fh)
    report = ev.score(events, truth, args.trace_len, ev.MatchPolicy(args.tolerance))
    if args.out:
        with open(args.out, "w") as fh:
            ev.write_reports(fh, ["evaluate"], [report])
    else:
        ev.write_reports(sys.stdout, ["evaluate"], [report])
    print(ev.format_report("evaluate", report), file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.trace:
        _, values = _read_csv_values(args.trace)
    else:
        _, values = gen_drive_trace("urban", args.samples, args.seed)
    if args.lut:
        ref = load_lut(args.lut)
    else:
        q = Quantizer()
        ref = Reference(train(q.bins(values), q.order), q)
    matrix = ref.matrix()
    theta = det.threshold_from_counts(matrix, ref.counts, args.quantile)
    report = ev.bench(matrix, ref.quantizer.bins(values), theta, args.repetitions, counts=ref.counts)
    print(report.summary())
    return EXIT_OK


def cmd_repro(args) -> int:
    config = det.DetectorConfig(mode=args.mode, threshold_bits=args.threshold, window_len=args.window,
                                quantile=args.quantile, decay=args.decay)
    cfg = ev.ScenarioConfig(scenario=args.scenario, seed=args.seed, n_samples=args.samples,
                            deviation_pct=args.deviation, detector=config)
    result = ev.run_scenario(cfg)
    paths = ev.write_scenario_outputs(args.out_dir, result)
    r = result.report
    print(ev.format_report(f"{args.scenario}-seed{args.seed}", r))
    print(f"  train time         {r.train_time_s:.4f} s")
    print(f"  test time          {r.test_time_s:.4f} s")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def _sweep_one(job):
    scenario, samples, seed, deviations, noise, attacks = job
    _, clean = gen_drive_trace(scenario, samples, seed)
    cfg = ev.SweepConfig(scenario=scenario, n_samples=samples, seed=seed, noise_kmh=noise, n_attacks=attacks)
    return seed, ev.deviation_sweep(clean, deviations, cfg)


def cmd_sweep(args) -> int:
    try:
        deviations = [float(x) for x in args.deviations.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --deviations {args.deviations!r}") from None
    jobs = [(args.scenario, args.samples, s, deviations, args.noise, args.attacks) for s in range(args.seeds)]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    labels, reports = [], []
    for seed, table in results:
        for d, r in table:
            labels.append(f"seed{seed}-dev{d:g}")
            reports.append(r)
    fh = open(args.out, "w") if args.out else sys.stdout
    try:
        ev.write_reports(fh, labels, reports)
    finally:
        if args.out:
            fh.close()
    for d in deviations:
        vals = [r.fpr_events for (_, table) in results for dd, r in table if dd == d]
        rates = [r.detection_rate for (_, table) in results for dd, r in table if dd == d]
        print(f"deviation {d:>5g}%  mean FPR(events) {np.mean(vals):.4f}  mean detection {np.mean(rates):.4f}",
              file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "detect": cmd_detect, "inject": cmd_inject,
    "evaluate": cmd_evaluate, "bench": cmd_bench, "repro": cmd_repro, "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _splice_config(argv)
    except (UsageError, OSError) as e:
        print(f"selfinfo-ads: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"selfinfo-ads: usage: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LutError, OSError) as e:
        print(f"selfinfo-ads: {e}", file=sys.stderr)
        return EXIT_IO
    except (TraceError, DecodeError, ValueError) as e:
        print(f"selfinfo-ads: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

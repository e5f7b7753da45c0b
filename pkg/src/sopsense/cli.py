"""
Command-line interface.

::

    sopsense simulate  --scenario break-demo --mode sop-direct --out runs/sim
    sopsense analyze   runs/sim/sop.bin --notch on --preset event --out runs/ana
    sopsense detect    runs/sim/sop.bin --train-s 300 --out runs/det
    sopsense demo-break --out runs/demo

Exit status: 0 success, 2 usage or data error, 3 I/O error.  The default
output root is ``$SOPSENSE_OUT`` (or ``./sopsense-out``); each command
writes into a subdirectory named after itself unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .channel import SopDirectSource
from .detect import (
    BREAK,
    CLASSES,
    LOSS_OF_SIGNAL,
    PRECURSOR_IMPULSIVE,
    PRECURSOR_SUSTAINED,
    Alarm,
    BaselineError,
    BaselineModel,
    DetectConfig,
    fit_baseline,
)
from .io import (
    SopFormatError,
    open_sop,
    plot_deviation_svg,
    plot_spectrogram_svg,
    sha256_file,
    write_alarms_csv,
    write_deviation_csv,
    write_features_csv,
    write_jones_binary,
    write_manifest,
    write_sop_binary,
    write_sop_csv,
    write_spectrogram_csv,
)
from .pipeline import (
    COMPONENTS,
    DESK_NOISE,
    Analysis,
    AnalysisConfig,
    analyze_series,
    detect_events,
)
from .scenario import PRESETS, EventScript, ScenarioError, load_scenario, serialize_scenario, validate
from .sop import series_from_jones
from .waveform import TxConfig

EXIT_OK = 0
EXIT_DATA = 2
EXIT_IO = 3
OUT_ENV = "SOPSENSE_OUT"

# acceptance windows for the demo report (seconds)
PRECURSOR_WINDOW_S = (250.0, 450.0)
BREAK_TOLERANCE_S = 2.0
LOS_TOLERANCE_S = 0.2


class UsageError(Exception):
    """Bad arguments or missing inputs (exit 2)."""


def _out_dir(arg: str | None, default_name: str) -> Path:
    out = Path(arg) if arg else Path(os.environ.get(OUT_ENV, "sopsense-out")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario(ref: str) -> EventScript:
    if ref not in PRESETS and not os.path.exists(ref):
        raise UsageError(f"{ref!r} is neither a preset ({', '.join(PRESETS)}) nor an existing file")
    script = load_scenario(ref)
    problems = validate(script)
    if problems:
        raise ScenarioError("; ".join(problems))
    return script


def _info(command: str, **extra) -> dict:
    return {"tool": "sopsense", "version": __version__, "command": command, **extra}


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------


def run_simulate(script: EventScript, mode: str, out: Path, fmt: str = "bin", noise_seed: int = 0) -> list[Path]:
    """Write the SOP series (and for full-stack the Jones stream); returns the files written."""
    digest = script.digest()
    files = []
    scen = out / "scenario.yaml"
    scen.write_text(serialize_scenario(script), encoding="utf-8")
    files.append(scen)
    if mode == "sop-direct":
        series = SopDirectSource(script)
    else:
        from .pipeline import full_stack_jones

        js = full_stack_jones(script, noise_seed=noise_seed)
        jpath = out / "jones.bin"
        write_jones_binary(jpath, js, digest)
        files.append(jpath)
        series = series_from_jones(js)
    if fmt == "csv":
        path = out / "sop.csv"
        write_sop_csv(path, series if not isinstance(series, SopDirectSource) else series.slice(0, len(series)), digest)
    else:
        path = out / "sop.bin"
        write_sop_binary(path, series, digest)
    files.append(path)
    return files


def _simulate_config(mode: str, fmt: str, noise_seed: int) -> dict:
    cfg = {"mode": mode, "format": fmt, "sample_period_s": 1e-4}
    if mode == "full-stack":
        cfg.update(noise_seed=noise_seed, tx=asdict(TxConfig()), noise=asdict(DESK_NOISE))
    return cfg


def write_analysis(analysis: Analysis, out: Path, plots: bool = True) -> list[Path]:
    files = []
    for c in COMPONENTS:
        path = out / f"spectrogram_{c}.csv"
        write_spectrogram_csv(path, analysis.spectrograms[c])
        files.append(path)
    path = out / "deviation.csv"
    write_deviation_csv(path, analysis.deviation_t_s, analysis.deviation)
    files.append(path)
    path = out / "features.csv"
    f = analysis.features
    write_features_csv(path, f.t_s, f.bands, f.energy_db)
    files.append(path)
    if plots:
        for c in COMPONENTS:
            path = out / f"spectrogram_{c}.svg"
            plot_spectrogram_svg(path, analysis.spectrograms[c], f"{c} spectrogram")
            files.append(path)
        path = out / "deviation.svg"
        plot_deviation_svg(path, analysis.deviation_t_s, analysis.deviation, "Stokes deviation from reference")
        files.append(path)
    return files


def _analysis_summary(analysis: Analysis) -> str:
    frac = analysis.energy_fraction_below()
    los = "none" if analysis.los_t_s is None else f"{analysis.los_t_s:.4f} s"
    shares = " ".join(f"{c}={v:.5f}" for c, v in zip(COMPONENTS, frac))
    return f"samples={analysis.n_samples} energy_below_split: {shares} los={los}"


def _load_baseline(ref: str, cfg: AnalysisConfig, dcfg: DetectConfig) -> BaselineModel:
    path = Path(ref)
    with open(path, "rb") as fh:
        head = fh.read(1)
    if head == b"{":
        try:
            return BaselineModel.from_json(path.read_text(encoding="utf-8"))
        except (KeyError, ValueError, TypeError) as exc:
            raise BaselineError(f"{path}: not a baseline model ({exc})") from None
    ref_analysis = analyze_series(open_sop(path), cfg, dcfg)
    f = ref_analysis.features
    return fit_baseline(f, dcfg.min_scale_db, ref_analysis.hop_s)


def summary_line(alarms: list[Alarm]) -> str:
    counts = {k: sum(a.kind == k for a in alarms) for k in CLASSES}
    return "alarms: " + " ".join(f"{k}={v}" for k, v in counts.items())


def run_detect(analysis: Analysis, out: Path, model: BaselineModel | None, train_s: float | None, dcfg: DetectConfig):
    if model is None and train_s is None:
        raise UsageError("no baseline given: pass --baseline PATH or --train-s SECONDS")
    det = detect_events(analysis, model, train_s if train_s is not None else 0.0, dcfg)
    alarms_path = out / "alarms.csv"
    write_alarms_csv(alarms_path, det.alarms)
    model_path = out / "baseline_model.json"
    model_path.write_text(det.model.to_json() + "\n", encoding="utf-8")
    return det, [alarms_path, model_path]


# ----------------------------------------------------------------------------
# demo report
# ----------------------------------------------------------------------------


def evaluate_timeline(script: EventScript, alarms: list[Alarm]) -> dict:
    """Check the detected alarms against the scripted break timeline."""
    ev = script.break_event()
    t_break = ev.start_s if ev is not None else math.nan
    t_collapse = script.break_completion_s()
    pre = [a for a in alarms if a.kind in (PRECURSOR_IMPULSIVE, PRECURSOR_SUSTAINED)]
    imp_window = [
        a
        for a in alarms
        if a.kind == PRECURSOR_IMPULSIVE and t_break - PRECURSOR_WINDOW_S[1] <= a.t_s <= t_break - PRECURSOR_WINDOW_S[0]
    ]
    breaks = [a for a in alarms if a.kind == BREAK]
    los = [a for a in alarms if a.kind == LOSS_OF_SIGNAL]
    checks = {
        "precursor_impulsive within [T-450 s, T-250 s]": len(imp_window) >= 1,
        "precursor_sustained present": any(a.kind == PRECURSOR_SUSTAINED for a in alarms),
        "exactly one break within 2 s of onset": len(breaks) == 1 and abs(breaks[0].t_s - t_break) <= BREAK_TOLERANCE_S,
        "loss of signal within 0.2 s of power collapse": len(los) == 1
        and abs(los[0].t_s - t_collapse) <= LOS_TOLERANCE_S,
    }
    ordering = (
        bool(pre)
        and len(breaks) == 1
        and len(los) == 1
        and max(a.t_s for a in pre) < breaks[0].t_s <= los[0].t_s
    )
    checks["ordering precursor < break <= loss of signal"] = ordering
    checks = {k: bool(v) for k, v in checks.items()}
    return {"t_break": t_break, "t_collapse": t_collapse, "checks": checks, "ordering": bool(ordering)}


def format_report(script: EventScript, alarms: list[Alarm], verdict: dict) -> str:
    t_break = verdict["t_break"]
    lines = ["break demo report", f"scenario sha256: {script.digest()}", "", "scripted events:"]
    for ev in script.events:
        end = "end of run" if math.isinf(ev.duration_s) else f"{ev.end_s:.3f} s"
        lines.append(f"  {ev.kind:<11} start {ev.start_s:9.3f} s  until {end}")
    lines += [
        "",
        f"break onset T = {t_break:.3f} s, power collapse at {verdict['t_collapse']:.3f} s",
        "",
        "alarms (time, offset from T):",
    ]
    for a in alarms:
        lines.append(
            f"  {a.kind:<20} {a.t_s:9.3f} s  T{a.t_s - t_break:+9.3f} s  band={a.band or '-':<5}"
            f" score={a.score:7.2f}  run={a.run_length_s:.2f} s"
        )
    lines += ["", "checks:"]
    for name, ok in verdict["checks"].items():
        lines.append(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    lines += ["", f"result: {'PASS' if verdict['ordering'] else 'FAIL'}", ""]
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    ref = args.scenario_opt or args.scenario
    if not ref:
        raise UsageError("simulate needs a scenario (preset name or file)")
    script = _scenario(ref)
    out = _out_dir(args.out, "simulate")
    files = run_simulate(script, args.mode, out, args.format, args.noise_seed)
    info = _info(
        "simulate",
        scenario_sha256=script.digest(),
        seeds={"scenario": script.seed, "noise": args.noise_seed},
        config=_simulate_config(args.mode, args.format, args.noise_seed),
    )
    write_manifest(out, info, files)
    n = int(math.floor(script.total_duration_s / 1e-4 + 1e-9)) if args.mode == "sop-direct" else None
    print(f"wrote {files[-1]}" + (f" ({n} samples)" if n is not None else ""))
    return EXIT_OK


def _analysis_config(args) -> AnalysisConfig:
    return AnalysisConfig(notch=args.notch == "on", preset=args.preset)


def cmd_analyze(args) -> int:
    src = open_sop(args.input)
    if len(src) == 0:
        raise SopFormatError(f"{args.input}: contains no samples")
    cfg = _analysis_config(args)
    analysis = analyze_series(src, cfg)
    out = _out_dir(args.out, "analyze")
    files = write_analysis(analysis, out, plots=not args.no_plots)
    info = _info(
        "analyze",
        input={"name": Path(args.input).name, "sha256": sha256_file(args.input)},
        config=asdict(cfg),
    )
    write_manifest(out, info, files)
    print(_analysis_summary(analysis))
    return EXIT_OK


def cmd_detect(args) -> int:
    if args.baseline is None and args.train_s is None:
        raise UsageError("no baseline given: pass --baseline PATH or --train-s SECONDS")
    src = open_sop(args.input)
    if len(src) == 0:
        raise SopFormatError(f"{args.input}: contains no samples")
    cfg = AnalysisConfig(preset="event")
    dcfg = DetectConfig()
    model = _load_baseline(args.baseline, cfg, dcfg) if args.baseline else None
    analysis = analyze_series(src, cfg, dcfg)
    out = _out_dir(args.out, "detect")
    det, files = run_detect(analysis, out, model, args.train_s, dcfg)
    info = _info(
        "detect",
        input={"name": Path(args.input).name, "sha256": sha256_file(args.input)},
        baseline=(Path(args.baseline).name if args.baseline else None),
        train_s=args.train_s,
        config={"analysis": asdict(cfg), "detect": asdict(dcfg)},
    )
    write_manifest(out, info, files)
    print(summary_line(det.alarms))
    return EXIT_OK


def cmd_demo_break(args) -> int:
    script = _scenario(args.scenario)
    out = _out_dir(args.out, "demo-break")
    train_s = args.train_s
    files = run_simulate(script, "sop-direct", out)
    sop_path = files[-1]
    cfg = AnalysisConfig(preset="event")
    dcfg = DetectConfig()
    analysis = analyze_series(open_sop(sop_path), cfg, dcfg)
    files += write_analysis(analysis, out, plots=not args.no_plots)
    det, det_files = run_detect(analysis, out, None, train_s, dcfg)
    files += det_files
    verdict = evaluate_timeline(script, det.alarms)
    report = out / "report.txt"
    report.write_text(format_report(script, det.alarms, verdict), encoding="utf-8")
    files.append(report)
    info = _info(
        "demo-break",
        scenario_sha256=script.digest(),
        seeds={"scenario": script.seed},
        train_s=train_s,
        config={"simulate": _simulate_config("sop-direct", "bin", 0), "analysis": asdict(cfg), "detect": asdict(dcfg)},
        checks=verdict["checks"],
    )
    write_manifest(out, info, files)
    print(summary_line(det.alarms))
    print(f"report: {report} ({'PASS' if verdict['ordering'] else 'FAIL'})")
    return EXIT_OK if verdict["ordering"] else 1


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sopsense", description="Polarization-based fiber event sensing on synthetic SOP data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate an SOP series from a scenario")
    s.add_argument("scenario", nargs="?", help="preset name or scenario file")
    s.add_argument("--scenario", dest="scenario_opt", help="same as the positional argument")
    s.add_argument("--mode", choices=("sop-direct", "full-stack"), default="sop-direct")
    s.add_argument("--format", choices=("bin", "csv"), default="bin")
    s.add_argument("--noise-seed", type=int, default=0, help="full-stack receiver noise seed")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="notch, spectrograms and deviation traces")
    a.add_argument("input", help="SOP record file (.bin or .csv)")
    a.add_argument("--notch", choices=("on", "off"), default="on")
    a.add_argument("--preset", choices=("event", "baseline"), default="event")
    a.add_argument("--no-plots", action="store_true", help="skip the SVG figures")
    a.add_argument("--out", help="output directory")
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("detect", help="score band features and classify alarms")
    d.add_argument("input", help="SOP record file (.bin or .csv)")
    d.add_argument("--baseline", help="baseline model JSON or a quiet SOP record file")
    d.add_argument("--train-s", type=float, help="train on the first SECONDS of the input")
    d.add_argument("--out", help="output directory")
    d.set_defaults(func=cmd_detect)

    b = sub.add_parser("demo-break", help="simulate, analyze and detect the break scenario")
    b.add_argument("--scenario", default="break-demo", help="preset name or scenario file")
    b.add_argument("--train-s", type=float, default=300.0)
    b.add_argument("--no-plots", action="store_true")
    b.add_argument("--out", help="output directory")
    b.set_defaults(func=cmd_demo_break)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ScenarioError, SopFormatError, BaselineError) as exc:
        print(f"sopsense: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"sopsense: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"sopsense: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``mechbias <subcommand> CONFIG [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import EXIT_NUMERIC, MechBiasError, NoBaselineErrors
from .fixtures import write_fixtures
from . import pipeline as P

log = logging.getLogger("mechbias")


def _common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("config", type=Path, help="run config (JSON)")
    sub.add_argument("--model", help="override the model path")
    sub.add_argument("--dataset", help="override the dataset path")
    sub.add_argument("--mode", choices=P.MODES, help="override the run mode")
    sub.add_argument("--output-dir", dest="output_dir", help="override the output directory")
    sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override any config field, e.g. --set probe.lr=0.05 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mechbias", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True)
    helps = {
        "probe": "train and evaluate the linear probe(s)",
        "lens": "project probe directions through the unembedding",
        "attribute": "rank neurons against probe directions and filter by keywords",
        "activations": "group-conditioned activation matrices for the attributed neurons",
        "intervene": "baseline classification, error tables and the intervention sweep",
        "report": "run every stage and write the full report bundle",
    }
    for name, text in helps.items():
        _common(subs.add_parser(name, help=text, description=text))
    synth = subs.add_parser("synth", help="write the planted fixture models, corpora and configs")
    synth.add_argument("outdir", type=Path)
    plot = subs.add_parser("plot", help="render an activation or sweep CSV as SVG")
    plot.add_argument("csv", type=Path)
    plot.add_argument("-o", "--output", type=Path, help="SVG path (default: CSV path with .svg)")
    return parser


def _load(args) -> P.RunConfig:
    # paths given on the command line are relative to the working directory
    paths = {"model": args.model, "dataset": args.dataset, "output_dir": args.output_dir}
    extra = {k: str(Path(v).resolve()) for k, v in paths.items() if v is not None}
    extra["mode"] = args.mode
    return P.load_config(args.config, args.overrides, extra)


def _stage(name: str):
    """Context manager tagging errors with the stage they came from."""

    class _Tag:
        def __enter__(self):
            log.info("stage %s", name)

        def __exit__(self, exc_type, exc, tb):
            if isinstance(exc, MechBiasError) and exc.stage is None:
                exc.stage = name
            return False

    return _Tag()


def cmd_probe(cfg: P.RunConfig) -> list[str]:
    with _stage("load"):
        ctx = P.open_run(cfg)
    with _stage("probe"):
        P.run_probe(ctx)
    return ["probe"]


def _probes(cfg: P.RunConfig) -> dict:
    return {kind: P.load_kind_probe(cfg, kind) for kind in cfg.kinds}


def cmd_lens(cfg: P.RunConfig) -> list[str]:
    with _stage("load"):
        ctx = P.open_run(cfg)
        probes = _probes(cfg)
    with _stage("lens"):
        P.run_lens(ctx, probes)
    return ["lens"]


def cmd_attribute(cfg: P.RunConfig) -> list[str]:
    with _stage("load"):
        ctx = P.open_run(cfg)
        probes = _probes(cfg)
    with _stage("attribute"):
        P.run_attribute(ctx, probes)
    return ["attribute"]


def _groups(cfg: P.RunConfig) -> dict:
    return {kind: P.load_groups(cfg, kind) for kind in cfg.kinds}


def cmd_activations(cfg: P.RunConfig) -> list[str]:
    with _stage("load"):
        ctx = P.open_run(cfg)
        groups = _groups(cfg)
    with _stage("activations"):
        P.run_activations(ctx, groups)
    return ["activations"]


def cmd_intervene(cfg: P.RunConfig) -> list[str]:
    with _stage("load"):
        ctx = P.open_run(cfg)
        groups = _groups(cfg)
    with _stage("intervene"):
        P.run_intervene(ctx, groups)
    return ["intervene"]


def cmd_report(cfg: P.RunConfig) -> list[str]:
    stages = ["probe", "lens", "attribute", "activations"]
    with _stage("load"):
        ctx = P.open_run(cfg)
    with _stage("probe"):
        probes = P.run_probe(ctx)
    with _stage("lens"):
        P.run_lens(ctx, probes)
    with _stage("attribute"):
        groups = P.run_attribute(ctx, probes)
    with _stage("activations"):
        P.run_activations(ctx, groups)
    if cfg.mode != "toxigen":
        with _stage("intervene"):
            try:
                P.run_intervene(ctx, groups)
                stages.append("intervene")
            except NoBaselineErrors:
                log.warning("no baseline errors; sweep skipped")
                P.write_json(cfg.out / "sweep.json", {"skipped": "no misclassified records at baseline"})
    return stages


COMMANDS = {
    "probe": cmd_probe,
    "lens": cmd_lens,
    "attribute": cmd_attribute,
    "activations": cmd_activations,
    "intervene": cmd_intervene,
    "report": cmd_report,
}


# ------------------------------------------------------------------ plot


def _color(value: float, lo: float, hi: float) -> str:
    """Diverging blue-white-red scale centred on zero."""
    span = max(abs(lo), abs(hi), 1e-12)
    t = max(-1.0, min(1.0, value / span))
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
    else:
        r, g, b = int(255 * (1 + t)), int(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(header: list[str], rows: list[list[str]]) -> str:
    cols = header[1:]
    cell, left, top = 64, 170, 40
    values = [float(v) for row in rows for v in row[1:] if v != "---"]
    lo, hi = (min(values), max(values)) if values else (0.0, 0.0)
    width, height = left + cell * len(cols) + 10, top + cell * len(rows) + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">']
    for j, c in enumerate(cols):
        out.append(f'<text x="{left + j * cell + cell / 2}" y="{top - 8}" text-anchor="middle">{escape(c)}</text>')
    for i, row in enumerate(rows):
        y = top + i * cell
        out.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4}" text-anchor="end">{escape(row[0])}</text>')
        for j, v in enumerate(row[1:]):
            x = left + j * cell
            fill = "#dddddd" if v == "---" else _color(float(v), lo, hi)
            label = "---" if v == "---" else f"{float(v):.2f}"
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#ffffff"/>')
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


SWEEP_SERIES = (("correct_rate", "#2c7bb6"), ("original_bias_rate", "#d7191c"), ("other_rate", "#fdae61"),
                ("unknown_rate", "#999999"))


def sweep_svg(records: list[dict]) -> str:
    bar, gap, chart_h, left, top = 14, 18, 200, 50, 30
    group_w = bar * len(SWEEP_SERIES) + gap
    width = left + group_w * len(records) + 150
    height = top + chart_h + 50
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">']
    out.append(f'<line x1="{left}" y1="{top + chart_h}" x2="{left + group_w * len(records)}" y2="{top + chart_h}" stroke="#000"/>')
    for i, rec in enumerate(records):
        x0 = left + i * group_w
        for s, (key, color) in enumerate(SWEEP_SERIES):
            h = float(rec[key]) * chart_h
            out.append(f'<rect x="{x0 + s * bar}" y="{top + chart_h - h:.2f}" width="{bar - 1}" height="{h:.2f}" fill="{color}"/>')
        label = f"{rec['kind']} k={float(rec['factor']):g}"
        out.append(f'<text x="{x0 + bar * 2}" y="{top + chart_h + 16}" text-anchor="middle">{escape(label)}</text>')
    for s, (key, color) in enumerate(SWEEP_SERIES):
        y = top + 14 * s
        lx = left + group_w * len(records) + 10
        out.append(f'<rect x="{lx}" y="{y}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{lx + 14}" y="{y + 9}">{key.removesuffix("_rate")}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(csv_path: Path, output: Path | None) -> Path:
    from .errors import SchemaError

    if not csv_path.exists():
        raise SchemaError(f"{csv_path} does not exist", subject=str(csv_path))
    with csv_path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{csv_path} is empty", subject=str(csv_path))
    header, body = rows[0], rows[1:]
    if header[0] == "neuron_group":
        svg = heatmap_svg(header, body)
    elif {"kind", "factor", "correct_rate"} <= set(header):
        svg = sweep_svg([dict(zip(header, r)) for r in body])
    else:
        raise SchemaError("CSV is neither an activation matrix nor a sweep table", subject=str(csv_path))
    output = output or csv_path.with_suffix(".svg")
    output.write_text(svg, encoding="utf-8")
    return output


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    stage = args.command
    try:
        if args.command == "synth":
            for p in write_fixtures(args.outdir):
                print(p)
            return 0
        if args.command == "plot":
            print(cmd_plot(args.csv, args.output))
            return 0
        with _stage("config"):
            cfg = _load(args)
        stages = COMMANDS[args.command](cfg)
        with _stage("manifest"):
            P.write_manifest(cfg, stages)
        print(cfg.out)
        return 0
    except MechBiasError as exc:
        where = f" ({exc.subject})" if exc.subject else ""
        print(f"mechbias {exc.stage or stage}: error{where}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(f"mechbias {stage}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

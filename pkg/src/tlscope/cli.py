"""Command-line front end.

Exit codes: 0 success, 1 I/O problems, 2 bad data or arguments. Errors
are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .attribution import attribute_windows, flow_id, write_similarity_csv
from .errors import DimensionMismatch, TlscopeError
from .features import parse_views, views_name
from .ingest import extract_flows, read_jsonl, write_jsonl
from .learn import ABLATION_ROWS, DEFAULT_LAMBDA_GRID, LinearModel, ablation_table, corpus_digest, cross_validate, fit_model
from .report import build_report, histogram, render_text, similarity
from .synth import generate, load_profiles, write_pcap
from .tls import UNKNOWN, CodeRegistry, FingerprintDB, SchannelConfig, fingerprint_client, is_schannel_xp

EXIT_IO = 1
EXIT_DATA = 2
CONFIG_ENV = "TLSCOPE_CONFIG"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- io helpers


def _read_bytes(path: str) -> bytes:
    return sys.stdin.buffer.read() if path == "-" else Path(path).read_bytes()


def _read_flows(path: str):
    if path == "-":
        return read_jsonl(sys.stdin)
    with open(path) as fp:
        return read_jsonl(fp)


def _open_out(path: Optional[str], binary: bool = False):
    if path in (None, "-"):
        return sys.stdout.buffer if binary else sys.stdout
    return open(path, "wb" if binary else "w", newline=None if binary else "")


def _write_text(path: Optional[str], text: str) -> None:
    fp = _open_out(path)
    try:
        fp.write(text)
        fp.flush()
    finally:
        if fp is not sys.stdout:
            fp.close()


def _check_inputs(paths: Sequence[str]) -> None:
    for p in paths:
        if p != "-" and not os.path.isfile(p):
            raise FileNotFoundError(f"input not found: {p}")


def _check_output(path: Optional[str]) -> None:
    if path in (None, "-"):
        return
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {parent}")


def _log(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True), file=sys.stderr)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _lambda_grid(args) -> list[float]:
    if args.lam is not None:
        return [args.lam]
    if args.lambda_grid:
        try:
            return [float(x) for x in str(args.lambda_grid).split(",") if x.strip()]
        except ValueError as exc:
            raise UsageError(f"bad --lambda-grid: {args.lambda_grid}") from exc
    return list(DEFAULT_LAMBDA_GRID)


# ---------------------------------------------------------------- extract


def _extract_one(path: str, idle_timeout: float):
    tally: Counter = Counter()
    flows = extract_flows(_read_bytes(path), idle_timeout=idle_timeout, tally=tally)
    return flows, dict(tally)


def _label_map(path: Optional[str]) -> dict:
    if not path:
        return {}
    out = {}
    with open(path) as fp:
        for line in fp:
            if line.strip():
                d = json.loads(line)
                out[(d["sa"], int(d["sp"]), d["da"], int(d["dp"]), int(d["start_us"]))] = d["label"]
    return out


def cmd_extract(args) -> int:
    _check_inputs(args.inputs)
    if len(args.inputs) > 1 and args.out not in (None, "-") and not os.path.isdir(args.out):
        raise UsageError("several inputs need --out to be a directory (or '-')")
    if len(args.inputs) == 1 and args.out and not os.path.isdir(args.out):
        _check_output(args.out)
    labels = _label_map(args.label_map)

    def target(path):
        if args.out and os.path.isdir(args.out):
            return str(Path(args.out) / (Path(path).stem + ".jsonl"))
        return args.out or "-"

    jobs = [p for p in args.inputs]
    if args.jobs > 1 and len(jobs) > 1 and "-" not in jobs:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_extract_one, p, args.idle_timeout) for p in jobs]
            results = []
            for f in futures:
                try:
                    results.append(f.result())
                except Exception as exc:  # isolated per file, reported below
                    results.append(exc)
    else:
        results = []
        for p in jobs:
            try:
                results.append(_extract_one(p, args.idle_timeout))
            except Exception as exc:
                results.append(exc)

    status = 0
    for path, res in zip(jobs, results):
        if isinstance(res, Exception):
            code = EXIT_DATA if isinstance(res, TlscopeError) else EXIT_IO
            status = max(status, code)
            _log({"file": path, "error": type(res).__name__, "message": str(res), "exit": code})
            continue
        flows, tally = res
        if labels or args.label:
            flows = [f.with_label(labels.get((f.sa, f.sp, f.da, f.dp, f.start_us), args.label)) for f in flows]
        fp = _open_out(target(path))
        try:
            write_jsonl(flows, fp)
            fp.flush()
        finally:
            if fp is not sys.stdout:
                fp.close()
        _log({"file": path, "flows": len(flows), "tls": sum(f.tls is not None for f in flows), "skipped": tally})
    return status


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    _check_inputs([args.flows])
    _check_output(args.out)
    _check_output(args.report)
    flows = _read_flows(args.flows)
    views = parse_views(args.views)
    grid = _lambda_grid(args)
    corpus = corpus_digest(flows)

    reports = {}
    if args.ablate:
        for row in ABLATION_ROWS:
            reports[row] = cross_validate(flows, row.split("+"), args.folds, grid, args.seed).report
    key = views_name(views)
    if key not in reports:
        reports[key] = cross_validate(flows, views, args.folds, grid, args.seed).report
    chosen = reports[key].l1_strength
    model = fit_model(flows, views, chosen, seed=args.seed, corpus_id=corpus)
    model.training_meta["folds"] = reports[key].folds

    _write_text(args.out, model.to_json() + "\n")
    summary = {"seed": args.seed, "corpus": corpus, "report": reports[key].to_dict()}
    if args.ablate:
        summary["ablation"] = [reports[row].to_dict() for row in ABLATION_ROWS]
    if args.report:
        _write_text(args.report, _dumps(summary))
    text_out = sys.stderr if args.out in (None, "-") else sys.stdout
    if args.ablate:
        print(ablation_table({row: reports[row] for row in ABLATION_ROWS}), file=text_out)
    rep = reports[key]
    print(
        f"{key}: total accuracy {rep.total_accuracy:.4f}, lambda {chosen:g}, {rep.folds['k']} folds, seed {args.seed}",
        file=text_out,
    )
    return 0


# ---------------------------------------------------------------- classify / attribute


def _load_model(path: str, views: Optional[str]) -> LinearModel:
    model = LinearModel.load(path) if path != "-" else LinearModel.from_dict(json.load(sys.stdin))
    if model.space is None:
        raise DimensionMismatch("model file carries no feature space")
    if views:
        want = parse_views(views)
        if want != model.space.views:
            raise DimensionMismatch(
                f"model was trained on views {views_name(model.space.views)} but {views_name(want)} were requested"
            )
    return model


def cmd_classify(args) -> int:
    _check_inputs([args.model, args.flows])
    _check_output(args.out)
    model = _load_model(args.model, args.views)
    flows = _read_flows(args.flows)
    lines = []
    if flows:
        P = model.predict_proba(model.space.matrix(flows))
        for f, p in zip(flows, P):
            best = int(p.argmax())
            lines.append(json.dumps({
                "scope": flow_id(f),
                "label": model.class_labels[best],
                "probs": {c: float(v) for c, v in zip(model.class_labels, p)},
            }, separators=(",", ":")))
    _write_text(args.out, "".join(line + "\n" for line in lines))
    return 0


def cmd_attribute(args) -> int:
    _check_inputs([args.model, args.flows])
    _check_output(args.out)
    model = _load_model(args.model, args.views)
    flows = _read_flows(args.flows)
    verdicts = attribute_windows(model, flows, args.window_secs, args.stride_secs)
    _write_text(args.out, "".join(v.to_json() + "\n" for v in verdicts))
    return 0


# ---------------------------------------------------------------- fingerprint / report


def cmd_fingerprint(args) -> int:
    _check_inputs([args.flows])
    _check_output(args.out)
    db = FingerprintDB.load(args.fingerprints)
    xp = SchannelConfig.load(args.xp_config)
    flows = _read_flows(args.flows)
    rows = []
    per_label: dict = {}
    for f in flows:
        if f.tls is None:
            continue
        client = fingerprint_client(f.tls, db)
        xp_hit = is_schannel_xp(f.tls, xp)
        rows.append({"scope": flow_id(f), "label": f.label, "client": client, "schannel_xp": xp_hit})
        per_label.setdefault(f.label if f.label is not None else "unlabeled", []).append((client, xp_hit))
    summary = {
        label: {
            "tls_flows": len(items),
            "clients": histogram(c for c, _ in items),
            "schannel_xp_pct": 100.0 * sum(x for _, x in items) / len(items),
            "unknown_pct": 100.0 * sum(c == UNKNOWN for c, _ in items) / len(items),
        }
        for label, items in sorted(per_label.items())
    }
    _write_text(args.out, _dumps({"xp_config": xp.version, "labels": summary, "flows": rows}))
    return 0


def cmd_report(args) -> int:
    _check_inputs([args.flows])
    _check_output(args.out)
    _check_output(args.similarity_csv)
    registry = CodeRegistry.load(args.registry)
    xp = SchannelConfig.load(args.xp_config) if (args.exclude_xp or args.xp_config) else None
    flows = _read_flows(args.flows)
    rep = build_report(flows, registry, xp, args.exclude_xp)
    rep["seed"] = args.seed
    _write_text(args.out, render_text(rep) if args.format == "text" else _dumps(rep))
    if args.similarity_csv:
        profiles, S = similarity(flows, args.similarity_lambda)
        buf = io.StringIO(newline="")
        write_similarity_csv(buf, profiles, S)
        _write_text(args.similarity_csv, buf.getvalue())
    return 0


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    _check_output(args.out)
    _check_output(args.label_map)
    profiles = load_profiles(args.profiles)
    if args.mix:
        weights = {}
        for item in args.mix.split(","):
            name, _, w = item.partition("=")
            weights[name.strip()] = float(w)
        for p in profiles:
            p.mix = weights.get(p.label, 0.0)
    flows = generate(profiles, args.n, args.seed)
    if args.format == "pcap":
        fp = _open_out(args.out, binary=True)
        try:
            fp.write(write_pcap(flows))
            fp.flush()
        finally:
            if fp is not sys.stdout.buffer:
                fp.close()
    else:
        fp = _open_out(args.out)
        try:
            write_jsonl(flows, fp)
            fp.flush()
        finally:
            if fp is not sys.stdout:
                fp.close()
    if args.label_map:
        _write_text(args.label_map, "".join(
            json.dumps({"sa": f.sa, "sp": f.sp, "da": f.da, "dp": f.dp, "start_us": f.start_us, "label": f.label}) + "\n"
            for f in flows
        ))
    _log({"flows": len(flows), "seed": args.seed, "labels": dict(sorted(Counter(f.label for f in flows).items()))})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tlscope", description="Detect and attribute malicious TLS flows from passive metadata.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output path ('-' for stdout)"):
        p.add_argument("--out", default="-", help=out_help)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = common(sub.add_parser("extract", help="pcap files to flow JSON Lines"), "output file or directory")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--idle-timeout", type=float, default=300.0)
    p.add_argument("--label", default=None, help="label attached to every extracted flow")
    p.add_argument("--label-map", default=None, help="JSON Lines of {sa, sp, da, dp, start_us, label}")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = common(sub.add_parser("train", help="cross-validate and fit a model"), "model file")
    p.add_argument("flows")
    p.add_argument("--views", default="Meta+SPLT+BD+TLS+SS")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--lambda-grid", default=None, help="comma-separated l1 strengths")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--ablate", action="store_true", help="also evaluate the four standard view sets")
    p.add_argument("--report", default=None, help="write the evaluation report (JSON) here")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("classify", cmd_classify, "per-flow verdicts"), ("attribute", cmd_attribute, "per-host window verdicts")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("model")
        p.add_argument("flows")
        p.add_argument("--views", default=None, help="assert the model was trained on these views")
        if name == "attribute":
            p.add_argument("--window-secs", type=float, default=300.0)
            p.add_argument("--stride-secs", type=float, default=None)
        p.set_defaults(func=func)

    p = common(sub.add_parser("fingerprint", help="client fingerprints and XP SChannel matches"))
    p.add_argument("flows")
    p.add_argument("--fingerprints", default=None)
    p.add_argument("--xp-config", default=None)
    p.set_defaults(func=cmd_fingerprint)

    p = common(sub.add_parser("report", help="prevalence tables per label"))
    p.add_argument("flows")
    p.add_argument("--registry", default=None)
    p.add_argument("--xp-config", default=None)
    p.add_argument("--exclude-xp", action="store_true")
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.add_argument("--similarity-csv", default=None)
    p.add_argument("--similarity-lambda", type=float, default=1.0)
    p.set_defaults(func=cmd_report)

    p = common(sub.add_parser("synth", help="generate a labeled synthetic corpus"))
    p.add_argument("--profiles", default=None)
    p.add_argument("-n", "--n", type=int, default=1000)
    p.add_argument("--format", choices=("jsonl", "pcap"), default="jsonl")
    p.add_argument("--mix", default=None, help="label=weight,... overriding profile mix")
    p.add_argument("--label-map", default=None, help="also write flow keys and labels here")
    p.set_defaults(func=cmd_synth)
    return parser


def _apply_config(parser: argparse.ArgumentParser) -> None:
    path = os.environ.get(CONFIG_ENV)
    if not path:
        return
    with open(path) as fp:
        try:
            config = json.load(fp)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{CONFIG_ENV} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise UsageError(f"{CONFIG_ENV} must hold a JSON object")
    config = {k.replace("-", "_"): v for k, v in config.items()}
    if "lambda" in config:
        config["lam"] = config.pop("lambda")
    for action in parser._subparsers._group_actions:  # one _SubParsersAction
        for sp in action.choices.values():
            known = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in config.items() if k in known})


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        _apply_config(parser)
        args = parser.parse_args(argv)
        return args.func(args)
    except (TlscopeError, UsageError, ValueError, KeyError) as exc:
        return _fail(exc, EXIT_DATA)
    except OSError as exc:
        return _fail(exc, EXIT_IO)


def _fail(exc: Exception, code: int) -> int:
    _log({"error": type(exc).__name__, "message": str(exc), "exit": code})
    return code


if __name__ == "__main__":
    sys.exit(main())

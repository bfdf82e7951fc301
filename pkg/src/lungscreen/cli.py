"""Batch command line: ingest -> qc -> dedup -> featurize -> train -> predict -> evaluate/compare/sweep.

Every stage reads and writes plain files so stages can be run, inspected and
re-run independently. Per-volume failures are reported as rows and never
abort a batch. Exit codes: 0 success, 1 usage error, 2 fatal I/O or format error.
"""
from __future__ import annotations

import argparse
import csv
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gbdt, metrics
from .encode import detect_nodules, read_nodules, synthetic_detector, write_nodules
from .errors import LungScreenError, TooFewSlices
from .fingerprint import DEFAULT_EDGES, find_overlaps, fingerprint, write_fingerprints
from .ingest import load_volume, save_desk_volume
from .pyramid import default_scheme, feature_names, load_scheme, pool, read_feature_csv, write_feature_csv
from .qc import QcPolicy, qc_gate
from .volume import Extent

EXIT_OK, EXIT_USAGE, EXIT_FATAL = 0, 1, 2


class FatalError(Exception):
    """Unrecoverable input problem; reported and mapped to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- files -----------------------------------------------------------------

def load_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment. Keys use option names."""
    cfg = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FatalError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FatalError(f"{path}:{lineno}: expected key = value")
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


# ids become file names under --out
_SAFE_ID = re.compile(r"[A-Za-z0-9_-][A-Za-z0-9._-]*")


def read_manifest(path) -> list[tuple[str, Path, int | None]]:
    """CSV with header ``volume_id,path[,label]``; paths are relative to the manifest."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FatalError(f"cannot read manifest {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if not {"volume_id", "path"} <= set(reader.fieldnames):
            raise FatalError(f"{path}: manifest header must include volume_id and path")
        entries, seen = [], set()
        for row in reader:
            vid = (row["volume_id"] or "").strip()
            if not _SAFE_ID.fullmatch(vid):
                raise FatalError(f"{path}: volume_id {vid!r} must be letters, digits, '.', '_' or '-'")
            if vid in seen:
                raise FatalError(f"{path}: duplicate volume_id {vid!r}")
            seen.add(vid)
            label = (row.get("label") or "").strip()
            if label not in ("", "0", "1"):
                raise FatalError(f"{path}: label for {vid!r} must be 0 or 1")
            entries.append((vid, (path.parent / row["path"].strip()), int(label) if label else None))
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["volume_id", "path", "label"])
        for vid, rel, label in entries:
            w.writerow([vid, rel, "" if label is None else label])


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_labels(path) -> dict[str, int]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FatalError(f"cannot read labels {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["volume_id", "label"]:
            raise FatalError(f"{path}: expected header volume_id,label")
        out = {}
        for row in reader:
            if row:
                if row[1] not in ("0", "1"):
                    raise FatalError(f"{path}: label for {row[0]!r} must be 0 or 1")
                out[row[0]] = int(row[1])
    return out


def _read_features(path):
    try:
        return read_feature_csv(path)
    except OSError as exc:
        raise FatalError(f"cannot read features {path}: {exc}") from None
    except ValueError as exc:
        raise FatalError(str(exc)) from None


def _read_predictions(path):
    try:
        return metrics.read_predictions(path)
    except OSError as exc:
        raise FatalError(f"cannot read predictions {path}: {exc}") from None
    except (ValueError, LungScreenError) as exc:
        raise FatalError(f"{path}: {exc}") from None


def _pmap(fn, items, jobs):
    """Order-preserving map over a bounded thread pool."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool_:
        return list(pool_.map(fn, items))


def _describe(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands --------------------------------------------------------------

def cmd_ingest(args) -> int:
    entries = read_manifest(args.manifest)
    out = _out(args)
    (out / "volumes").mkdir(exist_ok=True)

    def work(entry):
        vid, path, label = entry
        try:
            vol = load_volume(path)
        except (LungScreenError, OSError, ValueError) as exc:
            return vid, label, None, _describe(exc)
        save_desk_volume(vol, out / "volumes" / f"{vid}.hdr")
        return vid, label, vol, ""

    results = _pmap(work, entries, args.jobs)
    report, manifest = [], []
    for vid, label, vol, err in results:
        if vol is None:
            report.append([vid, "ERROR", err])
        else:
            report.append([vid, "OK", f"{vol.num_slices} slices {vol.rows}x{vol.cols}"])
            manifest.append((vid, f"volumes/{vid}.hdr", label))
    _write_rows(out / "ingest_report.csv", ["volume_id", "status", "detail"], report)
    write_manifest(out / "manifest.csv", manifest)
    n_ok = sum(r[1] == "OK" for r in report)
    print(f"ingest: {n_ok} OK, {len(report) - n_ok} error(s)")
    for row in report:
        if row[1] == "ERROR":
            print(f"  {row[0]}: {row[2]}")
    return EXIT_OK


def cmd_qc(args) -> int:
    entries = read_manifest(args.manifest)
    policy = QcPolicy(args.gap_factor, args.jitter_tol, args.min_slices)
    out = _out(args)
    (out / "volumes").mkdir(exist_ok=True)

    def work(entry):
        vid, path, label = entry
        try:
            vol = load_volume(path)
        except (LungScreenError, OSError, ValueError) as exc:
            return vid, label, None, _describe(exc)
        report, cleaned = qc_gate(vol, policy, volume_id=vid)
        if cleaned is not None:
            save_desk_volume(cleaned, out / "volumes" / f"{vid}.hdr")
        return vid, label, report, ""

    results = _pmap(work, entries, args.jobs)
    records, errors, manifest = [], [], []
    for vid, label, report, err in results:
        if report is None:
            errors.append([vid, err])
            continue
        records.append(report.to_record())
        if report.accepted:
            manifest.append((vid, f"volumes/{vid}.hdr", label))
    _write_rows(out / "qc_report.csv", ["volume_id", "verdict", "reasons", "duplicates_removed", "median_spacing_mm"], records)
    _write_rows(out / "qc_errors.csv", ["volume_id", "detail"], errors)
    write_manifest(out / "manifest.csv", manifest)
    print(f"qc: {len(manifest)} accepted, {len(records) - len(manifest)} rejected, {len(errors)} unreadable")
    for rec in records:
        if rec[1] != "Accept" or rec[3] != "0" or rec[2]:
            print(f"  {rec[0]}: {rec[1]} [{rec[2]}] duplicates_removed={rec[3]}")
    return EXIT_OK


def _fingerprint_cohort(entries, edges, jobs):
    def work(entry):
        vid, path, _ = entry
        try:
            return vid, fingerprint(load_volume(path), edges, volume_id=vid), ""
        except TooFewSlices as exc:
            return vid, None, f"TooFewSlices: {exc}"
        except (LungScreenError, OSError, ValueError) as exc:
            return vid, None, _describe(exc)

    results = _pmap(work, entries, jobs)
    return [fp for _, fp, _ in results if fp is not None], [[vid, err] for vid, fp, err in results if fp is None]


def cmd_dedup(args) -> int:
    out = _out(args)
    edges = [float(v) for v in args.edges.split(",")] if args.edges else DEFAULT_EDGES
    path_a = Path(args.manifest_a).resolve()
    path_b = Path(args.manifest_b).resolve() if args.manifest_b else path_a
    self_mode = path_a == path_b
    fps_a, err_a = _fingerprint_cohort(read_manifest(path_a), edges, args.jobs)
    fps_b, err_b = (fps_a, []) if self_mode else _fingerprint_cohort(read_manifest(path_b), edges, args.jobs)
    report = find_overlaps(fps_a, fps_b, args.threshold, self_comparison=self_mode)

    write_fingerprints(out / "fingerprints_a.csv", fps_a)
    if not self_mode:
        write_fingerprints(out / "fingerprints_b.csv", fps_b)
    _write_rows(out / "overlaps.csv", ["id_a", "id_b", "mse"], [[a, b, repr(m)] for a, b, m in report.pairs])
    _write_rows(
        out / "dedup_errors.csv",
        ["cohort", "volume_id", "detail"],
        [["a", *e] for e in err_a] + [["b", *e] for e in err_b],
    )
    summary = [
        f"self_comparison={self_mode}",
        f"threshold={args.threshold!r}",
        f"fingerprinted_a={len(fps_a)}",
        f"fingerprinted_b={len(fps_b)}",
        f"pairs={len(report.pairs)}",
        f"min_nonmatch_mse={report.min_nonmatch_mse!r}",
    ]
    (out / "dedup_summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    for vid, err in err_a + err_b:
        print(f"  {vid}: {err}")
    for a, b, m in report.pairs:
        print(f"  {a},{b},{m!r}")
    return EXIT_OK


def _scheme(args):
    return load_scheme(args.scheme) if args.scheme else default_scheme()


def cmd_featurize(args) -> int:
    if args.detector != "synthetic":
        raise FatalError(f"unknown detector {args.detector!r}")
    entries = read_manifest(args.manifest)
    scheme = _scheme(args)
    out = _out(args)

    def detector(vol):
        return synthetic_detector(vol, hu_threshold=args.hu_threshold)

    def work(entry):
        vid, path, label = entry
        try:
            vol = load_volume(path)
            nodules = detect_nodules(vol, detector)
            extent = vol.extent()
            return vid, label, nodules, extent, pool(nodules, scheme, extent, args.include_location), ""
        except (LungScreenError, OSError, ValueError) as exc:
            return vid, label, None, None, None, _describe(exc)

    results = _pmap(work, entries, args.jobs)
    ok = [r for r in results if r[4] is not None]
    names = feature_names(scheme, args.include_location)
    width = len(names)
    write_feature_csv(
        out / "features.csv", [r[0] for r in ok], np.array([r[4] for r in ok]).reshape(len(ok), width), names
    )
    write_nodules(out / "nodules.csv", [(r[0], r[2]) for r in ok])
    _write_rows(
        out / "extents.csv",
        ["volume_id", "x0", "y0", "z0", "x1", "y1", "z1"],
        [[r[0], *(repr(float(v)) for v in (*r[3].lo, *r[3].hi))] for r in ok],
    )
    if any(r[1] is not None for r in ok):
        _write_rows(out / "labels.csv", ["volume_id", "label"], [[r[0], r[1]] for r in ok if r[1] is not None])
    _write_rows(
        out / "featurize_report.csv",
        ["volume_id", "status", "nodules", "detail"],
        [[r[0], "OK" if r[4] is not None else "DetectionFailed", len(r[2]) if r[2] is not None else "", r[5]] for r in results],
    )
    print(f"featurize: {len(ok)} feature rows ({width} values each), {len(results) - len(ok)} failure(s)")
    return EXIT_OK


def _aligned_labels(ids, labels_path):
    labels = read_labels(labels_path)
    missing = [i for i in ids if i not in labels]
    if missing:
        raise FatalError(f"labels missing for {len(missing)} volume(s), e.g. {missing[0]!r}")
    return np.array([labels[i] for i in ids], dtype=float)


def cmd_train(args) -> int:
    ids, X = _read_features(args.features)
    y = _aligned_labels(ids, args.labels)
    if len(ids) < 2:
        raise FatalError("training needs at least two feature rows")
    config = gbdt.TrainConfig(args.rounds, args.learning_rate, args.max_depth, args.min_samples_leaf, args.seed)
    model = gbdt.train(X, y, config)
    out = _out(args)
    (out / "model.bin").write_bytes(gbdt.save_model(model))
    (out / "model.txt").write_text(gbdt.dump_model(model))
    _write_rows(out / "train_log.csv", ["round", "log_loss"], [[k, repr(v)] for k, v in enumerate(model.train_loss)])
    print(
        f"train: {len(model.trees)} trees on {X.shape[0]}x{X.shape[1]}; "
        f"log-loss {model.train_loss[0]:.4f} -> {model.train_loss[-1]:.4f}"
    )
    return EXIT_OK


def _load_model(path):
    try:
        return gbdt.load_model(Path(path).read_bytes())
    except OSError as exc:
        raise FatalError(f"cannot read model {path}: {exc}") from None


def _read_extents(path) -> dict[str, Extent]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if row:
                v = [float(x) for x in row[1:7]]
                out[row[0]] = Extent(tuple(v[:3]), tuple(v[3:]))
    return out


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    ids, X = _read_features(args.features)
    if args.mode == gbdt.WHOLE:
        scores = gbdt.predict(model, X) if ids else np.empty(0)
    else:
        if not (args.nodules and args.extents):
            raise FatalError("--mode max-nodule needs --nodules and --extents")
        nodules = read_nodules(args.nodules)
        extents = _read_extents(args.extents)
        scheme = _scheme(args)
        missing = [i for i in ids if i not in extents]
        if missing:
            raise FatalError(f"no extent for {missing[0]!r}")
        scores = np.array(
            [gbdt.patient_score(model, nodules.get(i, []), scheme, extents[i], gbdt.MAX_NODULE, args.include_location) for i in ids]
        )
    labels = read_labels(args.labels) if args.labels else {}
    out = _out(args)
    rows = [[i, repr(float(s)), labels.get(i, "")] for i, s in zip(ids, scores)]
    _write_rows(out / "predictions.csv", ["id", "score", "label"], rows)
    print(f"predict: {len(rows)} scores ({args.mode})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    preds = _read_predictions(args.predictions)
    report = metrics.EvalReport.from_predictions(preds, args.threshold)
    out = _out(args)
    (out / "report.txt").write_text(report.to_text())
    table = report.table()
    (out / "table.txt").write_text(table)
    if report.roc is not None:
        metrics.write_curve_csv(out / "roc.csv", report.roc, "fpr", "tpr")
    if report.pr is not None:
        metrics.write_curve_csv(out / "pr.csv", report.pr, "recall", "precision")
    print(table, end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = _read_predictions(args.predictions_a)
    b = _read_predictions(args.predictions_b)
    try:
        sa, sb, y = metrics.align(a, b)
        result = metrics.delong_test(sa, sb, y)
    except (ValueError, LungScreenError) as exc:
        raise FatalError(str(exc)) from None
    lines = [
        f"auc_a={result.auc_a!r}",
        f"auc_b={result.auc_b!r}",
        f"auc_diff={result.auc_a - result.auc_b!r}",
        f"z={result.z!r}",
        f"p_value={result.p_value!r}",
    ]
    out = _out(args)
    (out / "compare.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_sweep(args) -> int:
    preds = _read_predictions(args.predictions)
    try:
        result = metrics.threshold_sweep(preds, args.objective)
    except LungScreenError as exc:
        raise FatalError(str(exc)) from None
    c = result.counts
    lines = [
        f"objective={result.objective}",
        f"best_threshold={result.threshold!r}",
        f"best_value={result.value!r}",
        f"accuracy={metrics.accuracy(c)!r}",
        f"sensitivity={metrics.sensitivity(c)!r}",
        f"specificity={metrics.specificity(c)!r}",
        f"tp={c.tp}",
        f"tn={c.tn}",
        f"fp={c.fp}",
        f"fn={c.fn}",
    ]
    out = _out(args)
    (out / "sweep.txt").write_text("\n".join(lines) + "\n")
    _write_rows(out / "sweep.csv", ["threshold", result.objective],
                [[repr(float(t)), repr(float(v))] for t, v in zip(result.candidates, result.values)])
    print("\n".join(lines))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import make_cohort

    out = _out(args)
    (out / "volumes").mkdir(exist_ok=True)
    cohort = make_cohort(args.n_cancer, args.n_benign, seed=args.seed)
    for m in cohort:
        save_desk_volume(m.volume, out / "volumes" / f"{m.volume_id}.hdr")
    write_manifest(out / "manifest.csv", [(m.volume_id, f"volumes/{m.volume_id}.hdr", m.label) for m in cohort])
    print(f"synth: {len(cohort)} phantom volumes written to {out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="flat key = value file; command-line flags override it")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for per-volume stages")
    p.add_argument("--seed", type=int, default=0)


def _scheme_opts(p):
    p.add_argument("--scheme", help="region scheme file, one 'x0 y0 z0 x1 y1 z1' box per line")
    p.add_argument("--include-location", action="store_true", help="append normalised centre to region vectors")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lungscreen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse DICOM series / desk volumes into desk format")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("qc", help="remove duplicate slices and reject volumes with gaps")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--gap-factor", type=float, default=1.5)
    p.add_argument("--jitter-tol", type=float, default=0.05)
    p.add_argument("--min-slices", type=int, default=20)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("dedup", help="fingerprint two cohorts and list overlapping scans")
    _common(p)
    p.add_argument("--manifest-a", required=True)
    p.add_argument("--manifest-b", help="second cohort (omit to compare cohort A with itself)")
    p.add_argument("--threshold", type=float, default=0.001, help="pairs with MSE below this match")
    p.add_argument("--edges", help="comma-separated HU bin edges (default: the 21 standard edges)")
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("featurize", help="detect nodules and pool them into fixed-length vectors")
    _common(p)
    _scheme_opts(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--detector", default="synthetic", choices=["synthetic"])
    p.add_argument("--hu-threshold", type=float, default=-400.0)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="fit the boosted-tree classifier")
    _common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--min-samples-leaf", type=int, default=5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score volumes with a trained model")
    _common(p)
    _scheme_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels")
    p.add_argument("--mode", choices=[gbdt.WHOLE, gbdt.MAX_NODULE], default=gbdt.WHOLE)
    p.add_argument("--nodules", help="nodules.csv from featurize (max-nodule mode)")
    p.add_argument("--extents", help="extents.csv from featurize (max-nodule mode)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="confusion metrics, AUC, AUPRC, log-loss and curves")
    _common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="DeLong test between two prediction files")
    _common(p)
    p.add_argument("--predictions-a", required=True)
    p.add_argument("--predictions-b", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="find the threshold maximising accuracy or Youden")
    _common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--objective", choices=[metrics.ACCURACY, metrics.YOUDEN], default=metrics.ACCURACY)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a labelled synthetic phantom cohort")
    _common(p)
    p.add_argument("--n-cancer", type=int, default=20)
    p.add_argument("--n-benign", type=int, default=20)
    p.set_defaults(func=cmd_synth)
    return parser


def _config_path(argv) -> str | None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def _config_defaults(parser: argparse.ArgumentParser, cfg: dict[str, str]) -> dict:
    defaults = {}
    for action in parser._actions:
        if action.dest not in cfg or action.dest in ("config", "help"):
            continue
        value = cfg[action.dest]
        if isinstance(action, argparse._StoreTrueAction):
            value = value.lower() in ("1", "true", "yes", "on")
        defaults[action.dest] = value
    return defaults


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config_path = _config_path(argv)
        if config_path:
            cfg = load_config(config_path)
            for sp in parser._subparsers._group_actions[0].choices.values():
                sp.set_defaults(**_config_defaults(sp, cfg))
        args = parser.parse_args(argv)
        if args.jobs < 1:
            parser.error("--jobs must be >= 1")
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except FatalError as exc:
        print(f"lungscreen: error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (OSError, LungScreenError, ValueError) as exc:
        print(f"lungscreen: error: {_describe(exc)}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())

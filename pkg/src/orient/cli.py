"""``orient`` command line: build databases, retrieve, synthesize tasks, train, evaluate, benchmark."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import evalbench as eb
from . import refdb
from .errors import FormatError, IoError, OrientError
from .features import ExtractorConfig, FeaturePyramid, extract, load_pyramid, save_pyramid
from .fusion import Variant, init_params, load_params, save_params
from .gradcheck import run_gradcheck
from .nce import FitConfig, fit_fusion
from .preproc import NormConfig, load_image, read_pnm, to_gray_resized
from .retrieval import FastConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
GRAD_TOL = 1e-3
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")
QUERY_COLUMNS = ["query_id", "category", "file"] + refdb.MANIFEST_COLUMNS[1:]
PRESETS = {"standard": eb.standard_task, "outlier": eb.outlier_task, "noiseless": eb.noiseless_task}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _variant(text: str) -> Variant:
    try:
        return Variant.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _scales(text: str) -> tuple[tuple[int, int], ...]:
    try:
        dims = tuple(tuple(int(v) for v in part.lower().split("x")) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}; expected e.g. 13x13,26x26,52x52") from None
    if any(len(d) != 2 for d in dims):
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}; expected e.g. 13x13,26x26,52x52")
    return dims


def _print_config(name: str, args: argparse.Namespace) -> None:
    cfg = {k: (v.value if isinstance(v, Variant) else v) for k, v in vars(args).items() if k != "func"}
    print(f"# {name} config: {json.dumps(cfg, sort_keys=True, default=str)}")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------- build-db


def _numbered_files(directory: Path, suffixes: tuple[str, ...]) -> dict[int, Path]:
    if not directory.is_dir():
        raise IoError(f"not a directory: {directory}")
    out = {}
    for p in directory.iterdir():
        if p.suffix.lower() in suffixes and p.stem.isdigit():
            out[int(p.stem)] = p
    return out


def cmd_build_db(args) -> int:
    dirs = args.pyramids or args.images
    if len(dirs) != len(args.rotations):
        raise UsageError(f"{len(dirs)} object directories but {len(args.rotations)} rotation manifests")
    cfg = ExtractorConfig(args.scales, args.channels)
    sources = []
    for directory, manifest in zip(dirs, args.rotations):
        if not Path(manifest).is_file():
            raise IoError(f"rotation manifest not found: {manifest}")
        indices, rots = refdb.read_rotation_manifest(manifest)
        files = _numbered_files(Path(directory), (".fpyr",) if args.pyramids else IMAGE_SUFFIXES)
        missing = [i for i in indices if i not in files]
        if missing:
            raise IoError(f"{directory}: no file for reference index {missing[0]}")
        label = Path(directory).name
        if args.pyramids:
            sources.append(refdb.ObjectSource(label, rots, pyramids=[load_pyramid(files[i]) for i in indices]))
        else:
            imgs = np.stack([to_gray_resized(read_pnm(files[i])) for i in indices])
            sources.append(refdb.ObjectSource(label, rots, images=imgs))
    db = refdb.build(sources, args.kac, cfg if args.images else None)
    refdb.save(db, args.out)
    sizes = [o.size for o in db.objects]
    print(f"wrote {args.out}: N={len(db)} R={sizes[0] if len(set(sizes)) == 1 else sizes} k_ac={args.kac}")
    return EXIT_OK


# ---------------------------------------------------------------- retrieve


def _load_query(path: Path, db: refdb.ReferenceDB) -> FeaturePyramid:
    if path.suffix.lower() == ".fpyr":
        return load_pyramid(path)
    if path.suffix.lower() in IMAGE_SUFFIXES:
        return extract(load_image(path, NormConfig()), db.config)
    raise FormatError(f"{path}: expected a .fpyr pyramid or a PGM/PPM image")


def _load_params(args):
    if args.variant.learned and args.params is None:
        raise UsageError(f"variant {args.variant.value!r} needs --params")
    return load_params(args.params) if args.params else None


def cmd_retrieve(args) -> int:
    db = refdb.load(args.db)
    params = _load_params(args)
    query = _load_query(Path(args.query), db)
    res = eb.retrieve(query, db, args.method, args.variant, params, FastConfig(k_local=args.klocal))
    print(f"category: {res.category}")
    print(f"ref_index: {res.ref_index}")
    print("rotation:")
    for row in res.rotation:
        print("  " + " ".join(f"{v: .6f}" for v in row))
    print(f"score: {res.score:.6f}")
    print(f"comparisons: {res.comparisons}")
    print(f"elapsed_s: {res.elapsed:.4f}")
    if args.json:
        _write(Path(args.json), json.dumps(res.to_dict(), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- synth


def _task_from_args(args) -> eb.SynthTask:
    return eb.SynthTask(
        seed=args.seed,
        n_objects=args.objects,
        n_refs=args.refs,
        n_queries=args.queries,
        noise=args.noise,
        perturb_deg=args.perturb_deg,
        illumination=args.illumination,
        outlier_fraction=args.outliers,
        k_ac=args.kac,
    )


def save_queries(queries, out_dir: Path) -> None:
    qdir = out_dir / "queries"
    qdir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "queries.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(QUERY_COLUMNS)
        for q in queries:
            name = f"queries/{q.query_id:05d}.fpyr"
            save_pyramid(q.pyramid, out_dir / name)
            w.writerow([q.query_id, q.category, name] + [repr(float(v)) for v in np.asarray(q.rotation).ravel()])


def load_queries(path: Path) -> list[eb.Query]:
    """Queries written by ``synth``: a directory holding queries.csv, or the CSV itself."""
    path = Path(path)
    table = path / "queries.csv" if path.is_dir() else path
    if not table.is_file():
        raise IoError(f"query table not found: {table}")
    out = []
    with open(table, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != QUERY_COLUMNS:
            raise FormatError(f"{table}: expected columns {','.join(QUERY_COLUMNS)}")
        for row in reader:
            rot = np.array([float(row[c]) for c in QUERY_COLUMNS[3:]]).reshape(3, 3)
            pyr = load_pyramid(table.parent / row["file"])
            out.append(eb.Query(int(row["query_id"]), -1, row["category"], rot, pyr))
    return out


def _load_task(spec: str, seed: int) -> eb.SynthTask:
    """A preset name (seeded by ``seed``) or a stored task, which keeps its own seed."""
    if spec in PRESETS:
        return PRESETS[spec](seed=seed)
    path = Path(spec)
    path = path / "task.json" if path.is_dir() else path
    if not path.is_file():
        raise IoError(f"task file not found: {path}")
    try:
        return eb.SynthTask.from_dict(json.loads(path.read_text()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def cmd_synth(args) -> int:
    task = _task_from_args(args)
    data = eb.gen_task(task)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "task.json", json.dumps(task.to_dict(), indent=2))
    refdb.save(data.db(), out / "db.ordb")
    save_queries(data.queries, out)
    print(f"wrote {out}: N={task.n_objects} R={task.n_refs} queries={task.n_queries}")
    return EXIT_OK


# ---------------------------------------------------------------- train-fusion


def cmd_train_fusion(args) -> int:
    task = _load_task(args.task, args.seed)
    data = eb.gen_task(task)
    train = eb.make_training_set(data, args.anchors, args.batch_size)
    init = init_params(len(task.scale_dims), task.channels, args.hidden, seed=args.seed)
    cfg = FitConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                    weighted=not args.unweighted, variant=args.variant)
    fit = fit_fusion(train, cfg, init)
    save_params(fit.params, args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    _write(loss_csv, fit.history_csv())
    final = fit.history[-1] if fit.history else fit.initial_loss
    print(f"wrote {args.out} and {loss_csv}: initial loss {fit.initial_loss:.6f}, final {final:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    db = refdb.load(args.db)
    params = _load_params(args)
    queries = load_queries(Path(args.queries))
    rep = eb.evaluate(db, queries, args.method, args.variant, params, FastConfig(k_local=args.klocal),
                      args.threshold_deg, config={"queries": str(args.queries)})
    print(rep.summary_json())
    if args.out:
        _write(Path(args.out), rep.summary_json() + "\n")
    if args.records:
        _write(Path(args.records), rep.records_csv())
    return EXIT_OK


# ---------------------------------------------------------------- bench


def _agreement(a, b) -> float:
    return float(np.mean([x.pred_category == y.pred_category and x.ref_index == y.ref_index
                          for x, y in zip(a.records, b.records)]))


def cmd_bench(args) -> int:
    task = _load_task(args.task, args.seed)
    out = Path(args.out_dir)
    if args.sweep == "refs":
        rows = eb.sweep_refs(task, args.ref_counts, method=args.method)
    elif args.sweep == "variant":
        rows = eb.run_ablation(task, epochs=args.epochs, seed=args.seed)
    else:
        data = eb.gen_task(task)
        db = data.db()
        reps = {m: eb.evaluate(db, data.queries, m, Variant.AVERAGE) for m in ("greedy", "fast")}
        agree = _agreement(reps["greedy"], reps["fast"])
        rows = [{"method": m, **{k: r.summary[k] for k in ("class_acc", "rota_acc", "mean_comparisons", "mean_elapsed_s")},
                 "agreement_with_greedy": 1.0 if m == "greedy" else agree} for m, r in reps.items()]
    _write(out / f"sweep_{args.sweep}.json", json.dumps({"task": task.to_dict(), "rows": rows}, indent=2) + "\n")
    _write(out / f"sweep_{args.sweep}.csv", eb.rows_csv(rows))
    print(eb.rows_csv(rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    rep = run_gradcheck(args.seed, args.instances)
    for name, err in rep.fusion_max.items():
        print(f"fusion[{name}] max_rel_err {err:.3e}")
    print(f"loss max_rel_err {rep.loss_max:.3e}")
    ok = rep.max_rel_err < GRAD_TOL
    print(f"max_rel_err {rep.max_rel_err:.3e} {'<' if ok else '>='} 1e-3")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="orient", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
        sp.set_defaults(func=func)
        return sp

    def retrieval_flags(sp):
        sp.add_argument("--method", choices=["greedy", "fast"], default="fast")
        sp.add_argument("--variant", type=_variant, default=Variant.AVERAGE,
                        help="adaptive, average, sigmoid or softmax (default average)")
        sp.add_argument("--params", type=Path, help="FPRM fusion parameters (learned variants)")
        sp.add_argument("--klocal", type=int, default=32, help="FPS candidates per refinement step")

    sp = add("build-db", cmd_build_db, "build a reference database from per-object directories")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", nargs="+", type=Path, help="one directory of <index>.pgm/.ppm per object")
    src.add_argument("--pyramids", nargs="+", type=Path, help="one directory of <index>.fpyr per object")
    sp.add_argument("--rotations", nargs="+", type=Path, required=True, help="one CSV manifest per object")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--kac", type=int, default=128)
    sp.add_argument("--scales", type=_scales, default=ExtractorConfig().scale_dims)
    sp.add_argument("--channels", type=int, default=8)

    sp = add("retrieve", cmd_retrieve, "estimate the category and rotation of one query")
    sp.add_argument("--db", type=Path, required=True)
    sp.add_argument("--query", type=Path, required=True, help=".fpyr pyramid or PGM/PPM image")
    retrieval_flags(sp)
    sp.add_argument("--json", type=Path, help="also write the result as JSON")

    sp = add("synth", cmd_synth, "write a synthetic task: task.json, db.ordb and queries")
    sp.add_argument("--objects", type=int, default=4)
    sp.add_argument("--refs", type=int, default=2000)
    sp.add_argument("--queries", type=int, default=200)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--outliers", type=float, default=0.0)
    sp.add_argument("--perturb-deg", type=float, default=0.0)
    sp.add_argument("--illumination", type=float, default=0.0)
    sp.add_argument("--kac", type=int, default=128)
    sp.add_argument("--out-dir", type=Path, required=True)

    sp = add("train-fusion", cmd_train_fusion, "fit fusion parameters on a synthetic task")
    sp.add_argument("--task", required=True, help="task.json, a synth output directory, or standard|outlier|noiseless")
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--variant", type=_variant, default=Variant.ADAPTIVE)
    sp.add_argument("--anchors", type=int, default=64)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--hidden", type=int, default=64)
    sp.add_argument("--unweighted", action="store_true", help="plain infoNCE (all pair weights 1)")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--loss-csv", type=Path, help="default: <out>.loss.csv")

    sp = add("eval", cmd_eval, "evaluate a database on a stored query set")
    sp.add_argument("--db", type=Path, required=True)
    sp.add_argument("--queries", type=Path, required=True, help="synth output directory or its queries.csv")
    retrieval_flags(sp)
    sp.add_argument("--threshold-deg", type=float, default=eb.DEFAULT_THRESHOLD_DEG)
    sp.add_argument("--out", type=Path, help="summary JSON path")
    sp.add_argument("--records", type=Path, help="per-query CSV path")

    sp = add("bench", cmd_bench, "accuracy/cost sweeps over reference count, fusion variant or method")
    sp.add_argument("--task", default="standard", help="task.json, a synth output directory, or a preset")
    sp.add_argument("--sweep", choices=["refs", "variant", "method"], required=True)
    sp.add_argument("--method", choices=["greedy", "fast"], default="fast", help="method for the refs sweep")
    sp.add_argument("--ref-counts", type=int, nargs="+", default=[250, 500, 1000, 2000])
    sp.add_argument("--epochs", type=int, default=200, help="fitting epochs for the variant sweep")
    sp.add_argument("--out-dir", type=Path, default=Path("bench_out"))

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the fusion and loss gradients")
    sp.add_argument("--instances", type=int, default=1)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _print_config(args.command, args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"orient {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OrientError, OSError, ValueError) as exc:
        print(f"orient {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        sys.stdout.flush()


if __name__ == "__main__":
    raise SystemExit(main())

"""``lutforge`` command line.

Exit codes: 0 ok, 1 verification mismatch, 2 usage or configuration error,
3 data error (unreadable or malformed input files).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("lutforge")


class UsageError(Exception):
    pass


def _cap_threads() -> None:
    from .util import thread_cap

    if "LUTFORGE_THREADS" in os.environ:
        cap = str(thread_cap())
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = cap


def load_config(path) -> dict:
    import yaml

    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML/JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a mapping at top level")
    return cfg


def _dataset_spec(section: dict):
    from .data import DatasetSpec

    known = set(DatasetSpec.__dataclass_fields__)
    extra = set(section) - known - {"cache", "builtin"}
    if extra:
        raise UsageError(f"unknown data keys {sorted(extra)}")
    return DatasetSpec(**{k: v for k, v in section.items() if k in known})


def _load_data(section: dict, seed: int):
    from . import datasets, zoo
    from .data import ingest, load_cache

    if "cache" in section:
        return load_cache(section["cache"]), f"cache:{section['cache']}"
    if "builtin" in section:
        name = section["builtin"]
        if name == "jet":
            return datasets.jet_dataset(int(section.get("n", 60_000)), seed)
        if name.startswith("desk:"):
            return zoo.desk_dataset(name[5:], seed=seed), name
        raise UsageError(f"unknown builtin dataset {name!r} (jet or desk:<model>)")
    if "source" in section:
        return ingest(_dataset_spec(section)), section["source"]
    raise UsageError("config needs data.source, data.cache or data.builtin")


# -- commands ---------------------------------------------------------------

def cmd_ingest(args) -> int:
    from .data import ingest

    cfg = load_config(args.config)
    section = dict(cfg.get("data", {}))
    if args.source:
        section["source"] = args.source
    if args.label_column:
        section["label_column"] = args.label_column
    if args.seed is not None:
        section["split_seed"] = args.seed
    if "source" not in section:
        raise UsageError("ingest needs a source file (argument or data.source in --config)")
    ds = ingest(_dataset_spec(section), cache_dir=args.out)
    print(f"train {len(ds.x_train)} / val {len(ds.x_val)} / test "
          f"{0 if ds.x_test is None else len(ds.x_test)} rows, {ds.n_features} features, "
          f"{ds.n_classes} classes -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import zoo
    from .trainer import TrainConfig, train
    from .util import atomic_write_text

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    tcfg = dict(cfg.get("train", {}))
    tcfg["seed"] = seed
    if args.beta_start is not None:
        tcfg["beta_start"] = args.beta_start
    if args.beta_end is not None:
        tcfg["beta_end"] = args.beta_end
    lut = cfg.get("lut", {})
    tcfg["lut_x"] = args.lut_x if args.lut_x is not None else lut.get("x", 6)
    tcfg["lut_y"] = args.lut_y if args.lut_y is not None else lut.get("y", 5)
    try:
        train_cfg = TrainConfig(**tcfg)
    except TypeError as exc:
        raise UsageError(f"bad train section: {exc}") from None
    if "model" not in cfg:
        raise UsageError("config needs a model section (input_shape and layers)")
    try:
        model = zoo.model_from_config(cfg["model"], seed)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"bad model section: {exc}") from None
    data, source = _load_data(cfg.get("data", {}), seed)
    out = Path(args.out)
    result = train(model, data, train_cfg, out, provenance={"data": source})
    best = result.pareto.best()
    atomic_write_text(out / "model.json", result.checkpoints[best.checkpoint_id])
    print(result.pareto.to_csv(), end="")
    print(f"best: {best.checkpoint_id} ebops={best.ebops:g} val_metric={best.val_metric:.4f} "
          f"-> {out / 'model.json'}")
    return EXIT_OK


def _model_and_spec(args):
    from . import manifest
    from .estimator import LutPrimitiveSpec

    model = manifest.load(args.model)
    return model, LutPrimitiveSpec(args.lut_x if args.lut_x is not None else 6,
                                   args.lut_y if args.lut_y is not None else 5)


def cmd_compile(args) -> int:
    from . import ir
    from .lowering import lower_report
    from .util import atomic_write_text

    model, spec = _model_and_spec(args)
    program, report = lower_report(model, spec)
    out = Path(args.out)
    ir.save(program, out / "program.lfir")
    atomic_write_text(out / "report.txt", report.to_text() + "\n")
    atomic_write_text(out / "report.csv", report.to_csv())
    print(report.to_text())
    print(f"{len(program)} instructions, {len(program.tables)} tables -> {out / 'program.lfir'}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .estimator import estimate_luts, per_layer_ebops

    model, spec = _model_and_spec(args)
    per = per_layer_ebops(model, spec)
    print("layer,kind,ebops,est_luts")
    for k, (layer, e) in enumerate(zip(model.layers, per)):
        print(f"{k},{layer.kind},{e:.6f},{estimate_luts(e):.6f}")
    total = sum(per)
    print(f"total,,{total:.6f},{estimate_luts(total):.6f}")
    return EXIT_OK


def _read_values(path) -> "np.ndarray":
    import numpy as np

    from .data import DataError, load_lftd

    if str(path).endswith(".lftd"):
        return load_lftd(path).astype(np.float64)
    try:
        rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if rows:
        try:
            [float(v) for v in rows[0].split(",")]
        except ValueError:
            rows = rows[1:]  # header
    try:
        return np.array([[float(v) for v in r.split(",")] for r in rows], dtype=np.float64)
    except ValueError:
        raise DataError(f"{path}: non-numeric value") from None


def cmd_emulate(args) -> int:
    import numpy as np

    from . import ir
    from .data import DataError
    from .verify import decode

    program = ir.load(args.program)
    fmts = program.input_formats
    x = _read_values(args.inputs).reshape(-1, program.n_inputs) if program.n_inputs else None
    if x is None or x.shape[1] != len(fmts):
        raise DataError(f"inputs must have {len(fmts)} values per row")
    bits = np.zeros(x.shape, dtype=np.uint64)
    for k, f in enumerate(fmts):
        raw = np.floor(x[:, k] * 2.0 ** f.frac_bits).astype(np.int64)
        bits[:, k] = (raw & np.int64((1 << f.width) - 1)).astype(np.uint64)
    y = decode(ir.interpret_batch(program, bits), program.output_formats)
    text = "\n".join(",".join(repr(float(v)) for v in row) for row in y) + "\n"
    if args.out:
        from .util import atomic_write_text

        atomic_write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import ir, manifest
    from .lowering import lower
    from .verify import verify

    model = manifest.load(args.model)
    program = ir.load(args.program) if args.program else lower(model)
    diags = ir.validate(program)
    if diags:
        print(f"program is invalid: {diags[0]}")
        return EXIT_MISMATCH
    seed = args.seed if args.seed is not None else 0
    res = verify(model, program, args.vectors, seed)
    print(res)
    return EXIT_OK if res.ok else EXIT_MISMATCH


def cmd_emit_rtl(args) -> int:
    from . import ir, rtl

    program = ir.load(args.program)
    out = rtl.write_rtl(program, args.out, args.vectors, args.seed or 0, args.stage_depth)
    latency = (out / "latency.txt").read_text().strip()
    print(f"wrote top.v, tb_top.v, stimuli.hex, expected.hex ({args.vectors} vectors), "
          f"latency {latency} -> {out}")
    if args.simulate:
        res = rtl.simulate(out)
        print(res.log.strip().splitlines()[-1] if res.log.strip() else "")
        print("simulation passed" if res.ok else "simulation FAILED")
        return EXIT_OK if res.ok else EXIT_MISMATCH
    return EXIT_OK


def cmd_pareto(args) -> int:
    import csv

    from .data import DataError
    from .plotting import plot_pareto
    from .trainer import ParetoSet
    from .util import atomic_write_text

    src = Path(args.run)
    csv_path = src / "pareto.csv" if src.is_dir() else src
    if not csv_path.exists():
        raise DataError(f"no Pareto CSV at {csv_path}")
    try:
        front = ParetoSet.from_csv(csv_path.read_text())
    except (KeyError, ValueError) as exc:
        raise DataError(f"{csv_path} is not a Pareto CSV: {exc}") from None
    history = []
    log_path = csv_path.parent / "run_log.csv"
    if log_path.exists():
        with log_path.open(newline="") as fh:
            history = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    out = Path(args.out) if args.out else csv_path.parent
    text = front.to_csv()
    sys.stdout.write(text)
    if out.resolve() != csv_path.parent.resolve() or csv_path.name != "pareto.csv":
        atomic_write_text(out / "pareto.csv", text)
    png = plot_pareto(front.points, history, out / "pareto.png")
    print(f"{len(front)} Pareto points -> {out / 'pareto.csv'}, {png}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .rtl import DEFAULT_STAGE_DEPTH
    from .verify import DEFAULT_VECTORS

    ap = argparse.ArgumentParser(prog="lutforge", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, lut=False):
        p.add_argument("--seed", type=int, default=None)
        if lut:
            p.add_argument("--lut-x", type=int, default=None, help="physical LUT inputs (default 6)")
            p.add_argument("--lut-y", type=int, default=None, help="split LUT inputs (default 5)")

    p = sub.add_parser("ingest", help="parse, split and cache a dataset")
    p.add_argument("source", nargs="?")
    p.add_argument("--config")
    p.add_argument("--label-column")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train with a beta sweep and keep the Pareto checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    common(p, lut=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compile", help="lower a model manifest to an LFIR program and report")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    common(p, lut=True)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("estimate", help="per-layer EBOPs and LUT estimate")
    p.add_argument("model")
    common(p, lut=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("emulate", help="run a program on feature rows (CSV or LFTD)")
    p.add_argument("program")
    p.add_argument("inputs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("verify", help="check program against the float model bit-exactly")
    p.add_argument("model")
    p.add_argument("--program")
    p.add_argument("--vectors", type=int, default=DEFAULT_VECTORS)
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("emit-rtl", help="write Verilog, testbench and vectors")
    p.add_argument("program")
    p.add_argument("--out", required=True)
    p.add_argument("--vectors", type=int, default=1000)
    p.add_argument("--stage-depth", type=int, default=DEFAULT_STAGE_DEPTH)
    p.add_argument("--simulate", action="store_true", help="build and run the testbench with Verilator")
    common(p)
    p.set_defaults(func=cmd_emit_rtl)

    p = sub.add_parser("pareto", help="print the Pareto CSV and plot it")
    p.add_argument("run", help="training output directory or a pareto.csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pareto)
    return ap


def main(argv=None) -> int:
    _cap_threads()
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .data import DataError
    from .extract import ExtractionError
    from .ir import FormatError
    from .lowering import LoweringError
    from .manifest import ManifestError
    from .rtl import RtlError
    from .trainer import TrainingError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lutforge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ManifestError, FormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"lutforge: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ExtractionError, LoweringError, RtlError, TrainingError, ValueError) as exc:
        print(f"lutforge: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``mucs <subcommand> [flags]``.

Artifacts for a run live under ``<out-dir>/<run-id>/`` where ``out-dir``
defaults to ``$MUCS_ARTIFACT_ROOT`` or ``./mucs-runs``. Every subcommand
appends one entry to the run's ``manifest.json``.

Exit status: 0 ok, 1 user error, 2 internal error. Errors print a single
JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path
from typing import Sequence

from . import __version__
from .analysis import EnsembleSpec, overlap_rows, rank_ensemble, topk_overlap_across_methods
from .data import Dataset, DatasetError, GeneratedItem, build_toy_dataset
from .diffusion.config import ConfigError, build_generation_schedule
from .diffusion.snapshot import CheckpointError, ModelSnapshot
from .diffusion.training import pretrain
from .evaluation.harness import Benchmark, generate_items
from .evaluation.methods import ABLATIONS, ABLATION_LABELS, RepeatContext, make_method
from .evaluation.report import EvalReport
from .null_loss import NullLossEstimate, estimate_null_loss
from .rng import Stream
from .scoring import AttributionResult, build_noise_pair_set
from .settings import Settings, reference_text
from .unlearn import pretrain_config_of

ROOT_ENV = "MUCS_ARTIFACT_ROOT"
SUBCOMMANDS = ("make-data", "pretrain", "generate", "attribute", "eval", "ablate", "overlap", "ensemble", "report")

log = logging.getLogger("mucs")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


class Run:
    """A run directory with its append-only manifest."""

    def __init__(self, root: Path, run_id: str, settings: Settings, seed: int):
        self.dir = root / run_id
        self.run_id = run_id
        self.settings = settings
        self.seed = seed
        self.stream = Stream(seed)
        self.manifest_path = self.dir / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"run_id": self.run_id, "tool_version": __version__, "rng_root": self.seed,
                "created": time.strftime("%Y-%m-%dT%H:%M:%S"), "entries": []}

    def record(self, command: str, argv: Sequence[str], artifacts: dict, **extra) -> None:
        man = self.manifest()
        if man["rng_root"] != self.seed:
            raise UserError(f"run {self.run_id} was created with --seed {man['rng_root']}, not {self.seed}")
        man["entries"].append({"command": command, "argv": list(argv), "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
                               "config": self.settings.snapshot(), "tool_version": __version__,
                               "artifacts": {k: str(v) for k, v in artifacts.items()}, **extra})
        self.dir.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(man, indent=1))
        tmp.replace(self.manifest_path)

    def check_seed(self) -> None:
        if self.manifest_path.exists() and self.manifest()["rng_root"] != self.seed:
            raise UserError(f"run {self.run_id} uses --seed {self.manifest()['rng_root']}")

    def path(self, *parts: str) -> Path:
        return self.dir.joinpath(*parts)

    def dataset(self) -> Dataset:
        if not self.path("data", "manifest.jsonl").exists():
            raise UserError(f"run {self.run_id} has no dataset; run make-data first")
        return Dataset.load(self.path("data"))

    def f1(self) -> ModelSnapshot:
        p = self.path("models", "f1.pt")
        if not p.exists():
            raise UserError(f"run {self.run_id} has no F1 checkpoint; run pretrain first")
        return ModelSnapshot.load(p)

    def items(self) -> list[GeneratedItem]:
        p = self.path("generated", "items.jsonl")
        if not p.exists():
            raise UserError(f"run {self.run_id} has no generated items; run generate first")
        return [GeneratedItem.from_record(json.loads(line)) for line in p.read_text().splitlines()]

    def l_null(self, dataset: Dataset, f1: ModelSnapshot) -> NullLossEstimate:
        p = self.path("null_loss.json")
        if p.exists():
            return NullLossEstimate.from_record(json.loads(p.read_text()))
        s = self.settings
        est = estimate_null_loss(dataset, f1.arch, f1.loss, self.stream.child("null"),
                                 batch_size=s.int("null", "batch_size"), num_batches=s.int("null", "num_batches"))
        p.write_text(json.dumps(est.to_record()))
        return est

    def scores(self, method: str) -> list[AttributionResult]:
        d = self.path("scores", method)
        files = sorted(d.glob("*.jsonl"))
        if not files:
            raise UserError(f"no score files for method {method!r}; run attribute --method {method} first")
        return [AttributionResult.load(f) for f in files]


def _methods(values: list[str] | None, default: Sequence[str]) -> list[str]:
    out: list[str] = []
    for v in values or default:
        out += [p.strip() for p in v.split(",") if p.strip()]
    return out


def cmd_make_data(run: Run, args) -> dict:
    ds = build_toy_dataset(run.settings.data_spec())
    path = ds.save(run.path("data"))
    print(f"{len(ds)} instances -> {path}  hash {ds.manifest_hash()[:16]}")
    return {"dataset": path, "dataset_hash": ds.manifest_hash()}


def cmd_pretrain(run: Run, args) -> dict:
    s = run.settings
    ds = run.dataset()
    seed = args.train_seed if args.train_seed is not None else run.stream.child("pretrain").seed % (2 ** 31)
    res = pretrain(ds, s.arch(), s.loss(), s.train(seed))
    paths = res.save(run.path("models"))
    print(f"F1 {res.f1.digest()} final running loss {res.running_loss()[1]:.4f}")
    return {**paths, "f1_digest": res.f1.digest()}


def cmd_generate(run: Run, args) -> dict:
    s = run.settings
    f1 = run.f1()
    ds = run.dataset()
    count = args.count or s.int("generate", "count")
    base = s.int("generate", "seed_base")
    seeds = args.seeds or list(range(base, base + count))
    if args.condition is not None:
        conds = [args.condition] * len(seeds)
    elif f1.arch.conditional:
        rng = run.stream.child("conditions").numpy()
        conds = [int(v) for v in rng.integers(0, f1.arch.cond_dim, len(seeds))]
    else:
        conds = [None] * len(seeds)
    if ds.c is None and args.condition is not None:
        raise UserError("--condition given for an unconditional run")
    items = generate_items(f1, seeds, conds, build_generation_schedule(*s.schedule()), s.cfg_weight())
    out = run.path("generated", "items.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(json.dumps(z.to_record()) + "\n" for z in items))
    print(f"{len(items)} items -> {out}")
    return {"items": out}


def _context(run: Run) -> RepeatContext:
    s = run.settings
    ds, f1 = run.dataset(), run.f1()
    pairs = build_noise_pair_set(f1.loss, s.schedule()[:3], s.int("score", "target_size"),
                                 s.float("score", "retention"), run.stream.child("pairs"), f1.arch.input_shape)
    return RepeatContext(0, ds, f1, run.l_null(ds, f1), pairs, run.stream.child("attribute"), pretrain_config_of(f1))


def cmd_attribute(run: Run, args) -> dict:
    names = _methods(args.method, ["mucs"])
    methods = {n: make_method(n, **run.settings.method_options(n)) for n in names}
    ctx = _context(run)
    items = run.items()
    if args.item:
        items = [z for z in items if z.id in set(args.item)]
        if not items:
            raise UserError(f"no generated items named {args.item}")
    written = {}
    for name, method in methods.items():
        for z in items:
            res = method(ctx, z)
            path = res.save(run.path("scores", name, f"{z.id}.jsonl"))
            written[f"{name}/{z.id}"] = path
        print(f"{name}: {len(items)} score files -> {run.path('scores', name)}")
    traces = run.path("scores", "traces.jsonl")
    with traces.open("a") as fh:
        for t in ctx.traces:
            fh.write(json.dumps(t) + "\n")
    return {**written, "traces": traces}


def _benchmark(run: Run, args, tag: str) -> Benchmark:
    s = run.settings
    ds = run.dataset() if run.path("data", "manifest.jsonl").exists() else build_toy_dataset(s.data_spec())
    ec = s.eval(args.workers, True if args.seed_consistency else None)
    return Benchmark(ds, s.arch(), s.loss(), s.train(0), ec, run.stream.child("eval"), run.path(tag),
                     progress=lambda msg: print(msg, flush=True))


def cmd_eval(run: Run, args) -> dict:
    names = _methods(args.method, ["mucs", "random"])
    bench = _benchmark(run, args, "eval")
    report = bench.run(names, {n: run.settings.method_options(n) for n in names})
    return _write_report(run, report, "eval", None)


def cmd_ablate(run: Run, args) -> dict:
    modes = _methods(args.modes, ["s-c1", "s-c2", "s-c3"])
    unknown = [m for m in modes if m not in ABLATIONS and not m.startswith("mucs:")]
    if unknown:
        raise UserError(f"unknown ablation modes {unknown}; expected codes from {sorted(ABLATIONS)}")
    names = ["mucs", *modes]
    bench = _benchmark(run, args, "eval")
    report = bench.run(names, {n: run.settings.method_options(n) for n in names})
    labels = "\n".join(f"{m}: {ABLATION_LABELS.get(m, m)}" for m in modes)
    return _write_report(run, report, "ablate", "mucs", labels)


def _write_report(run: Run, report: EvalReport, name: str, relative: str | None, footer: str = "") -> dict:
    out = run.path("reports", f"{name}.json")
    report.save(out)
    table = report.summary_table(relative) + ("\n" + footer if footer else "")
    txt = out.with_suffix(".txt")
    txt.write_text(table + "\n")
    print(table)
    return {"report": out, "summary": txt}


def cmd_overlap(run: Run, args) -> dict:
    names = _methods(args.method, ["mucs"])
    k = args.k_fraction if args.k_fraction is not None else run.settings.float("eval", "k_fraction")
    results = {n: run.scores(n) for n in names}
    rows = {n: list(v) for n, v in overlap_rows(results, k).items()}
    out = {"k_fraction": k, "across_items": rows}
    lines = ["across items (mean% ± 95% CI):"] + [f"  {n}: {m:.1f} ± {c:.1f}" for n, (m, c) in rows.items()]
    if len(names) > 1:
        matrix = topk_overlap_across_methods(results, k)
        out["across_methods"] = matrix.to_record()
        lines += ["across methods:", matrix.table()]
    path = run.path("reports", "overlap.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=1))
    print("\n".join(lines))
    return {"overlap": path}


def cmd_ensemble(run: Run, args) -> dict:
    if not args.weights:
        raise UserError("ensemble needs --weights name=w,...")
    spec = EnsembleSpec.parse(args.weights)
    per_method = {n: {r.item_id: r for r in run.scores(n)} for n in spec.methods}
    items = set.intersection(*(set(v) for v in per_method.values()))
    if not items:
        raise UserError("the ensemble members share no generated items")
    written = {}
    for item in sorted(items):
        res = rank_ensemble({n: per_method[n][item] for n in spec.methods}, spec)
        res.method = args.name
        written[item] = res.save(run.path("scores", args.name, f"{item}.jsonl"))
    print(f"{len(written)} ensemble score files -> {run.path('scores', args.name)}")
    return written


def cmd_report(run: Run, args) -> dict:
    reports = sorted(run.path("reports").glob("*.json")) if run.path("reports").exists() else []
    reports = [p for p in reports if p.stem in ("eval", "ablate")]
    if not reports:
        raise UserError(f"run {run.run_id} has no eval/ablate reports yet")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    artifacts = {}
    for path in reports:
        rep = EvalReport.load(path)
        print(f"== {path.stem}")
        print(rep.summary_table("mucs" if path.stem == "ablate" else None))
        for metric in rep.metrics:
            hist = rep.histogram_data(metric, bins=args.bins)
            stem = run.path("reports", "plots", f"{path.stem}-{metric}")
            stem.parent.mkdir(parents=True, exist_ok=True)
            stem.with_suffix(".json").write_text(json.dumps(hist))
            fig, ax = plt.subplots(figsize=(6, 3.5))
            edges = hist["edges"]
            for label, counts in hist["counts"].items():
                ax.stairs(counts, edges, label=label)
            ax.set_xlabel(f"{metric} similarity, before vs after retraining")
            ax.set_ylabel("count")
            ax.legend(fontsize=7)
            fig.tight_layout()
            fig.savefig(stem.with_suffix(".png"), dpi=120)
            plt.close(fig)
            artifacts[f"{path.stem}-{metric}"] = stem.with_suffix(".png")
    print(f"{len(artifacts)} plots -> {run.path('reports', 'plots')}")
    return artifacts


COMMANDS = {"make-data": cmd_make_data, "pretrain": cmd_pretrain, "generate": cmd_generate,
            "attribute": cmd_attribute, "eval": cmd_eval, "ablate": cmd_ablate, "overlap": cmd_overlap,
            "ensemble": cmd_ensemble, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", action="append", default=[], help="INI file overriding the reference config")
    common.add_argument("--run-id", default="default")
    common.add_argument("--seed", type=int, default=0, help="RNG root key")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out-dir", default=None, help=f"artifact root (default ${ROOT_ENV} or ./mucs-runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mucs", description="Training-data attribution for diffusion models by mirrored unlearning.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--print-config", action="store_true", help="print the reference config and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("make-data", parents=[common], help="build the toy dataset")
    sp = sub.add_parser("pretrain", parents=[common], help="train F1 on the run's dataset")
    sp.add_argument("--train-seed", type=int, default=None)
    sp = sub.add_parser("generate", parents=[common], help="sample generated items from F1")
    sp.add_argument("--count", type=int, default=None)
    sp.add_argument("--seeds", type=int, nargs="+", default=None)
    sp.add_argument("--condition", type=int, default=None)
    sp = sub.add_parser("attribute", parents=[common], help="score the training set for each generated item")
    sp.add_argument("--method", action="append")
    sp.add_argument("--item", action="append")
    for name, help_ in (("eval", "leave-k-out benchmark"), ("ablate", "ablation benchmark against full MUCS")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name == "eval":
            sp.add_argument("--method", action="append")
        else:
            sp.add_argument("--modes", action="append", help="comma-separated ablation codes, e.g. s-c2,s-c1")
        sp.add_argument("--seed-consistency", action="store_true", help="also run the 40%% removal seed check")
    sp = sub.add_parser("overlap", parents=[common], help="top-k overlap statistics from score files")
    sp.add_argument("--method", action="append")
    sp.add_argument("--k-fraction", type=float, default=None)
    sp = sub.add_parser("ensemble", parents=[common], help="rank ensemble of existing score files")
    sp.add_argument("--weights", required=False, help="e.g. mucs=10,emb-ae=5,condition=3")
    sp.add_argument("--name", default="ensemble")
    sp = sub.add_parser("report", parents=[common], help="summary tables and similarity histograms")
    sp.add_argument("--bins", type=int, default=20)
    return p


def _fail(code: int, exc: BaseException) -> int:
    kind = "user" if code == 1 else "internal"
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": msg}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.print_config:
            print(reference_text(), end="")
            return 0
        if args.command is None:
            raise UserError(f"missing subcommand; expected one of {', '.join(SUBCOMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.workers < 1:
            raise UserError("--workers must be >= 1")
        root = Path(args.out_dir or os.environ.get(ROOT_ENV) or "mucs-runs")
        run = Run(root, args.run_id, Settings.load(args.config), args.seed)
        run.check_seed()
        artifacts = COMMANDS[args.command](run, args)
        run.record(args.command, argv, artifacts)
        return 0
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)
    except (UserError, ConfigError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        return _fail(1, exc)
    except Exception as exc:  # noqa: BLE001
        log.debug(traceback.format_exc())
        return _fail(2, exc)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: phantom, synth, train, select, predict, evaluate, paste,
finetune, replay. Every command writes into ``--out`` and finishes with a
``manifest.json`` listing the files it wrote.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
The worker-pool size defaults to the CPU count and can be set with
``--workers`` or the ``PROMPTSEG_WORKERS`` environment variable; outputs do
not depend on it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

from . import __version__
from .config import ConfigError, phantom_template, resolve, synthesis_config, train_config
from .datasets import RunWriter, brain_or_nonzero, load_manifest, read_cases, sha256
from .geometry import PlacementError
from .io import VolumeIOError
from .metrics import MetricsReport, aggregate, compare, compute_case_metrics
from .pasting import PairingSpecError, PlusSetSpec, build_plus_set
from .pipeline import (
    _pool_map,
    default_workers,
    phantom_indices,
    phantom_source,
    Source,
    sweep_budgets,
    synth_dataset,
)
from .plotting import plot_curves, plot_metrics, plot_samples
from .refseg import ModelFormatError, fine_tune, load_model, predict, save_model
from .selection import DEFAULT_BUDGETS, SelectionResult, curves_to_csv, load_curves, select_budget
from .synthesis import LabeledSample, Provenance, split_sources

log = logging.getLogger("promptseg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


DATA_ERRORS = (
    DataError,
    VolumeIOError,
    PairingSpecError,
    PlacementError,
    ModelFormatError,
    ConfigError,
    FileNotFoundError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers


def _abs(p) -> str | None:
    return None if p is None else str(Path(p).resolve())


def _labeled(case, task: str = "prompt") -> LabeledSample:
    prov = Provenance(source_id=case.case_id, seed=None, task=task, branch="loaded")
    return LabeledSample(case.image, case.label, prov, brain=brain_or_nonzero(case))


def _resolve_model_path(opts) -> Path:
    if opts.get("model"):
        return Path(opts["model"])
    if opts.get("selection"):
        sel = json.loads(Path(opts["selection"]).read_text())
        return Path(sel["run"]) / sel["checkpoint"]
    raise UsageError("one of --model or --selection is required")


def _invocation(command: str, opts: dict) -> dict:
    # the pool size never changes outputs, so it is left out of the record
    return {"command": command, "options": {k: v for k, v in opts.items() if k != "workers"}}


def _samples_record(writer: RunWriter, rows) -> list[dict]:
    return [{"id": cid, **{k: writer.rel(v) for k, v in files.items()}, **meta} for cid, files, meta in rows]


# --------------------------------------------------------------------------
# commands; each takes (opts, cfg, out) and returns the manifest path


def cmd_phantom(opts: dict, cfg: dict, out: Path) -> Path:
    count = opts["count"]
    if count < 1:
        raise UsageError("--count must be >= 1")
    template = phantom_template(cfg)
    w = RunWriter(out, cfg["format"])
    rows = []
    for k in range(count):
        src = phantom_source(template, cfg["seed"], k)
        files = {"image": w.volume("images", src.source_id, src.image),
                 "brain": w.volume("brains", src.source_id, src.brain)}
        rows.append((src.source_id, files, {}))
    return w.finalize("phantom", cfg["seed"], cfg, _invocation("phantom", opts),
                      samples=_samples_record(w, rows))


def _check_registry(path, task: str, sources: list[str]) -> None:
    path = Path(path)
    reg = json.loads(path.read_text()) if path.exists() else {"schema_version": 1, "tasks": {}}
    for other, entry in reg["tasks"].items():
        if other == task:
            continue
        overlap = sorted(set(entry["sources"]) & set(sources))
        if overlap:
            raise DataError(
                f"source pools of {task!r} and {other!r} overlap ({len(overlap)} shared, e.g. {overlap[0]})"
            )
    reg["tasks"][task] = {"sources": sorted(sources)}
    path.write_text(json.dumps(reg, indent=2, sort_keys=True) + "\n")


def cmd_synth(opts: dict, cfg: dict, out: Path) -> Path:
    task, count, seed = opts["task"], opts["count"], cfg["seed"]
    if count < 1:
        raise UsageError("--count must be >= 1")
    scfg = synthesis_config(cfg)
    if opts.get("phantom"):
        template = phantom_template(cfg)
        sources = [phantom_source(template, seed, i) for i in phantom_indices(task, count)]
    elif opts.get("input"):
        cases = {c.case_id: c for c in read_cases(opts["input"])}
        prompt_ids, val_ids = split_sources(cases, seed, opts.get("split_fraction") or 0.5)
        pool = prompt_ids if task == "prompt" else val_ids
        sources = [Source(i, cases[i].image, brain_or_nonzero(cases[i])) for i in pool]
    else:
        raise UsageError("one of --input or --phantom is required")
    source_ids = sorted({s.source_id for s in sources})
    if opts.get("registry"):
        _check_registry(opts["registry"], task, source_ids)
    samples = synth_dataset(task, sources, count, scfg, seed, opts["workers"])
    w = RunWriter(out, cfg["format"])
    rows = []
    for k, s in enumerate(samples):
        cid = f"{task}-{k:05d}"
        files = {"image": w.volume("images", cid, s.image),
                 "label": w.volume("labels", cid, s.mask),
                 "brain": w.volume("brains", cid, s.brain)}
        rows.append((cid, files, {"provenance": s.provenance.to_dict()}))
    w.add(plot_samples(samples, w.path("figures/preview.png")))
    return w.finalize("synth", seed, cfg, _invocation("synth", opts),
                      task=task, sources=source_ids, samples=_samples_record(w, rows))


def cmd_train(opts: dict, cfg: dict, out: Path) -> Path:
    train_set = [_labeled(c) for c in read_cases(opts["train"], need=("images", "labels"))]
    val_set = [_labeled(c, "validation") for c in read_cases(opts["val"], need=("images", "labels"))]
    budgets = [int(b) for b in cfg["train"]["budgets"]]
    tcfg = train_config(cfg)
    w = RunWriter(out, cfg["format"])

    def on_checkpoint(budget, epoch, model, d):
        w.add(save_model(model, w.path(f"checkpoints/T{budget:03d}/epoch_{epoch:03d}.bin")))
        log.info("T=%d epoch %d: validation-task dice %.4f", budget, epoch, d)

    sweep = sweep_budgets(train_set, val_set, budgets, tcfg, on_checkpoint, candidates=budgets)
    for c in sweep.curves:
        w.json(f"curves/T{c.budget:03d}.json", {"schema_version": 1, **c.to_dict()})
    w.text("curves.csv", curves_to_csv(sweep.curves))
    w.add(plot_curves(sweep.curves, w.path("figures/curves.png")))
    return w.finalize("train", cfg["seed"], cfg, _invocation("train", opts), budgets=budgets)


def cmd_select(opts: dict, cfg: dict, out: Path) -> Path:
    run = Path(opts["run"])
    paths = sorted((run / "curves").glob("T*.json"))
    if not paths:
        raise DataError(f"{run}: no curves/T*.json files")
    curves = load_curves(paths)
    candidates = opts.get("candidates") or list(DEFAULT_BUDGETS)
    try:
        result = select_budget(curves, candidates, opts.get("smooth"))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    w = RunWriter(out, cfg["format"])
    doc = result.to_dict()
    doc["run"] = str(run.resolve())
    doc["checkpoint"] = f"checkpoints/T{result.budget:03d}/epoch_{result.epoch:03d}.bin"
    w.json("selection.json", doc)
    w.text("curves.csv", curves_to_csv(curves))
    w.add(plot_curves(curves, w.path("figures/selection.png"), result))
    print(f"selected T={result.budget} epoch={result.epoch} validation-task dice={result.dice:.4f}")
    return w.finalize("select", cfg["seed"], cfg, _invocation("select", opts),
                      selection={"budget": result.budget, "epoch": result.epoch, "dice": result.dice})


def _predict_one(args):
    model, case, threshold = args
    return predict(model, case.image, brain_or_nonzero(case), threshold)


def cmd_predict(opts: dict, cfg: dict, out: Path) -> Path:
    model_path = _resolve_model_path(opts)
    model = load_model(model_path)
    cases = read_cases(opts["input"])
    threshold = cfg["predict"]["prob_threshold"]
    preds = _pool_map(_predict_one, [(model, c, threshold) for c in cases], opts["workers"])
    w = RunWriter(out, cfg["format"])
    rows = []
    for c, p in zip(cases, preds):
        rows.append((c.case_id, {"label": w.volume("labels", c.case_id, p)}, {"voxels": p.count}))
    return w.finalize("predict", cfg["seed"], cfg, _invocation("predict", opts),
                      model=str(model_path.resolve()), model_sha256=sha256(model_path),
                      samples=_samples_record(w, rows))


def cmd_evaluate(opts: dict, cfg: dict, out: Path) -> Path:
    preds = {c.case_id: c.label for c in read_cases(opts["pred"], need=("labels",))}
    truths = {c.case_id: c.label for c in read_cases(opts["truth"], need=("labels",))}
    missing = sorted(set(truths) - set(preds))
    if missing:
        raise DataError(f"{len(missing)} cases lack predictions, e.g. {missing[0]}")
    cases = [compute_case_metrics(preds[cid], truths[cid], cid) for cid in sorted(truths)]
    report = aggregate(cases)
    if opts.get("baseline"):
        report = compare(report, MetricsReport.load(opts["baseline"]))
    w = RunWriter(out, cfg["format"])
    w.text("report.csv", report.to_csv())
    w.json("report.json", report.to_dict())
    summary = "\n".join(report.summary_lines()) + "\n"
    w.text("summary.txt", summary)
    w.add(plot_metrics(report, w.path("figures/metrics.png")))
    print(summary, end="")
    return w.finalize("evaluate", cfg["seed"], cfg, _invocation("evaluate", opts))


def cmd_paste(opts: dict, cfg: dict, out: Path) -> Path:
    pseudo = {c.case_id: c.label for c in read_cases(opts["pseudo"], need=("labels",))}
    images = {c.case_id: c for c in read_cases(opts["unlabeled"])}
    lacking = sorted(set(pseudo) - set(images))
    if lacking:
        raise DataError(f"pseudo-labels without unlabeled images, e.g. {lacking[0]}")
    free = read_cases(opts["tumor_free"])
    pcfg = cfg["paste"]
    spec = PlusSetSpec(
        unlabeled_count=len(pseudo),
        tumor_free_count=len(free),
        uses_per_pseudo_label=pcfg["uses_per_pseudo_label"],
        uses_per_tumor_free=pcfg["uses_per_tumor_free"],
        seed=cfg["seed"],
        renormalize=pcfg["renormalize"],
        min_label_voxels=pcfg["min_label_voxels"],
    )
    u_ids = sorted(pseudo)
    unlabeled = [(images[i].image, pseudo[i]) for i in u_ids]
    plus = build_plus_set(unlabeled, [c.image for c in free], spec, u_ids, [c.case_id for c in free])
    w = RunWriter(out, cfg["format"])
    by_pair = {s.provenance.extra["pair_index"]: s for s in plus.pasted}
    pairing = []
    for k, (j, i) in enumerate(plus.pairing):
        entry = {"pair": k, "pseudo_label": u_ids[j], "tumor_free": free[i].case_id, "skipped": k in plus.skipped}
        if k in by_pair:
            cid = f"pasted-{k:05d}"
            w.volume("images", cid, by_pair[k].image)
            w.volume("labels", cid, by_pair[k].mask)
            if free[i].brain is not None:
                w.volume("brains", cid, free[i].brain)
            entry["id"] = cid
        pairing.append(entry)
    for cid in u_ids:
        w.volume("images", f"pseudo-{cid}", images[cid].image)
        w.volume("labels", f"pseudo-{cid}", pseudo[cid])
        if images[cid].brain is not None:
            w.volume("brains", f"pseudo-{cid}", images[cid].brain)
    return w.finalize("paste", cfg["seed"], cfg, _invocation("paste", opts),
                      pairing=pairing, skipped=len(plus.skipped))


def cmd_finetune(opts: dict, cfg: dict, out: Path) -> Path:
    model_path = _resolve_model_path(opts)
    model = load_model(model_path)
    plus = [_labeled(c, "pasted") for c in read_cases(opts["plus"], need=("images", "labels"))]
    tuned = fine_tune(model, plus, train_config(cfg))
    w = RunWriter(out, cfg["format"])
    w.add(save_model(tuned, w.path("model.bin")))
    return w.finalize("finetune", cfg["seed"], cfg, _invocation("finetune", opts),
                      base_model=str(model_path.resolve()), base_model_sha256=sha256(model_path))


COMMANDS = {
    "phantom": cmd_phantom,
    "synth": cmd_synth,
    "train": cmd_train,
    "select": cmd_select,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "paste": cmd_paste,
    "finetune": cmd_finetune,
}


def replay(manifest_path, out, workers: int = 1) -> list[str]:
    """Re-run the command recorded in a manifest; returns mismatching files."""
    m = load_manifest(manifest_path)
    inv = m["invocation"]
    opts = dict(inv["options"], workers=workers)
    COMMANDS[inv["command"]](opts, m["config"], Path(out))
    fresh = {e["path"]: e["sha256"] for e in load_manifest(out)["files"]}
    old = {e["path"]: e["sha256"] for e in m["files"]}
    return sorted(p for p in set(fresh) | set(old) if fresh.get(p) != old.get(p))


# --------------------------------------------------------------------------
# argument parsing


PATH_OPTS = ("input", "train", "val", "run", "model", "selection", "pred", "truth",
             "unlabeled", "pseudo", "tumor_free", "plus", "baseline", "registry")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promptseg", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--format", choices=("nifti1", "rawpair"), help="output volume format")
    common.add_argument("--workers", type=int, help="worker processes (env PROMPTSEG_WORKERS)")
    common.add_argument("-v", "--verbose", action="store_true")

    def add(name, help, extra=()):
        sp = sub.add_parser(name, parents=[common, *extra], help=help)
        sp.add_argument("--out", required=name != "select", help="output directory")
        return sp

    phantom_flags = _Parser(add_help=False)
    phantom_flags.add_argument("--dims", type=int, nargs=3)
    phantom_flags.add_argument("--spacing", type=float, nargs=3)
    phantom_flags.add_argument("--amplitude", type=float)

    sp = add("phantom", "write lesion-free phantom volumes", [phantom_flags])
    sp.add_argument("--count", type=int, required=True)

    sp = add("synth", "generate prompt-task or validation-task samples", [phantom_flags])
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--input", help="directory with images/ (and brains/) of lesion-free volumes")
    src.add_argument("--phantom", action="store_true", help="use built-in phantoms as sources")
    sp.add_argument("--task", choices=("prompt", "validation"), required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--preset", choices=("tumor", "stroke", "desk"))
    sp.add_argument("--split-fraction", type=float, help="validation share of --input sources (0.5)")
    sp.add_argument("--registry", help="JSON file recording source pools per task; overlaps are errors")

    sp = add("train", "sweep epoch budgets, scoring the validation task every epoch")
    sp.add_argument("--train", required=True, help="prompt-task dataset directory")
    sp.add_argument("--val", required=True, help="validation-task dataset directory")
    sp.add_argument("--budgets", type=int, nargs="+")

    sp = add("select", "pick the budget and epoch at the validation-task peak")
    sp.add_argument("--run", required=True, help="output directory of `train`")
    sp.add_argument("--candidates", type=int, nargs="+")
    sp.add_argument("--smooth", type=int, help="moving-average window (off by default)")

    for name, help in (("predict", "segment volumes"), ("finetune", "fine-tune on a pasted set")):
        sp = add(name, help)
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--model", help="checkpoint file")
        g.add_argument("--selection", help="selection.json written by `select`")
    sub.choices["predict"].add_argument("--input", required=True)
    sub.choices["predict"].add_argument("--threshold", type=float)
    sub.choices["finetune"].add_argument("--plus", required=True, help="output directory of `paste`")
    sub.choices["finetune"].add_argument("--epochs", type=int)

    sp = add("evaluate", "Dice / precision / recall report")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--baseline", help="report.json of a baseline for paired t-tests")

    sp = add("paste", "paste pseudo-labelled lesions onto lesion-free volumes")
    sp.add_argument("--unlabeled", required=True, help="directory with images/ of lesion volumes")
    sp.add_argument("--pseudo", required=True, help="directory with labels/ (e.g. `predict` output)")
    sp.add_argument("--tumor-free", required=True, help="directory with images/ of lesion-free volumes")
    sp.add_argument("--uses-per-label", type=int)
    sp.add_argument("--uses-per-free", type=int)

    sp = sub.add_parser("replay", parents=[common], help="re-run a manifest and compare outputs")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    return p


def _overrides(a: argparse.Namespace) -> dict[str, Any]:
    g = lambda name: getattr(a, name, None)  # noqa: E731
    ov: dict[str, Any] = {"seed": g("seed"), "format": g("format")}
    ov["synthesis"] = {"preset": g("preset")}
    ov["phantom"] = {"dims": g("dims"), "spacing": g("spacing"), "amplitude": g("amplitude")}
    ov["train"] = {"budgets": g("budgets"), "fine_tune_epochs": g("epochs")}
    ov["paste"] = {"uses_per_pseudo_label": g("uses_per_label"), "uses_per_tumor_free": g("uses_per_free")}
    ov["predict"] = {"prob_threshold": g("threshold")}
    return ov


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        raise UsageError("a subcommand is required (see --help)")
    workers = args.workers or default_workers()
    if workers < 1:
        raise UsageError("--workers must be >= 1")
    if args.command == "replay":
        diff = replay(args.manifest, args.out, workers)
        if diff:
            for d in diff:
                print(f"differs: {d}", file=sys.stderr)
            raise DataError(f"{len(diff)} files differ from the manifest")
        print("replay identical")
        return 0
    cfg = resolve(args.config, _overrides(args))
    skip = {"config", "seed", "format", "workers", "verbose", "command", "out", "preset", "dims",
            "spacing", "amplitude", "budgets", "epochs", "uses_per_label", "uses_per_free", "threshold"}
    opts = {k: v for k, v in vars(args).items() if k not in skip}
    for k in PATH_OPTS:
        if k in opts:
            opts[k] = _abs(opts[k])
    out = Path(args.out) if args.out else Path(opts["run"]) / "selection"
    COMMANDS[args.command]({**opts, "workers": workers}, cfg, out)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except UsageError as exc:
        print(f"promptseg: usage error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"promptseg: data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"promptseg: internal error: {exc!r}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

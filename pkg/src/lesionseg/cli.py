"""Command-line front end.

Every failure ends with one JSON line on stderr,
``{"error": <kind>, "exit_code": <n>, "message": <text>}``, and a distinct
exit code per kind (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import DatasetManifest, dataset_statistics, split_dataset
from .metrics import ComparisonTable, MetricsReport, evaluate_volume
from .nifti import NiftiError, read_nifti, write_nifti
from .phantom import PhantomSpec, PlacementError, generate_dataset
from .preprocess import PreprocessPlan, apply_plan, fit_plan, prepare_labels
from .training import TrainConfig, TrainingDivergedError, infer, log_to_stream, train, transfer_finetune
from .volume import LESION_CLASSES

EXIT_CODES = {
    "usage": 2,
    "missing_file": 3,
    "class_mismatch": 4,
    "malformed_config": 5,
    "invalid_data": 6,
    "diverged": 7,
    "placement": 8,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing_file", f"{what} not found: {p}")
    return p


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise CliError("malformed_config", f"override must look like key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_json(path, what: str) -> dict:
    p = _require_file(path, what)
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError("malformed_config", f"{what} {p} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise CliError("malformed_config", f"{what} {p} must hold a JSON object")
    return d


def _train_config(path, overrides, base: dict | None = None) -> TrainConfig:
    d = dict(base or {})
    if path:
        d.update(_load_json(path, "config"))
    d.update(_parse_overrides(overrides))
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError("malformed_config", str(exc)) from None


def _echo(out_path: Path, payload: dict) -> None:
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_manifest(path) -> DatasetManifest:
    p = _require_file(path, "manifest")
    try:
        return DatasetManifest.load(p)
    except (json.JSONDecodeError, ValueError) as exc:
        raise CliError("malformed_config", f"bad manifest {p}: {exc}") from None


def cmd_phantom_gen(args) -> None:
    d = _load_json(args.spec, "phantom spec") if args.spec else {}
    d.update(_parse_overrides(args.set))
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = PhantomSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError("malformed_config", str(exc)) from None
    out = Path(args.out)
    manifest = generate_dataset(spec, args.n, out)
    if args.train_ratio is not None:
        manifest = split_dataset(manifest, args.train_ratio, seed=spec.seed)
        manifest.save(out / "manifest.json")
    stats = dataset_statistics(manifest)
    (out / "statistics.csv").write_text(stats.to_csv(), encoding="utf-8")
    _echo(out / "effective_config.json", {"command": "phantom gen", "n": args.n, "spec": spec.to_dict(), "train_ratio": args.train_ratio})
    print(f"wrote {args.n} phantoms to {out}")


def cmd_split(args) -> None:
    manifest = _load_manifest(args.manifest)
    try:
        manifest = split_dataset(manifest, args.ratio, seed=args.seed, n_train=args.n_train)
    except ValueError as exc:
        raise CliError("malformed_config", str(exc)) from None
    manifest.save(args.manifest)
    print(f"train {len(manifest.split('train'))}, test {len(manifest.split('test'))}")


def cmd_stats(args) -> None:
    manifest = _load_manifest(args.manifest)
    stats = dataset_statistics(manifest)
    text = stats.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if stats.failure_count:
        for vid, why in stats.failures:
            print(f"skipped {vid}: {why}", file=sys.stderr)


def cmd_preprocess(args) -> None:
    manifest = _load_manifest(args.manifest)
    patch = tuple(args.patch_size)
    plan = fit_plan(manifest, patch)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest.entries:
        img = apply_plan(read_nifti(manifest.image_path(e), kind="image"), plan)
        lab = prepare_labels(read_nifti(manifest.label_path(e), kind="label"), plan)
        img_rel, lab_rel = f"images/{e.volume_id}.nii.gz", f"labels/{e.volume_id}.nii.gz"
        write_nifti(img, out / img_rel)
        write_nifti(lab, out / lab_rel)
        entries.append(type(e)(e.volume_id, img_rel, lab_rel, e.split))
    plan.save(out / "plan.json")
    extra = {"preprocessed": True, "plan": "plan.json", "plan_data": plan.to_dict()}
    DatasetManifest(entries, manifest.classes, manifest.seed, out, extra).save(out / "manifest.json")
    _echo(out / "effective_config.json", {"command": "preprocess", "manifest": str(args.manifest), "plan": plan.to_dict()})
    print(f"plan: clip [{plan.clip_low:.2f}, {plan.clip_high:.2f}], mean {plan.mean:.3f}, std {plan.std:.3f}")


def _run_training(out: Path, result_fn, cfg: TrainConfig, command: str, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log:
        tee = log_to_stream(log)

        def log_fn(rec):
            tee(rec)
            if not extra.get("quiet"):
                print(json.dumps(rec, sort_keys=True), flush=True)

        try:
            result = result_fn(log_fn)
        except TrainingDivergedError as exc:
            raise CliError("diverged", str(exc)) from None
    save_checkpoint(result.checkpoint, out / "checkpoint.lseg")
    PreprocessPlan.from_dict(result.checkpoint.plan).save(out / "plan.json")
    echo = {"command": command, "train_config": cfg.to_dict(), "network": result.checkpoint.network_config.to_dict()}
    echo.update({k: v for k, v in extra.items() if k != "quiet"})
    _echo(out / "effective_config.json", echo)


def cmd_train(args) -> None:
    manifest = _load_manifest(args.manifest)
    cfg = _train_config(args.config, args.set)
    resume = _load_ckpt(args.resume) if args.resume else None
    out = Path(args.out)
    _run_training(
        out,
        lambda log_fn: train(manifest, cfg, resume=resume, log_fn=log_fn),
        cfg,
        "train",
        {"manifest": str(args.manifest), "resume": args.resume, "quiet": args.quiet},
    )
    print(f"checkpoint written to {out / 'checkpoint.lseg'}")


def _load_ckpt(path):
    p = _require_file(path, "checkpoint")
    try:
        return load_checkpoint(p)
    except CheckpointError as exc:
        raise CliError("invalid_data", str(exc)) from None


def cmd_finetune(args) -> None:
    pre = _load_ckpt(args.pretrained)
    manifest = _load_manifest(args.manifest)
    if manifest.num_classes != args.classes:
        raise CliError(
            "class_mismatch", f"--classes {args.classes} but manifest lists {manifest.num_classes} (incl. background)"
        )
    base = {k: v for k, v in pre.train_config.items() if k in ("num_stages", "base_channels", "variant", "deep_supervision", "patch_size")}
    cfg = _train_config(args.config, args.set, base)
    out = Path(args.out)

    def run(log_fn):
        try:
            return transfer_finetune(pre, manifest, args.classes, cfg, log_fn=log_fn)
        except CheckpointError as exc:
            raise CliError("class_mismatch", str(exc)) from None

    _run_training(out, run, cfg, "finetune", {"pretrained": str(args.pretrained), "manifest": str(args.manifest), "quiet": args.quiet})
    print(f"checkpoint written to {out / 'checkpoint.lseg'}")


def cmd_infer(args) -> None:
    ckpt = _load_ckpt(args.ckpt)
    vol = read_nifti(_require_file(args.inp, "input volume"), kind="image")
    if ckpt.plan is None:
        raise CliError("invalid_data", "checkpoint carries no preprocessing plan")
    plan = PreprocessPlan.from_dict(ckpt.plan)
    net = ckpt.build_network()
    pred = infer(net, vol, plan, overlap=args.overlap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_nifti(pred, out)
    print(f"prediction written to {out}")


def _label_files(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise CliError("missing_file", f"directory not found: {d}")
    return {p.name: p for p in sorted(d.iterdir()) if p.name.endswith((".nii", ".nii.gz"))}


def _class_names(args, gt_dir: Path) -> list[str]:
    if args.manifest:
        return list(_load_manifest(args.manifest).classes)
    for cand in (gt_dir / "manifest.json", gt_dir.parent / "manifest.json"):
        if cand.exists():
            return list(_load_manifest(cand).classes)
    return list(LESION_CLASSES)


def cmd_evaluate(args) -> None:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gts, preds = _label_files(gt_dir), _label_files(pred_dir)
    if not gts:
        raise CliError("missing_file", f"no NIfTI label files in {gt_dir}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise CliError("missing_file", f"no prediction for {', '.join(missing)}")
    names = _class_names(args, gt_dir)
    k = len(names) + 1
    scores = []
    for name in sorted(gts):
        g = read_nifti(gts[name], kind="label")
        p = read_nifti(preds[name], kind="label")
        for vol, which in ((g, "ground truth"), (p, "prediction")):
            top = int(vol.data.max(initial=0))
            if top >= k:
                raise CliError("class_mismatch", f"{which} {name} has label {top} but only {k} classes are defined")
        if g.meta.dims != p.meta.dims:
            raise CliError("invalid_data", f"{name}: prediction dims {p.meta.dims} != ground truth {g.meta.dims}")
        scores.append(evaluate_volume(p.data, g.data, k, args.connectivity))
    report = MetricsReport.from_volumes(scores, names, method=args.method)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    out.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.render())


def cmd_report(args) -> None:
    paths = [s for s in args.inputs.split(",") if s]
    if not paths:
        raise CliError("usage", "--inputs needs at least one report")
    reports = []
    for p in paths:
        d = _load_json(p, "report")
        try:
            reports.append(MetricsReport.from_dict(d))
        except (KeyError, TypeError) as exc:
            raise CliError("malformed_config", f"report {p} lacks field {exc}") from None
    try:
        table = ComparisonTable.from_reports(reports)
    except ValueError as exc:
        raise CliError("class_mismatch", str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".tsv":
        text = table.to_csv().replace(",", "\t")
    elif out.suffix == ".csv":
        text = table.to_csv()
    else:
        text = table.render()
    out.write_text(text, encoding="utf-8")
    sys.stdout.write(table.render())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lesionseg", description="Multi-lesion CT segmentation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic phantom data")
    phs = ph.add_subparsers(dest="phantom_command", required=True)
    g = phs.add_parser("gen", help="generate a phantom dataset")
    g.add_argument("--spec", help="phantom spec JSON (defaults apply when omitted)")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--train-ratio", type=float, help="also tag a seeded train/test split")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("split", help="tag a seeded train/test split in place")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ratio", type=float, default=0.7)
    s.add_argument("--n-train", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    st = sub.add_parser("stats", help="lesion statistics table")
    st.add_argument("--manifest", required=True)
    st.add_argument("--out")
    st.set_defaults(func=cmd_stats)

    pp = sub.add_parser("preprocess", help="fit and apply the preprocessing plan")
    pp.add_argument("--manifest", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--patch-size", type=int, nargs=3, default=(48, 48, 48))
    pp.set_defaults(func=cmd_preprocess)

    for name, fn in (("train", cmd_train), ("finetune", cmd_finetune)):
        t = sub.add_parser(name, help=f"{name} a network")
        t.add_argument("--manifest", required=True)
        t.add_argument("--config", help="train config JSON")
        t.add_argument("--out", required=True)
        t.add_argument("--set", action="append", metavar="KEY=VALUE")
        t.add_argument("--quiet", action="store_true")
        if name == "train":
            t.add_argument("--resume", help="checkpoint to continue from")
        else:
            t.add_argument("--pretrained", required=True)
            t.add_argument("--classes", type=int, required=True, help="class count including background")
        t.set_defaults(func=fn)

    i = sub.add_parser("infer", help="segment one volume")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--overlap", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="per-class DSC and region F1")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--manifest", help="manifest naming the classes")
    e.add_argument("--method", default="model")
    e.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="merge method reports and add the average-score column")
    r.add_argument("--inputs", required=True, help="comma-separated report JSON files")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return ap


def _fail(kind: str, message: str) -> int:
    code = EXIT_CODES.get(kind, 1)
    print(json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "invalid command line (see --help)")
    try:
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc))
    except PlacementError as exc:
        return _fail("placement", str(exc))
    except (NiftiError, CheckpointError) as exc:
        return _fail("invalid_data", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())

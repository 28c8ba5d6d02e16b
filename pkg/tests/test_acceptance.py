"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""

import itertools
import time

import numpy as np
import pytest

from lesionseg.checkpoint import load_checkpoint, save_checkpoint, to_bytes
from lesionseg.metrics import (
    ComparisonTable,
    MetricsReport,
    average_score,
    connected_components_3d,
    dsc,
    lesion_diameter,
    match_instances,
    size_category,
)
from lesionseg.network import VARIANT_ROWS, Network, NetworkConfig, VariantFlags, make_variant
from lesionseg.nifti import read_nifti, write_nifti
from lesionseg.phantom import PhantomSpec, generate_dataset, generate_phantom
from lesionseg.preprocess import PreprocessPlan, fit_plan
from lesionseg.training import (
    TrainConfig,
    evaluate_training_fit,
    foreground_dsc,
    infer,
    init_finetune_network,
    linear_lr,
    load_training_data,
    predict_logits,
    train,
    transfer_finetune,
)
from lesionseg.gradcheck import grad_check
from lesionseg.volume import CtVolume, LabelVolume, VolumeMeta

from generators import correlated_masks, random_label_volume
from oracles import exhaustive_match, flood_fill_components
from test_metrics import hundredths_apart, load_table
from test_network import e2e_loss_check
from test_tensor_ops import OP_CASES

SEEDS = range(20)


# 1. gradient suite


@pytest.mark.criterion(1, "gradient suite")
def test_gradient_suite(criterion):
    start = time.perf_counter()
    worst_op = {}
    for name, make in sorted(OP_CASES.items()):
        worst_op[name] = max(
            grad_check(*make(np.random.default_rng(s)), h=1e-6, tol=1e-4, seed=1000 + s).max_rel_error for s in SEEDS
        )
    worst_e2e = max(e2e_loss_check(s, max_entries=3).max_rel_error for s in SEEDS)
    elapsed = time.perf_counter() - start
    op_max = max(worst_op.values())
    ok = op_max < 1e-4 and worst_e2e < 1e-3 and elapsed < 300
    criterion.record(
        ok,
        f"{len(worst_op)} ops x {len(SEEDS)} seeds max rel err {op_max:.2e} (<1e-4); "
        f"end-to-end {worst_e2e:.2e} (<1e-3); {elapsed:.0f}s (<300s)",
    )
    assert ok, worst_op


# 2. overfit

# Two liver classes plus background; diameters wide enough that every lesion
# spans several voxels at 1 mm.
OVERFIT_SPEC = {
    "classes": ["liver_tumor", "liver_cyst"],
    "class_specs": {c: {"count": [1, 2], "diameter_mm": [10, 24]} for c in ("liver_tumor", "liver_cyst")},
}


@pytest.mark.criterion(2, "overfit four phantoms")
def test_overfit(criterion, tmp_path):
    manifest = generate_dataset(PhantomSpec.from_dict(OVERFIT_SPEC), 4, tmp_path / "ph")
    cfg = TrainConfig()  # desk defaults
    plan = fit_plan(manifest, cfg.patch_size)
    data = load_training_data(manifest, plan)
    start = time.perf_counter()
    result = train(manifest, cfg, plan=plan, data=data)
    elapsed = time.perf_counter() - start
    fit = evaluate_training_fit(result.net, data, plan)
    # full pipeline from the raw phantom file on its native grid
    entry = manifest.entries[0]
    ct = read_nifti(manifest.image_path(entry), kind="image")
    gt = read_nifti(manifest.label_path(entry), kind="label")
    pred = infer(result.net, ct, plan)
    pipeline = foreground_dsc(pred.data, gt.data, manifest.num_classes)
    mean_fit = float(np.mean(fit))
    ok = len(data.images) == 4 and manifest.num_classes == 3 and mean_fit >= 0.90 and pipeline >= 0.90 and elapsed < 3600
    criterion.record(
        ok,
        f"{cfg.epochs} epochs, mean fg train DSC {mean_fit:.3f} (>=0.90), per volume "
        f"{[round(v, 3) for v in fit]}, infer pipeline {pipeline:.3f}; train {elapsed / 60:.1f} min (<60)",
    )
    assert ok


# 3. metric oracles


def as_sets(instances):
    return [frozenset(map(tuple, inst.coords.tolist())) for inst in instances]


@pytest.mark.criterion(3, "metric oracles")
def test_metric_oracles(criterion):
    rng = np.random.default_rng(2024)
    cc_bad = match_bad = 0
    for k in range(200):
        vol = random_label_volume(rng)
        conn = (6, 18, 26)[k % 3]
        for c in (1, 2):
            if set(as_sets(connected_components_3d(vol, c, conn))) != set(flood_fill_components(vol, c, conn)):
                cc_bad += 1
        pred, gt = correlated_masks(rng)
        preds = connected_components_3d(pred.astype(np.uint8), 1)
        gts = connected_components_3d(gt.astype(np.uint8), 1)
        m = match_instances(preds, gts)
        if m.tp != exhaustive_match(as_sets(preds), as_sets(gts), 0.5) or m.tp + m.fp != len(preds) or m.tp + m.fn != len(gts):
            match_bad += 1
    dsc_bad = 0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 9, size=3))
        a = rng.random(shape) < rng.random()
        b = rng.random(shape) < rng.random()
        ab, ba = dsc(a, b), dsc(b, a)
        if ab != ba or not 0.0 <= ab <= 1.0 or dsc(a, a) != 1.0 or (a.any() and dsc(a, ~a) != 0.0):
            dsc_bad += 1
    ok = cc_bad == match_bad == dsc_bad == 0
    criterion.record(
        ok,
        f"components mismatches {cc_bad}/400, matching mismatches {match_bad}/200, DSC property failures {dsc_bad}/1000",
    )
    assert ok


# 4. comparison table fixture


@pytest.mark.criterion(4, "average-score column reproduces the published table")
def test_published_average_column(criterion):
    table = load_table()
    names = [n for n in table["rows"] if n != "Avg."]
    reports = []
    for i, m in enumerate(table["methods"]):
        d = [table["rows"][n]["dsc"][i] / 100 for n in names]
        f = [table["rows"][n]["f1"][i] / 100 for n in names]
        reports.append(MetricsReport(names, d, f, [1] * len(names), m))
    ct = ComparisonTable.from_reports(reports)
    worst = 0
    for i, n in enumerate(names + ["Avg."]):
        want = table["rows"][n]["avg"]
        worst = max(worst, hundredths_apart(ct.avg_dsc[i], want[0]), hundredths_apart(ct.avg_f1[i], want[1]))
    # the overall row averaged directly from the published per-method Avg. row
    avg_row = table["rows"]["Avg."]
    direct = average_score({m: [avg_row["dsc"][i], avg_row["f1"][i]] for i, m in enumerate(table["methods"])})
    worst = max(worst, hundredths_apart(direct[0], avg_row["avg"][0]), hundredths_apart(direct[1], avg_row["avg"][1]))
    g = names.index("gallstone")
    ok = worst <= 1
    criterion.record(
        ok,
        f"{2 * (len(names) + 1)} cells, worst gap {worst / 100:.2f} (<=0.01); gallstone "
        f"{ct.avg_dsc[g]:.2f}/{ct.avg_f1[g]:.2f}, overall {ct.avg_dsc[-1]:.2f}/{ct.avg_f1[-1]:.2f}",
    )
    assert ok


# 5. schedule


@pytest.mark.criterion(5, "linear learning-rate schedule")
def test_schedule(criterion):
    problems = []
    cfg = TrainConfig()
    if linear_lr(0, cfg) != 0.001:
        problems.append(f"lr(0)={linear_lr(0, cfg)!r}")
    for epochs in (1, 2, 7, 300, 1500):
        c = TrainConfig(epochs=epochs)
        e = np.arange(epochs)
        lr = np.array([linear_lr(int(k), c) for k in e])
        # affine: every value lies on the line through lr(0) with slope -lr0/E
        line = c.lr0 - c.lr0 / epochs * e
        if not np.allclose(lr, line, rtol=0, atol=1e-18):
            problems.append(f"E={epochs} not affine")
        # the line reaches zero exactly at E
        if c.lr0 - c.lr0 / epochs * epochs != 0.0:
            problems.append(f"E={epochs} end point")
        if epochs > 1 and not np.all(np.diff(lr) < 0):
            problems.append(f"E={epochs} not decreasing")
        with pytest.raises(ValueError):
            linear_lr(epochs, c)
    c1500 = TrainConfig(epochs=1500)
    if linear_lr(750, c1500) != 0.0005:
        problems.append("lr(750)")
    ok = not problems
    criterion.record(ok, "lr(0)=0.001, affine, zero at E, lr(750 of 1500)=0.0005" if ok else "; ".join(problems))
    assert ok


# 6. ablation structure


@pytest.mark.criterion(6, "ablation variants I-V")
def test_ablation_structure(criterion):
    base = NetworkConfig(num_stages=3, base_channels=4, num_classes=8)
    counts, shapes_ok = {}, True
    for row in sorted(VARIANT_ROWS):
        net = Network(make_variant(base, row))
        out = net.forward(np.zeros((1, 1, 8, 8, 8), np.float32))
        shapes_ok &= out.shape == (1, 8, 8, 8, 8)
        counts[row] = net.parameter_count()
    flags = [VariantFlags(*bits) for bits in itertools.product((False, True), repeat=3)]
    by_flag = {f: Network(NetworkConfig(**{**base.__dict__, "variant": f})).parameter_count() for f in flags}
    violations = [(a, b) for a, b in itertools.permutations(flags, 2) if a.issubset(b) and not by_flag[a] < by_flag[b]]
    rows = {k: v.as_tuple() for k, v in VARIANT_ROWS.items()}
    matrix_ok = rows == {
        "I": (False, False, False),
        "II": (False, True, True),
        "III": (True, False, True),
        "IV": (True, True, False),
        "V": (True, True, True),
    }
    ok = shapes_ok and not violations and matrix_ok
    criterion.record(ok, f"forward shapes ok={shapes_ok}, superset violations {len(violations)}, params {counts}")
    assert ok


# 7. transfer

SEVEN = ["gallstone", "kidney_stone", "liver_tumor", "kidney_tumor", "pancreatic_cancer", "liver_cyst", "kidney_cyst"]
SUBSET = ["liver_tumor", "liver_cyst"]
MECH_GRID = {"dims": [24, 24, 24], "spacing_mm": [2, 2, 2]}
# pretraining set: every class, liver lesions more frequent; default 48^3 grid at 1 mm
STUDY_SPECS = {
    c: {"diameter_mm": [10, 24], "count": [1, 2]} if c in SUBSET else {"diameter_mm": [6, 16], "count": [0, 1]}
    for c in SEVEN
}
# 24^3 patches from 48^3 volumes keep the study to a few minutes
PRETRAIN = TrainConfig(epochs=300, batches_per_epoch=2, patch_size=(24, 24, 24), num_stages=3, base_channels=8)
FINETUNE = TrainConfig(epochs=150, batches_per_epoch=2, patch_size=(24, 24, 24), num_stages=3, base_channels=8, seed=1)


def transfer_mechanics(tmp_path) -> tuple[bool, str]:
    spec7 = PhantomSpec.from_dict({**MECH_GRID, "classes": SEVEN, "class_specs": {c: {"diameter_mm": [4, 8], "count": [0, 1]} for c in SEVEN}})
    m7 = generate_dataset(spec7, 2, tmp_path / "m7")
    m2 = generate_dataset(PhantomSpec.from_dict({**MECH_GRID, "classes": SUBSET}), 2, tmp_path / "m2")
    cfg = TrainConfig(epochs=1, batches_per_epoch=1, patch_size=(24, 24, 24), num_stages=3, base_channels=2)
    pre = train(m7, cfg).checkpoint
    net, reinit = init_finetune_network(pre, 3)
    head = sorted(net.head_parameter_names())
    trunk_same = all(t.data.tobytes() == pre.params[n].tobytes() for n, t in net.parameters.items() if n not in head)
    res = transfer_finetune(pre, m2, 3, cfg)
    ok = pre.network_config.num_classes == 8 and reinit == head and trunk_same and res.checkpoint.network_config.num_classes == 3
    return ok, f"8->3 re-initialized {reinit}, trunk bitwise={trunk_same}"


def held_out_dsc(ckpt, manifest) -> float:
    plan = PreprocessPlan.from_dict(ckpt.plan)
    net = ckpt.build_network()
    data = load_training_data(manifest, plan, split=None)
    return float(np.mean([foreground_dsc(predict_logits(net, im, plan.patch_size).argmax(0), lab, 3) for im, lab in zip(data.images, data.labels)]))


def transfer_study(tmp_path) -> tuple[float, float]:
    pre_m = generate_dataset(PhantomSpec.from_dict({"classes": SEVEN, "class_specs": STUDY_SPECS, "seed": 10}), 8, tmp_path / "pre")
    sub = {c: {**STUDY_SPECS[c], "count": [1, 1]} for c in SUBSET}
    ft_m = generate_dataset(PhantomSpec.from_dict({"classes": SUBSET, "class_specs": sub, "seed": 20}), 4, tmp_path / "ft")
    test_m = generate_dataset(PhantomSpec.from_dict({"classes": SUBSET, "class_specs": sub, "seed": 30}), 4, tmp_path / "test")
    pre = train(pre_m, PRETRAIN).checkpoint
    finetuned = transfer_finetune(pre, ft_m, 3, FINETUNE).checkpoint
    # scratch uses the pretrained plan too, so only the initial weights differ
    scratch = train(ft_m, FINETUNE, plan=PreprocessPlan.from_dict(pre.plan)).checkpoint
    return held_out_dsc(finetuned, test_m), held_out_dsc(scratch, test_m)


@pytest.mark.criterion(7, "transfer fine-tuning")
def test_transfer(criterion, tmp_path):
    mech_ok, mech = transfer_mechanics(tmp_path / "mech")
    ft, scratch = transfer_study(tmp_path / "study")
    ok = mech_ok and ft >= scratch
    criterion.record(ok, f"{mech}; held-out fg DSC finetuned {ft:.3f} vs scratch {scratch:.3f} at equal budget")
    assert ok


# 8. determinism and persistence


@pytest.mark.criterion(8, "determinism and persistence")
def test_determinism_and_persistence(criterion, tmp_path):
    spec = PhantomSpec.from_dict({"dims": [16, 16, 16], "spacing_mm": [3, 3, 3], "classes": SUBSET, "class_specs": {c: {"diameter_mm": [9, 15]} for c in SUBSET}})
    m = generate_dataset(spec, 3, tmp_path / "ph")
    cfg = TrainConfig(epochs=6, batches_per_epoch=2, patch_size=(16, 16, 16), num_stages=3, base_channels=4)
    a, b = train(m, cfg), train(m, cfg)
    same_ckpt = to_bytes(a.checkpoint) == to_bytes(b.checkpoint)
    ct = read_nifti(m.image_path(m.entries[0]), kind="image")
    plan = PreprocessPlan.from_dict(a.checkpoint.plan)
    pa = infer(load_checkpoint_roundtrip(a.checkpoint, tmp_path / "a.lseg").build_network(), ct, plan)
    pb = infer(b.checkpoint.build_network(), ct, plan)
    same_pred = pa.data.tobytes() == pb.data.tobytes()
    half = train(m, cfg, stop_after=3).checkpoint
    resumed = train(m, cfg, resume=load_checkpoint_roundtrip(half, tmp_path / "half.lseg"))
    resume_ok = to_bytes(resumed.checkpoint) == to_bytes(a.checkpoint)
    nifti_bad = nifti_round_trips(tmp_path / "nii")
    ok = same_ckpt and same_pred and resume_ok and nifti_bad == 0
    criterion.record(
        ok,
        f"checkpoints identical={same_ckpt}, predictions identical={same_pred}, "
        f"resume at epoch 3 identical={resume_ok}, NIfTI round-trip failures {nifti_bad}/60",
    )
    assert ok


def load_checkpoint_roundtrip(ckpt, path):
    save_checkpoint(ckpt, path)
    return load_checkpoint(path)


def nifti_round_trips(out) -> int:
    out.mkdir()
    rng = np.random.default_rng(8)
    bad = 0
    for k in range(60):
        dims = tuple(int(v) for v in rng.integers(1, 12, size=3))
        spacing = tuple(float(v) for v in rng.choice([0.5, 0.8, 1.0, 2.5, 3.0], size=3))
        meta = VolumeMeta(dims, spacing)
        kind = k % 3
        if kind == 0:
            vol = LabelVolume(meta, rng.integers(0, 8, size=dims, dtype=np.uint8))
        elif kind == 1:
            vol = CtVolume(meta, rng.integers(-1024, 3000, size=dims).astype(np.int16))
        else:
            vol = CtVolume(meta, rng.standard_normal(dims).astype(np.float32))
        path = out / (f"v{k}.nii.gz" if k % 2 else f"v{k}.nii")
        write_nifti(vol, path)
        back = read_nifti(path)
        same = (
            back.data.dtype == vol.data.dtype
            and back.data.tobytes() == vol.data.tobytes()
            and back.meta.dims == dims
            and np.array_equal(np.float32(back.meta.spacing_mm), np.float32(spacing))
        )
        bad += not same
    return bad


# 9. size taxonomy


@pytest.mark.criterion(9, "lesion size taxonomy")
def test_size_taxonomy(criterion):
    got = {}
    for d in (10, 20, 31):
        spec = PhantomSpec.from_dict({"classes": ["liver_tumor"], "class_specs": {"liver_tumor": {"diameter_mm": [d, d]}}})
        _, lab, ledger = generate_phantom(spec, 0)
        (inst,) = connected_components_3d(lab.data, 1)
        measured = lesion_diameter(inst, spec.spacing_mm)
        got[d] = (ledger[0].diameter_mm, measured, size_category(measured))
    ok = got[10][2] == "small" and got[31][2] == "large" and got[20] == (20.0, 20.0, "small")
    criterion.record(ok, ", ".join(f"{d} mm -> measured {v[1]:.0f} mm {v[2]}" for d, v in got.items()))
    assert ok

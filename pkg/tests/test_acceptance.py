"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy criteria (registration recovery, consistency ablation, fusion
hierarchy, atlas-count trend, similarity training) are marked ``slow`` but
run by default; together they take roughly a quarter of an hour on one core.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from crossmas import pipeline
from crossmas.cli import EXIT_OK, main
from crossmas.ddf import DisplacementField, restore_roundtrip, roundtrip_residual, warp_array, warp_array_vjp
from crossmas.fusion import lwf_fuse, majority_vote
from crossmas.losses import consistency_grad, consistency_loss, soft_dice_grad
from crossmas.metrics import asd, dice_score, hausdorff, volume_difference
from crossmas.nnops import GateParams, attention_gate, attention_gate_backward, grad_check
from crossmas.phantom import PhantomConfig, generate_pair
from crossmas.registration import RegistrationConfig, RegistrationObjective, register_bidirectional
from crossmas.similarity import LN2, PatchSpec, ground_truth_similarity, predict_similarity, roc_auc
from crossmas.volume import LabelMap, Volume, zscore_normalize

from oracles import brute_asd_hd, brute_gt_similarity, brute_weighted_vote

# ---------------------------------------------------------------------------
# Fast oracle criteria
# ---------------------------------------------------------------------------


def test_warping_identity(criterion):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    same = 0
    for _ in range(20):
        dims = tuple(rng.integers(1, 20, 3))
        f = rng.normal(size=(int(rng.integers(1, 4)),) + dims)
        same += warp_array(f, np.zeros((3,) + dims)).tobytes() == f.tobytes()
    dt = time.perf_counter() - t0
    assert criterion("warping identity", same == 20 and dt < 1.0, f"{same}/20 bitwise identical, {dt:.3f}s")


def _gate_check(rng):
    g, f, w = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(3, 6, 6, 6)), rng.normal(size=(3, 6, 6, 6))
    p0 = GateParams.random(2, 3, 4, seed=5)

    def fn(params):
        p = GateParams.from_dict({k: params[k] for k in p0.as_dict()})
        out, _ = attention_gate(params["g"], params["f"], p)
        return float(np.sum(w * out)), attention_gate_backward(params["g"], params["f"], p, w)

    return grad_check(fn, dict(p0.as_dict(), g=g, f=f), probe=20)


def _pipeline_check(rng):
    dims = (8, 8, 8)
    grid = np.stack(np.meshgrid(*[np.arange(8.0)] * 3, indexing="ij"))
    lab = (np.sum((grid - 3.5) ** 2, axis=0) <= 6.25).astype(int)
    tgt = (np.sum((grid - np.array([4.2, 3.5, 3.0]).reshape(3, 1, 1, 1)) ** 2, axis=0) <= 6.25).astype(int)
    cfg = RegistrationConfig(control_spacing=3, scales=(0.0, 1.0), lam=0.5, l1_width=1e-6)
    obj = RegistrationObjective.from_volumes(Volume(rng.normal(size=dims)), LabelMap(lab),
                                             Volume(rng.normal(size=dims)), LabelMap(tgt), cfg)

    def fn(p):
        loss, grad, _ = obj(p["params"])
        return loss.total, {"params": grad}

    return grad_check(fn, {"params": rng.uniform(-0.8, 0.8, size=(2, 3) + obj.grid_dims())}, probe=40, step=1e-6)


def test_gradient_suite(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    errs = {}

    f = rng.normal(size=(2, 5, 5, 5))
    g = rng.normal(size=f.shape)
    # fractional offsets keep sample points off the cell faces where trilinear weights kink
    disp0 = rng.integers(-1, 2, size=(3, 5, 5, 5)) + rng.uniform(0.2, 0.8, size=(3, 5, 5, 5))

    def warp_fn(p):
        gf, gd = warp_array_vjp(p["f"], p["d"], g)
        return float(np.sum(g * warp_array(p["f"], p["d"]))), {"f": gf, "d": gd}

    errs["warp"] = grad_check(warp_fn, {"f": f, "d": disp0}, probe=30, step=1e-6)

    p = rng.uniform(size=(2, 4, 4, 4))
    errs["soft dice"] = grad_check(lambda q: (lambda v, gq: (v, {"q": gq}))(*soft_dice_grad(p, q["q"])),
                                   {"q": rng.uniform(size=(2, 4, 4, 4))}, probe=30)

    ia, it = rng.normal(size=(2, 6, 5, 4))
    u0 = rng.integers(-1, 2, size=(3, 6, 5, 4)) + rng.uniform(0.2, 0.8, size=(3, 6, 5, 4))
    v0 = rng.integers(-1, 2, size=(3, 6, 5, 4)) + rng.uniform(0.2, 0.8, size=(3, 6, 5, 4))

    def cons_fn(prm):
        value, gu, gv = consistency_grad(ia, it, prm["u"], prm["v"])
        return value, {"u": gu, "v": gv}

    errs["consistency"] = grad_check(cons_fn, {"u": u0, "v": v0}, probe=25, step=1e-7)
    errs["attention gate"] = _gate_check(rng)
    pipe = _pipeline_check(rng)
    dt = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-5 and pipe < 1e-3 and dt < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", pipeline 8^3 {pipe:.1e}, {dt:.1f}s"
    assert criterion("gradient suite", ok, detail)


def test_consistency_exactness(criterion):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    dims = (12, 11, 10)
    ok = True
    for t in [(1, 0, 0), (0, -2, 1), (2, 1, -1)]:
        img = Volume(rng.normal(size=dims))
        u, v = DisplacementField.constant(dims, t), DisplacementField.constant(dims, tuple(-c for c in t))
        for first, second in ((u, v), (v, u)):
            res = restore_roundtrip(img, first, second).data - img.data
            m = 2  # beyond |t| every sample stays inside the grid
            ok &= bool(np.all(res[m:-m, m:-m, m:-m] == 0.0))
    ramp = Volume(np.broadcast_to(np.arange(10.0)[:, None, None], (10, 4, 4)).copy())
    one = DisplacementField.constant(ramp.dims, (1, 0, 0))
    res = restore_roundtrip(ramp, one, one).data - ramp.data
    ok &= bool(np.all(res[:-2] == 2.0))
    ok &= consistency_loss(ramp, ramp, one, one).total > 0
    dt = time.perf_counter() - t0
    assert criterion("consistency exactness", ok and dt < 1.0, f"interior zero and ramp residual 2, {dt:.3f}s")


def test_gt_similarity_oracle(criterion):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    same = 0
    for _ in range(20):
        a, b = rng.integers(0, 3, (2, 12, 12, 12))
        w = ground_truth_similarity(LabelMap(a, label_set=(0, 1, 2)), LabelMap(b, label_set=(0, 1, 2)))
        same += np.array_equal(w.data, brute_gt_similarity(a, b, (1, 1, 1)))
    dt = time.perf_counter() - t0
    assert criterion("patch similarity oracle", same == 20 and dt < 5, f"{same}/20 exact, {dt:.2f}s")


def test_fusion_reductions(criterion):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    same = single = 0
    for _ in range(20):
        stack = [LabelMap(rng.integers(0, 4, (6, 5, 4)), label_set=(0, 1, 2, 3)) for _ in range(5)]
        c = rng.uniform(0.05, 1.0)
        mv = majority_vote(stack).data
        lwf = lwf_fuse(stack, [np.full((6, 5, 4), c)] * 5).data
        same += np.array_equal(mv, lwf) and np.array_equal(
            mv, brute_weighted_vote(np.stack([m.data for m in stack]), np.ones((5, 6, 5, 4))))
        single += np.array_equal(lwf_fuse(stack[:1], [rng.uniform(0.01, 1, (6, 5, 4))]).data, stack[0].data)
    dt = time.perf_counter() - t0
    ok = same == 20 and single == 20 and dt < 5
    assert criterion("fusion reductions", ok, f"constant LWF == MV {same}/20, N=1 identity {single}/20, {dt:.2f}s")


def test_metric_oracles(criterion):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    counting = oracle = ordered = 0
    worst = 0.0
    for i in range(20):
        dims = tuple(rng.integers(4, 13, 3))
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        a, b = rng.integers(0, 3, (2,) + dims)
        la, lb = LabelMap(a, spacing=spacing), LabelMap(b, spacing=spacing)
        inter = np.sum((a == 1) & (b == 1))
        counting += (dice_score(la, lb, 1) == 100.0 * 2 * inter / (np.sum(a == 1) + np.sum(b == 1))
                     and volume_difference(la, lb, 1) == abs(int(np.sum(a == 1)) - int(np.sum(b == 1)))
                     * float(np.prod(spacing)) / 1000)
        ma, mb = rng.uniform(size=dims) < 0.3, rng.uniform(size=dims) < 0.3
        ma[0, 0, 0] = mb[-1, -1, -1] = True
        ref_asd, ref_hd = brute_asd_hd(ma, mb, spacing)
        ba, bb = LabelMap(ma.astype(int), spacing=spacing), LabelMap(mb.astype(int), spacing=spacing)
        err = max(abs(asd(ba, bb, 1) - ref_asd), abs(hausdorff(ba, bb, 1) - ref_hd))
        worst = max(worst, err)
        oracle += err < 1e-9
    for i in range(100):
        dims = tuple(rng.integers(3, 13, 3))
        ma, mb = rng.uniform(size=dims) < rng.uniform(0.1, 0.7), rng.uniform(size=dims) < rng.uniform(0.1, 0.7)
        ma[0, 0, 0] = mb[0, 0, 0] = True
        ba, bb = LabelMap(ma.astype(int)), LabelMap(mb.astype(int))
        ordered += hausdorff(ba, bb, 1) >= asd(ba, bb, 1)
    dt = time.perf_counter() - t0
    ok = counting == 20 and oracle == 20 and ordered == 100 and dt < 30
    assert criterion("metric oracles", ok, f"DS/VD {counting}/20, ASD/HD {oracle}/20 (max err {worst:.1e} mm), "
                                           f"HD>=ASD {ordered}/100, {dt:.1f}s")


# ---------------------------------------------------------------------------
# Registration criteria
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_registration_recovery(criterion):
    t0 = time.perf_counter()
    good, lines = 0, []
    for seed in range(10):
        # the anatomy moves by -3 voxels along x, so U must sample the atlas at x + 3
        (ai, al), (ti, tl), _ = generate_pair(PhantomConfig(translation=(-3.0, 0.0, 0.0), seed=seed))
        res = register_bidirectional(zscore_normalize(ai), al, zscore_normalize(ti), tl)
        interior = tl.foreground
        mean_u = res.U.vectors[:, interior].mean(axis=1)
        err = float(np.linalg.norm(mean_u - np.array([3.0, 0.0, 0.0])))
        ok = res.final_dice >= 95.0 and err <= 0.5
        good += ok
        lines.append(f"seed {seed}: DS {res.final_dice:.1f} |mean U - (3,0,0)| {err:.3f}")
    dt = time.perf_counter() - t0
    print("\n".join(lines))
    assert criterion("registration recovery", good >= 9 and dt < 300, f"{good}/10 seeds, {dt:.0f}s")


@pytest.mark.slow
def test_consistency_ablation(criterion):
    t0 = time.perf_counter()
    with_cons, without = [], []
    for seed in range(10):
        (ai, al), (ti, tl), _ = generate_pair(PhantomConfig(amplitude=2.0, seed=seed))
        ai, ti = zscore_normalize(ai), zscore_normalize(ti)
        for lam, store in ((0.1, with_cons), (0.0, without)):
            r = register_bidirectional(ai, al, ti, tl, RegistrationConfig(lam=lam))
            store.append(0.5 * (roundtrip_residual(ai, r.U, r.V) + roundtrip_residual(ti, r.V, r.U)))
    dt = time.perf_counter() - t0
    a, b = float(np.mean(with_cons)), float(np.mean(without))
    wins = sum(x < y for x, y in zip(with_cons, without))
    assert criterion("consistency ablation", a < b and dt < 900,
                     f"residual {a:.4f} (lambda 0.1) vs {b:.4f} (lambda 0), lower on {wins}/10 pairs, {dt:.0f}s")


# ---------------------------------------------------------------------------
# Cohort criteria: one 10-atlas cohort shared by fusion, sweep and training
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    t0 = time.perf_counter()
    pipeline.make_cohort(out, PhantomConfig(dims=(32, 32, 32), amplitude=2.0), n_atlases=10, n_targets=3,
                         seed=7, n_train_targets=2)
    test_cfg = pipeline.PipelineConfig.load(out / "pipeline.json")
    train_cfg = pipeline.PipelineConfig.load(out / "train_pipeline.json")
    for cfg in (test_cfg, train_cfg):
        _, n_div = pipeline.run_registration(cfg, out)
        assert n_div == 0
    t_reg = time.perf_counter() - t0
    t1 = time.perf_counter()
    result = pipeline.run_training(train_cfg, out)
    t_train = time.perf_counter() - t1
    test_cfg.model = str(out / "similarity_model.json")
    t2 = time.perf_counter()
    ds = {m: pipeline.run_fusion(test_cfg, out, m).mean("ds") for m in ("mv", "lwf-oracle", "lwf-learned")}
    t_fuse = time.perf_counter() - t2
    return {"out": out, "cfg": test_cfg, "train": result, "ds": ds,
            "t_reg": t_reg, "t_train": t_train, "t_fuse": t_fuse}


@pytest.mark.slow
def test_fusion_hierarchy(cohort, criterion):
    ds = cohort["ds"]
    mv, oracle, learned = ds["mv"], ds["lwf-oracle"], ds["lwf-learned"]
    dt = cohort["t_reg"] + cohort["t_train"] + cohort["t_fuse"]
    ok = oracle >= learned >= mv - 0.5 and learned > mv and dt < 1200
    assert criterion("fusion hierarchy", ok,
                     f"oracle {oracle:.3f} >= learned {learned:.3f} >= MV {mv:.3f} - 0.5, {dt:.0f}s")


@pytest.mark.slow
def test_atlas_count_trend(cohort, criterion):
    t0 = time.perf_counter()
    rows = pipeline.run_sweep(cohort["cfg"], cohort["out"], range(1, 11), "lwf-learned")
    dt = time.perf_counter() - t0
    means = [m for _, m, _ in rows]
    running = np.maximum.accumulate(means)
    # every count stays within 0.5 of the best smaller count, and more atlases beat one
    ok = all(m >= r - 0.5 for m, r in zip(means[1:], running[:-1])) and means[-1] > means[0] and dt < 1200
    assert criterion("atlas-count trend", ok, "DS(n) " + " ".join(f"{m:.2f}" for m in means) + f", {dt:.0f}s")


@pytest.mark.slow
def test_similarity_training(cohort, criterion):
    result = cohort["train"]
    cfg, out = cohort["cfg"], cohort["out"]
    scores, labels = [], []
    for target in cfg.targets:  # held out: none of these targets were used for training
        img = zscore_normalize(pipeline.read_volume(cfg.resolve(target["image"])))
        gold = pipeline.read_volume(cfg.resolve(target["label"]))
        for atlas in cfg.atlases:
            warped = pipeline.read_volume(pipeline.job_dir(out, target, atlas) / "warped_label.mvol")
            scores.append(predict_similarity(result.model, img, warped).data.ravel())
            labels.append(ground_truth_similarity(warped, gold, PatchSpec()).data.ravel() == 1.0)
    auc = roc_auc(np.concatenate(scores), np.concatenate(labels))
    ce = result.trace[-1]
    ok = ce < LN2 and auc > 0.5 and cohort["t_train"] < 120
    assert criterion("similarity training", ok,
                     f"cross-entropy {ce:.4f} < ln 2, held-out AUC {auc:.4f}, {cohort['t_train']:.0f}s")


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def _cli_pipeline(cfg_path, out):
    codes = [main(["phantom", "--config", str(cfg_path), "--out", str(out)])]
    pipe, train = str(out / "pipeline.json"), str(out / "train_pipeline.json")
    codes.append(main(["register", "--config", pipe, "--out", str(out), "--jobs", "2"]))
    codes.append(main(["register", "--config", train, "--out", str(out)]))
    codes.append(main(["train-sim", "--config", train, "--out", str(out)]))
    for method in ("mv", "lwf-oracle", "lwf-mi"):
        codes.append(main(["fuse", "--config", pipe, "--out", str(out), "--fusion", method]))
    codes.append(main(["sweep", "--config", pipe, "--out", str(out), "--fusion", "lwf-learned",
                       "--model", str(out / "similarity_model.json")]))
    return codes


def test_cli_determinism(tmp_path, criterion):
    cfg = tmp_path / "phantom.json"
    cfg.write_text(json.dumps({"phantom": {"dims": [20, 20, 20], "amplitude": 1.5}, "seed": 11,
                               "registration": {"iterations": 15, "control_spacing": 6},
                               "n_atlases": 3, "n_targets": 2, "n_train_targets": 1}))
    codes = _cli_pipeline(cfg, tmp_path / "run")
    first = _tree(tmp_path / "run")
    codes += _cli_pipeline(cfg, tmp_path / "run")
    again = _tree(tmp_path / "run")
    fresh_codes = _cli_pipeline(cfg, tmp_path / "fresh")
    fresh = _tree(tmp_path / "fresh")
    # the sweep manifest records the absolute model path, which differs between the two directories
    path_bound = {"run_manifest_sweep_lwf-learned.json"}
    in_place = first == again
    across = first.keys() == fresh.keys() and all(first[k] == fresh[k] for k in first if k not in path_bound)
    ok = in_place and across and set(codes + fresh_codes) == {EXIT_OK}
    assert criterion("determinism", ok, f"{len(first)} files, rerun in place identical: {in_place}, "
                                        f"fresh directory identical: {across}")

"""End-to-end acceptance: nine numbered criteria, one pass/fail line each.

Criteria 1-5 check the numerical core against independent references.
Criteria 6-8 run the staged-curriculum experiment matrix at desk scale
(64x64, 20 epochs, three seeds) and compare training modes. Criterion 9
checks bitwise reproducibility and interruption recovery.
"""

import time
from pathlib import Path

import numpy as np
import pytest

import _oracles as O
from conftest import run_chain, run_until_crash, tiny_stage_config
from ilseg import data as D
from ilseg import losses as L
from ilseg import memory as Mem
from ilseg import metrics as ME
from ilseg import model as M
from ilseg import report as R
from ilseg import tensor as T
from ilseg import trainer as TR

ACC_GEN = D.GeneratorConfig(
    image_size=64,
    train_count=16,
    val_count=8,
    test_count=4,
    full_val_count=8,
    full_test_count=4,
)
ACC_DATA_SEED = 7
SEEDS = (11, 12, 13)


def _criterion(n, ok, detail):
    print(f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n}: {detail}"


# ---------------------------------------------------------------------------
# experiment matrix shared by criteria 6-8


@pytest.fixture(scope="session")
def matrix(tmp_path_factory):
    """Train full/womem (3 seeds), ft and joint (seed 11), eval every stage."""
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("acceptance")
    manifests = D.generate(ACC_GEN, ACC_DATA_SEED, root / "data")
    evals = root / "evals"
    dice = {}

    def _eval(ckpt_path, stage, csv_to):
        ckpt = TR.load_checkpoint(ckpt_path)
        rep = ME.evaluate(TR.model_from_checkpoint(ckpt), manifests["full"], split="val", stage=stage)
        if csv_to is not None:
            csv_to.parent.mkdir(parents=True, exist_ok=True)
            rep.write_csv(csv_to)
        return {r.category_id: r.dice_mean for r in rep.rows if not r.absent}

    def _cfg(stage, mode, seed, **kw):
        return TR.StageConfig(
            stage=stage,
            new_categories=D.STAGE_CATEGORIES[stage - 1],
            manifest=str(manifests[f"stage_{stage}"]),
            mode=mode,
            epochs=20,
            batch_size=2,
            lr=1e-3,
            lambda_kd=2.0,
            seed=seed,
            **kw,
        )

    for mode in ("full", "womem"):
        for seed in SEEDS:
            rdir = root / "runs" / f"{mode}_{seed}"
            prev = None
            per_stage = {}
            for t in (1, 2, 3, 4):
                prev = TR.run_stage(prev, _cfg(t, mode, seed), run_dir=rdir)
                csv_to = evals / mode / f"stage_{t}.csv" if seed == SEEDS[0] else None
                per_stage[t] = _eval(rdir / f"stage_{t}.ckpt", t, csv_to)
            dice[(mode, seed)] = per_stage

    rdir = root / "runs" / "ft_11"
    prev = None
    per_stage = {}
    for t in (1, 2, 3, 4):
        prev = TR.run_ft_baseline(prev, _cfg(t, "ft", SEEDS[0]), run_dir=rdir)
        per_stage[t] = _eval(rdir / f"stage_{t}.ckpt", t, evals / "ft" / f"stage_{t}.csv")
    dice[("ft", SEEDS[0])] = per_stage

    jcfg = TR.StageConfig(
        stage=4, new_categories=(1, 2, 3, 4, 5), manifest=str(manifests["stage_1"]),
        mode="joint", epochs=20, batch_size=2, lr=1e-3, lambda_kd=2.0, seed=SEEDS[0],
    )
    jdir = root / "runs" / "joint_11"
    TR.run_joint([manifests[f"stage_{t}"] for t in (1, 2, 3, 4)], jcfg, run_dir=jdir)
    dice[("joint", SEEDS[0])] = {4: _eval(jdir / "stage_4.ckpt", 4, evals / "joint" / "stage_4.csv")}

    csv_path, svg_path = R.build_report(evals, root / "report")
    return {
        "dice": dice,
        "elapsed": time.perf_counter() - t0,
        "csv": csv_path,
        "svg": svg_path,
    }


# ---------------------------------------------------------------------------
# criterion 1: remapped distributions stay normalized, old entries untouched


def test_criterion_1_remap_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence(2024))
    voxels = 0
    worst_sum = 0.0
    bitwise_ok = True
    while voxels < 10000:
        n_old = int(rng.integers(0, 4))
        n_new = int(rng.integers(1, 4))
        ids = [int(c) for c in rng.permutation(np.arange(1, 9))[: n_old + n_new]]
        space = L.LabelSpace(old=tuple(ids[:n_old]), new=tuple(ids[n_old:]))
        scale = float(rng.uniform(0.5, 8.0))
        logits = T.constant(
            (rng.normal(size=(2, 1 + n_old + n_new, 7, 9)) * scale).astype(np.float32)
        )
        hat = L.remap_hat(logits, space).data
        tilde = L.remap_tilde(logits, space).data
        for probs in (hat, tilde):
            worst_sum = max(worst_sum, float(np.abs(probs.sum(axis=1) - 1.0).max()))
        if n_old:
            ref = T.softmax(logits).data[:, 1 : 1 + n_old]
            bitwise_ok = bitwise_ok and hat[:, 1:].tobytes() == ref.tobytes()
        voxels += 2 * 7 * 9
    elapsed = time.perf_counter() - t0
    ok = worst_sum <= 1e-5 and bitwise_ok and elapsed < 5.0
    _criterion(
        1, ok,
        f"{voxels} voxels, max |sum-1|={worst_sum:.2e}, old entries bitwise={bitwise_ok}, {elapsed:.2f}s",
    )


# ---------------------------------------------------------------------------
# criterion 2: every loss gradient matches central finite differences


def _fd_grad(f, data, h=1e-6):
    g = np.zeros_like(data)
    flat = data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def _check_leaves(build, leaves):
    """Max relative error between backward gradients and finite differences."""
    loss = build()
    for p in leaves:
        p.grad = None
    T.backward(loss)
    worst = 0.0
    for p in leaves:
        analytic = p.grad.copy()
        fd = _fd_grad(lambda: float(build().data), p.data)
        err = float(np.max(np.abs(analytic - fd)) / max(1.0, float(np.max(np.abs(fd)))))
        worst = max(worst, err)
    return worst


def _seg_instance(rng):
    n_old = int(rng.integers(0, 2))
    n_new = int(rng.integers(1, 3))
    ids = [int(c) for c in rng.permutation(np.arange(1, 7))[: n_old + n_new]]
    space = L.LabelSpace(old=tuple(ids[:n_old]), new=tuple(ids[n_old:]))
    logits = T.tensor(rng.normal(size=(1, 1 + n_old + n_new, 5, 5)), requires_grad=True, dtype=np.float64)
    labels = rng.choice([0, *space.new], size=(1, 5, 5)).astype(np.uint8)
    return [logits], lambda: L.seg_loss(L.remap_tilde(logits, space), labels, space, 0.7, 1.3)


def _kd_instance(rng):
    n_old = int(rng.integers(1, 3))
    space = L.LabelSpace(old=tuple(range(1, 1 + n_old)), new=(8,))
    logits = T.tensor(rng.normal(size=(1, 2 + n_old, 5, 5)), requires_grad=True, dtype=np.float64)
    raw = rng.uniform(0.05, 1.0, size=(1, 1 + n_old, 5, 5))
    old_probs = raw / raw.sum(axis=1, keepdims=True)
    temp = float(rng.choice([1.0, 2.0]))
    return [logits], lambda: L.kd_loss(L.remap_hat(logits, space), old_probs, temp)


def _make_bank(rng, n, feat, frozen):
    return Mem.MemoryBank(
        feature_channels=feat,
        category_ids=list(range(1, n + 1)),
        prototypes=rng.normal(size=(n, feat)),
        initialized=np.ones(n, dtype=bool),
        frozen=np.full(n, frozen),
        m0=0.9, p=0.9, k=0, total=10,
    )


def _mem_instance(rng):
    bank = _make_bank(rng, 2, 4, frozen=False)
    head_w = T.tensor(rng.normal(size=(3, 4, 1, 1)), requires_grad=True, dtype=np.float64)
    head_b = T.tensor(rng.normal(size=(3,)), requires_grad=True, dtype=np.float64)
    return [head_w, head_b], lambda: Mem.mem_loss(bank, head_w, head_b)


def _same_instance(rng):
    bank = _make_bank(rng, 2, 4, frozen=True)
    feats = T.tensor(rng.normal(size=(1, 4, 5, 5)), requires_grad=True, dtype=np.float64)
    masks = {}
    for cid in (1, 2):
        m = rng.uniform(size=(1, 5, 5)) < 0.4
        m.reshape(-1)[int(rng.integers(0, 25))] = True  # at least one voxel
        masks[cid] = m
    return [feats], lambda: Mem.same_loss(bank, feats, masks)


def _oppo_instance(rng):
    margin = 0.25
    for _ in range(50):
        bank = _make_bank(rng, 2, 4, frozen=True)
        arr = rng.normal(size=(1, 4, 5, 5))
        mask = rng.uniform(size=(1, 5, 5)) < 0.4
        mask.reshape(-1)[int(rng.integers(0, 25))] = True
        bg = ~mask
        mean_new = arr[0][:, mask[0]].mean(axis=1)
        mean_bg = arr[0][:, bg[0]].mean(axis=1)
        refs = [mean_bg, bank.prototypes[0], bank.prototypes[1]]
        cos = [
            float(np.dot(mean_new, r) / max(np.linalg.norm(mean_new) * np.linalg.norm(r), 1e-12))
            for r in refs
        ]
        if min(abs(c - margin) for c in cos) > 5e-3:  # keep clear of the hinge kink
            feats = T.tensor(arr, requires_grad=True, dtype=np.float64)
            return [feats], lambda: Mem.oppo_loss(bank, feats, {5: mask}, bg, margin)
    raise AssertionError("could not draw an instance away from the hinge")


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    builders = {
        "seg": _seg_instance,
        "kd": _kd_instance,
        "mem": _mem_instance,
        "same": _same_instance,
        "oppo": _oppo_instance,
    }
    worst = {}
    for li, (name, make) in enumerate(builders.items()):
        errs = []
        for i in range(20):
            rng = np.random.default_rng(np.random.SeedSequence(7070, spawn_key=(li, i)))
            leaves, build = make(rng)
            errs.append(_check_leaves(build, leaves))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-5 for e in worst.values()) and elapsed < 120.0
    detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    _criterion(2, ok, f"max relative gradient error {detail}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: prototype momentum schedule endpoints and monotonicity


def test_criterion_3_momentum_schedule():
    end_err = 0.0
    for total in (1, 7, 100, 400):
        end_err = max(end_err, abs(Mem.momentum(0, total) - 0.9))
        end_err = max(end_err, abs(Mem.momentum(total, total) - 0.09))
    rng = np.random.default_rng(33)
    monotone = True
    for _ in range(5):
        m0 = float(rng.uniform(0.05, 1.0))
        p = float(rng.uniform(0.1, 4.0))
        total = int(rng.integers(1, 300))
        vals = [Mem.momentum(k, total, m0, p) for k in range(total + 1)]
        monotone = monotone and all(a > b for a, b in zip(vals, vals[1:]))
        monotone = monotone and all(0.0 < v <= m0 for v in vals)
    ok = end_err <= 1e-12 and monotone
    _criterion(3, ok, f"endpoint error {end_err:.2e}, 5 random schedules monotone={monotone}")


# ---------------------------------------------------------------------------
# criterion 4: incremental EMA equals the closed form


def test_criterion_4_ema_closed_form():
    rng = np.random.default_rng(44)
    worst = 0.0
    for _ in range(10):
        bank = Mem.MemoryBank(feature_channels=6)
        bank.add_categories((3,), total=100)
        updates = []
        for k in range(100):
            r = rng.normal(size=6)
            m = Mem.momentum(k, 100, 0.9, 0.9)
            Mem.ema_update(bank, 3, r, m)
            updates.append((r, m))
        ref = O.ema_closed_form(updates)
        worst = max(worst, float(np.abs(bank.prototypes[0] - ref).max()))
    ok = worst <= 1e-6
    _criterion(4, ok, f"10 sequences of 100 updates, max |incremental - closed form| = {worst:.2e}")


# ---------------------------------------------------------------------------
# criterion 5: metric implementations equal brute-force references


def _random_mask(rng, side):
    if rng.uniform() < 0.5:
        yy, xx = np.mgrid[0:side, 0:side]
        mask = np.zeros((side, side), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, side, size=2)
            r = rng.uniform(2, side / 3)
            mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        return mask
    return rng.uniform(size=(side, side)) < 0.45


def test_criterion_5_metric_oracles():
    assert ME.dice(np.array([[1, 1], [0, 0]], bool), np.array([[1, 0], [1, 0]], bool)) == 0.5
    a = np.zeros((6, 6), bool)
    b = np.zeros((6, 6), bool)
    a[1:4, 1:4] = True
    b[1:4, 2:5] = True
    assert ME.hd95(a, b) == (1.0, False)

    rng = np.random.default_rng(55)
    worst = 0.0
    flags_ok = True
    for i in range(50):
        side = 64 if i % 2 == 0 else 16
        pred, gt = _random_mask(rng, side), _random_mask(rng, side)
        spacing = 1.0 if i % 3 else (1.3, 0.7)
        worst = max(worst, abs(ME.dice(pred, gt) - O.dice_oracle(pred, gt)))
        got = ME.hd95(pred, gt, spacing)
        ref_val, ref_deg = O.hd95_oracle(pred, gt, spacing)
        worst = max(worst, abs(got.value - ref_val))
        flags_ok = flags_ok and got.degenerate == ref_deg
    ok = worst <= 1e-9 and flags_ok
    _criterion(5, ok, f"50 mask pairs, max |impl - brute force| = {worst:.2e}, hand values exact")


# ---------------------------------------------------------------------------
# criteria 6-8: the staged experiment matrix


def test_criterion_6_forgetting_gap(matrix):
    d = matrix["dice"]
    ft = d[("ft", SEEDS[0])][4].get(1, 0.0)
    full = d[("full", SEEDS[0])][4].get(1, 0.0)
    elapsed = matrix["elapsed"]
    ok = ft < 0.2 and full >= 0.75 and elapsed < 1800.0
    _criterion(
        6, ok,
        f"stage-1 category DC after stage 4: ft={ft:.3f} (<0.2), full={full:.3f} (>=0.75), matrix {elapsed:.0f}s",
    )


def test_criterion_7_memory_module_helps(matrix):
    d = matrix["dice"]
    means = {}
    for mode in ("full", "womem"):
        vals = []
        for seed in SEEDS:
            for t in (2, 3, 4):
                old_ids = [c for cats in D.STAGE_CATEGORIES[: t - 1] for c in cats]
                vals.extend(d[(mode, seed)][t][c] for c in old_ids)
        means[mode] = float(np.mean(vals))
    csv_lines = Path(matrix["csv"]).read_text().splitlines()
    svg = Path(matrix["svg"]).read_text()
    artifacts_ok = (
        csv_lines[0] == "mode,stage,category,DC,HD95,degenerate"
        and len(csv_lines) == 1 + 38  # 11 rows each for full/womem/ft, 5 for joint
        and svg.count("<polyline") == 3
        and svg.count("<circle") >= 1
    )
    ok = means["full"] >= means["womem"] and artifacts_ok
    _criterion(
        7, ok,
        f"old-category DC over 3 seeds, stages 2-4: full={means['full']:.3f} >= womem={means['womem']:.3f}; "
        f"report artifacts ok={artifacts_ok}",
    )


def test_criterion_8_joint_upper_bound(matrix):
    d = matrix["dice"]
    joint_mean = float(np.mean(list(d[("joint", SEEDS[0])][4].values())))
    full_mean = float(np.mean(list(d[("full", SEEDS[0])][4].values())))
    ok = joint_mean >= full_mean - 0.05
    _criterion(8, ok, f"final mean DC: joint={joint_mean:.3f} >= full={full_mean:.3f} - 0.05")


# ---------------------------------------------------------------------------
# criterion 9: bitwise determinism and interruption recovery


def test_criterion_9_determinism_and_resume(tiny_dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_chain(tiny_dataset, a, stages=(1, 2), epochs=3)
    run_chain(tiny_dataset, b, stages=(1, 2), epochs=3)
    files = ("stage_1.ckpt", "stage_2.ckpt", "stage_1.log.jsonl", "stage_2.log.jsonl")
    repro = all((a / f).read_bytes() == (b / f).read_bytes() for f in files)

    plain, bumpy = tmp_path / "plain", tmp_path / "bumpy"
    run_chain(tiny_dataset, plain, stages=(1,), epochs=6)
    cfg = tiny_stage_config(1, tiny_dataset, epochs=6)
    run_until_crash(TR.run_stage, None, cfg, bumpy, crash_after=3)
    snap = TR.load_checkpoint(bumpy / "stage_1.epoch.ckpt")
    TR.run_stage(None, cfg, run_dir=bumpy, resume_from=snap)
    resumed = all(
        (bumpy / f).read_bytes() == (plain / f).read_bytes()
        for f in ("stage_1.ckpt", "stage_1.log.jsonl")
    )
    ok = repro and resumed
    _criterion(9, ok, f"identical reruns bitwise={repro}, resume at epoch 3 of 6 bitwise={resumed}")

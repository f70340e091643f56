"""Acceptance criteria A1-A9. Each test prints one PASS/FAIL line.

A7 and A8 share one fixed-seed training run (about 6 minutes on one core).
"""
import time

import numpy as np
import pytest

from dbenet import cli, gradcheck
from dbenet.autodiff import ParamSet, Tensor
from dbenet.data import (Pair, ManifestEntry, checkpoint_bytes, load_checkpoint, model_to_checkpoint,
                         parse_checkpoint, read_manifest, read_ply, save_checkpoint, write_manifest, write_ply)
from dbenet.experiments import ExperimentConfig, transfer_direction
from dbenet.fusion import (cross_attention, desk_scale, forward, init_attention, init_dbenet, init_teacher,
                           synth_aux_modality)
from dbenet.geom import PointCloud, RigidTransform, kabsch, random_rotation
from dbenet.kpfcn import KPFCNConfig, init_kpfcn, kpfcn_encode
from dbenet.metrics import BenchmarkReport, evaluate_pair, rmse, rre, rte
from dbenet.registration import CorrespondenceSet, RansacConfig, RegistrationResult, ransac
from dbenet.selftest import dense_conv_reference
from dbenet.sfcn import SFCNConfig, SparseTensor, init_sfcn, sfcn_decode, sfcn_encode, sparse_conv
from dbenet.synth import make_dataset
from dbenet.training import (FREEZE_PRESETS, KDConfig, LossConfig, MiningResult, OptimConfig, finetune,
                             hardest_contrastive_loss, kd_loss, transfer_weights)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def test_a1_gradients(report):
    t0 = time.perf_counter()
    res = gradcheck.run("all")
    dt = time.perf_counter() - t0
    bad = [r.name for r in res if not r.passed]
    op_err = max(r.max_rel_err for r in res if not r.name.startswith("network"))
    net_err = max(r.max_rel_err for r in res if r.name.startswith("network"))
    ok = not bad and op_err < 1e-4 and net_err < 1e-3 and dt < 120
    report("A1", ok, f"{len(res)} checks, op max_rel_err={op_err:.2e}, network max_rel_err={net_err:.2e}, "
                     f"{dt:.1f}s, failing={bad}")


def _oracle_rre(Ra, Rb):
    M = Ra.T @ Rb
    return np.degrees(np.arccos(min(1.0, max(-1.0, (M[0, 0] + M[1, 1] + M[2, 2] - 1) / 2))))


def test_a2_kabsch_and_metrics(report):
    worst_t, worst_r, worst_m = 0.0, 0.0, 0.0
    recs, oracle = [], []
    for k in range(20):
        rng = np.random.default_rng([2, k])
        R, t = random_rotation(rng), rng.uniform(-1, 1, 3)
        X = rng.uniform(-0.5, 0.5, size=(60, 3))
        T = kabsch(X, X @ R.T + t)
        worst_t = max(worst_t, rte(T.translation, t))
        worst_r = max(worst_r, rre(T.rotation, R))

        # a noisy pair, a correspondence set and an estimate
        Y = X @ R.T + t + rng.normal(0, 0.02, size=X.shape)
        gt = RigidTransform(R, t)
        est = RigidTransform(random_rotation(rng, max_angle=np.radians(10)) @ R, t + rng.normal(0, 0.1, 3))
        src_ids = rng.integers(0, 60, 80)
        dst_ids = np.where(rng.random(80) < 0.5, src_ids, rng.integers(0, 60, 80))
        corr = CorrespondenceSet(src_ids, dst_ids, np.zeros(80))
        pair = Pair(PointCloud(X), PointCloud(Y), gt, f"p{k}")
        rec = evaluate_pair(pair, RegistrationResult(est, np.arange(5)), corr)
        recs.append(rec)

        # brute-force oracle, one point at a time
        Xg = [R @ x + t for x in X]
        ir = sum(np.sqrt(sum((Xg[i][a] - Y[j][a]) ** 2 for a in range(3))) <= 0.10
                 for i, j in zip(src_ids, dst_ids)) / 80
        D = np.array([[np.sqrt(sum((Xg[i][a] - Y[j][a]) ** 2 for a in range(3))) for j in range(60)]
                      for i in range(60)])
        gi = [i for i in range(60) if D[:, D[i].argmin()].argmin() == i and D[i].min() < 0.05]
        gj = [int(D[i].argmin()) for i in gi]
        err = np.sqrt(np.mean([sum((est.rotation @ X[i] + est.translation - Y[j]) ** 2) for i, j in zip(gi, gj)]))
        o = {"ir": ir, "rmse": err, "rte": np.sqrt(sum((est.translation - t) ** 2)),
             "rre": _oracle_rre(est.rotation, R)}
        oracle.append(o)
        worst_m = max(worst_m, abs(rec.inlier_ratio - ir), abs(rec.rmse - err), abs(rec.rte - o["rte"]),
                      abs(rec.rre - o["rre"]))
        worst_m = max(worst_m, abs(rmse(est, X[gi], Y[gj]) - err))
    agg = BenchmarkReport(recs).aggregates
    o_fmr = 100 * np.mean([o["ir"] > 0.05 for o in oracle])
    o_rr = 100 * np.mean([o["rmse"] < 0.2 for o in oracle])
    worst_m = max(worst_m, abs(agg["FMR"] - o_fmr), abs(agg["RR"] - o_rr),
                  abs(agg["IR"] - 100 * np.mean([o["ir"] for o in oracle])))
    ok = worst_t < 1e-9 and worst_r < 1e-6 and worst_m < 1e-9
    report("A2", ok, f"kabsch RTE={worst_t:.1e} m RRE={worst_r:.1e} deg; metric max deviation={worst_m:.1e} "
                     f"(FMR={agg['FMR']:.0f} RR={agg['RR']:.0f})")


def test_a3_ransac(report):
    t0 = time.perf_counter()
    worst_r, worst_t, hits = 0.0, 0.0, 0
    for k in range(20):
        rng = np.random.default_rng([3, k])
        n, n_out = 1000, 600
        R, t = random_rotation(rng), rng.uniform(-1, 1, 3)
        X = rng.uniform(-1, 1, size=(n, 3))
        Y = X @ R.T + t + rng.normal(0, 0.005, size=(n, 3))
        Y[:n_out] = rng.uniform(-2, 2, size=(n_out, 3))
        ids = np.arange(n)
        res = ransac(CorrespondenceSet(ids, ids, np.zeros(n)), X, Y, RansacConfig(epsilon=0.03, seed=k))
        e_r, e_t = rre(res.transform.rotation, R), rte(res.transform.translation, t)
        worst_r, worst_t = max(worst_r, e_r), max(worst_t, e_t)
        hits += e_r < 1.0 and e_t < 0.02
    dt = time.perf_counter() - t0
    report("A3", hits == 20 and dt < 10, f"{hits}/20 trials, worst RRE={worst_r:.3f} deg RTE={worst_t:.4f} m, "
                                         f"{dt:.2f}s")


def _rows(a):
    return Tensor(np.array(a, dtype=np.float64))


def test_a4_loss_values(report):
    cfg = LossConfig(m_p=0.1, m_n=1.4, lambda_n=0.5)
    m = MiningResult(np.array([0, 1]), np.array([0, 1]), np.array([1, 0]), np.array([1, 0]))
    zero = hardest_contrastive_loss(_rows([[1, 0], [0, 1]]), _rows([[1, 0], [0, 1]]), m, cfg).item()
    m1 = MiningResult(np.array([0]), np.array([0]), np.array([-1]), np.array([-1]))
    v016 = hardest_contrastive_loss(_rows([[0.0, 0.0]]), _rows([[0.5, 0.0]]), m1, cfg).item()
    kd = KDConfig()
    rng = np.random.default_rng(4)
    same = max(kd_loss(x, Tensor(x), kd).item() for x in rng.normal(size=(10, 6, 5)))
    kls = [kd_loss(rng.normal(size=(6, 5)) * s, Tensor(rng.normal(size=(6, 5))), KDConfig(temperature=T)).item()
           for s, T in zip(rng.uniform(0.1, 5, 100), rng.uniform(0.5, 4, 100))]
    ok = zero == 0.0 and v016 == (0.5 - 0.1) ** 2 and abs(same) < 1e-12 and min(kls) >= 0
    report("A4", ok, f"clamped={zero} single-positive={v016!r} KL(t,t)max={same:.1e} KL min over 100={min(kls):.3e}")


def test_a5_transfer_freeze(report):
    pairs = make_dataset("match", 2, 0, points_per_fragment=400)
    teacher_ckpt = model_to_checkpoint(init_teacher(desk_scale(), seed=9))
    student, _ = transfer_weights(teacher_ckpt, init_dbenet(desk_scale(), seed=0))
    problems = []
    for n in student.params.names():
        if n.startswith(("sfcn.encoder.", "sfcn.decoder.")) and \
                student.params[n].data.tobytes() != teacher_ckpt.tensors[n].tobytes():
            problems.append(f"transfer:{n}")
    for preset in ("enc", "enc+att", "enc+att+dec", "enc+dec"):
        frozen = tuple(p + "." for p in FREEZE_PRESETS[preset])
        res = finetune(pairs, student, preset, OptimConfig(lr=1e-3), LossConfig.for_voxel(0.05), epochs=2, seed=0)
        for n in student.params.names():
            same = student.params[n].data.tobytes() == res.model.params[n].data.tobytes()
            if n.startswith(frozen) != same:
                problems.append(f"{preset}:{n}")
    report("A5", not problems, f"4 freeze configs x 2 epochs, violations={problems[:5]}")


def _grid_cloud(rng, n, dl):
    return np.unique(rng.integers(0, 12, size=(n, 3)), axis=0) * dl + rng.uniform(0, 0.4 * dl, size=3)


def test_a6_structural(report):
    rng = np.random.default_rng(6)
    model = init_dbenet(desk_scale(), seed=0)
    pts = make_dataset("match", 1, 6, points_per_fragment=800)[0].src
    F = forward(pts, model).data
    norm_err = float(np.abs(np.linalg.norm(F, axis=1) - 1).max())

    ps = ParamSet(np.float64)
    init_attention(ps, 8, 6, 6, rng)
    _, A = cross_attention(Tensor(rng.normal(size=(40, 8)) * 5), Tensor(rng.normal(size=(17, 6)) * 5), ps,
                           return_weights=True)
    att_err = float(np.abs(A.data.sum(axis=1) - 1).max())

    scfg = SFCNConfig()
    sps = ParamSet(np.float32)
    init_sfcn(sps, scfg, rng)
    cloud = rng.uniform(0, 0.6, size=(200, 3))
    k = np.array([4, -8, 12])
    F0, s0 = sfcn_encode(PointCloud(cloud), sps, scfg)
    F1, s1 = sfcn_encode(PointCloud(cloud + k * scfg.voxel_size), sps, scfg)
    d0, d1 = sfcn_decode(F0, s0, sps, scfg).data, sfcn_decode(F1, s1, sps, scfg).data
    sfcn_err = max(float(np.abs(F0.data - F1.data).max()), float(np.abs(d0 - d1).max()))
    sfcn_err = sfcn_err if np.array_equal(s1.coords[-1], s0.coords[-1] + k) else np.inf

    kcfg = KPFCNConfig().with_kernel()
    kps = ParamSet(np.float32)
    init_kpfcn(kps, kcfg, rng)
    kp = _grid_cloud(rng, 150, kcfg.dl)
    shift = 4 * np.array([1, -2, 1]) * kcfg.dl
    kp_err = float(np.abs(kpfcn_encode(PointCloud(kp), kps, kcfg).data
                          - kpfcn_encode(PointCloud(kp + shift), kps, kcfg).data).max())

    conv_err = 0.0
    for s in range(10):
        r = np.random.default_rng([6, s])
        coords = np.unique(r.integers(0, 4, size=(40, 3)), axis=0)
        f, W = r.normal(size=(len(coords), 3)), r.normal(size=(27, 3, 4))
        got = sparse_conv(SparseTensor(coords, Tensor(f)), Tensor(W)).feats.data
        conv_err = max(conv_err, float(np.abs(got - dense_conv_reference(coords, f, W)).max()))
    ok = norm_err < 1e-6 and att_err < 1e-6 and sfcn_err < 1e-5 and kp_err < 1e-5 and conv_err < 1e-5
    report("A6", ok, f"unit-norm={norm_err:.1e} softmax-rows={att_err:.1e} sfcn-equiv={sfcn_err:.1e} "
                     f"kpfcn-inv={kp_err:.1e} conv-vs-dense={conv_err:.1e}")


@pytest.fixture(scope="module")
def training_run():
    t0 = time.perf_counter()
    out = transfer_direction(ExperimentConfig(master_seed=0))
    out["seconds"] = time.perf_counter() - t0
    return out


def _drop(h):
    return 1 - h[-1] / h[0]


def test_a7_training_effectiveness(report, training_run):
    sc, tr = training_run["scratch"], training_run["transfer"]
    drop = _drop(sc["history"])
    secs = sc["seconds"]
    ok = drop >= 0.5 and secs < 900
    report("A7", ok, f"scratch fine-tune loss {sc['history'][0]:.3f} -> {sc['history'][-1]:.3f} "
                     f"(drop {100 * drop:.1f}%, need >= 50%), {secs:.0f}s; transfer+freeze drop "
                     f"{100 * _drop(tr['history']):.1f}%")


def test_a8_transfer_direction(report, training_run):
    rr_t, rr_s = training_run["transfer"]["report"]["RR"], training_run["scratch"]["report"]["RR"]
    fmr_t, fmr_s = training_run["transfer"]["report"]["FMR"], training_run["scratch"]["report"]["FMR"]
    report("A8", rr_t >= rr_s, f"master seed 0, 50 held-out pairs: RR transfer+freeze={rr_t:.1f}% "
                               f"scratch={rr_s:.1f}% (FMR {fmr_t:.1f}% vs {fmr_s:.1f}%)")


def _snapshot(d):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _cli_round(root, capsys):
    data, m = root / "data", root / "m"
    outs = []

    def run(*a):
        code = cli.main([str(x) for x in a])
        outs.append((a[0], code, capsys.readouterr().out))

    run("gen-synth", "--pairs", 2, "--seed", 5, "--points-per-fragment", 400, "--out", data)
    run("pretrain-teacher", "--data", data, "--epochs", 1, "--lr", 1e-3, "--out", m / "t.dbec")
    run("transfer", "--teacher", m / "t.dbec", "--out", m / "s.dbec")
    run("finetune", "--data", data, "--init", m / "s.dbec", "--epochs", 1, "--lr", 1e-3, "--kd", "kl",
        "--teacher", m / "t.dbec", "--out", m / "f.dbec")
    e = read_manifest(data / "manifest.jsonl")[0]
    run("register", "--src", data / e.src, "--dst", data / e.dst, "--ckpt", m / "f.dbec",
        "--max-iterations", 3000)
    run("evaluate", "--manifest", data / "manifest.jsonl", "--ckpt", m / "f.dbec", "--max-iterations", 3000,
        "--out", m / "r.txt")
    run("gradcheck", "--scope", "layers")
    run("selftest")
    return outs, _snapshot(root)


def test_a9_format_fidelity(report, tmp_path, capsys):
    problems = []
    ck = model_to_checkpoint(init_dbenet(desk_scale(), seed=3), seed=3, extra={"note": "x"})
    save_checkpoint(ck, tmp_path / "a.dbec")
    save_checkpoint(load_checkpoint(tmp_path / "a.dbec"), tmp_path / "b.dbec")
    if (tmp_path / "a.dbec").read_bytes() != (tmp_path / "b.dbec").read_bytes():
        problems.append("checkpoint")
    if checkpoint_bytes(parse_checkpoint(checkpoint_bytes(ck))) != checkpoint_bytes(ck):
        problems.append("checkpoint-bytes")

    rng = np.random.default_rng(9)
    c = PointCloud(rng.normal(size=(500, 3)).astype(np.float32).astype(np.float64))
    c = c.with_aux(np.rint(synth_aux_modality(c, 1) * 255) / 255)  # colour is stored as uchar
    write_ply(c, tmp_path / "c.ply")
    back = read_ply(tmp_path / "c.ply")
    if not (np.array_equal(back.points, c.points) and np.array_equal(back.aux, c.aux)):
        problems.append("ply")

    entries = [ManifestEntry(f"p{i}_src.ply", f"p{i}_dst.ply",
                             RigidTransform(random_rotation(rng), rng.normal(size=3)).as_matrix().ravel().tolist(),
                             "s", float(rng.random()))
               for i in range(5)]
    write_manifest(entries, tmp_path / "m.jsonl")
    if read_manifest(tmp_path / "m.jsonl") != entries:
        problems.append("manifest")

    outs1, snap1 = _cli_round(tmp_path / "run", capsys)
    outs2, snap2 = _cli_round(tmp_path / "run", capsys)
    codes = [(c, k) for c, k, _ in outs1 if k not in (0, 6)]
    if codes:
        problems.append(f"exit codes {codes}")
    for (cmd, k1, o1), (_, k2, o2) in zip(outs1, outs2):
        if (k1, o1) != (k2, o2):
            problems.append(f"stdout:{cmd}")
    diff = sorted(k for k in set(snap1) | set(snap2) if snap1.get(k) != snap2.get(k))
    if diff:
        problems.append(f"files:{diff}")
    report("A9", not problems, f"checkpoint/PLY/manifest round trips, {len(outs1)} CLI commands x "
                               f"{len(snap1)} files rerun byte-identical; problems={problems}")

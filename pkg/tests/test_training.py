import numpy as np
import pytest
from hypothesis import given, strategies as st

from dbenet import gradcheck
from dbenet.autodiff import Tensor
from dbenet.data import Pair, model_to_checkpoint
from dbenet.errors import EmptyPositivesError, InvalidArgument, ShapeError, TransferError
from dbenet.fusion import desk_scale, init_dbenet, init_teacher, tiny
from dbenet.geom import PointCloud, RigidTransform, random_rotation
from dbenet.training import (FREEZE_PRESETS, FreezeMask, KDConfig, LossConfig, MiningResult, OptimConfig,
                             finetune, hardest_contrastive_loss, kd_loss, mine_pairs, pretrain_teacher,
                             transfer_weights)

seeds = st.integers(0, 2**31 - 1)
CFG = LossConfig()


def one_hot(rows):
    return Tensor(np.asarray(rows, dtype=np.float64))


def mining(ps, pd, ns, nd):
    a = lambda v: np.asarray(v, dtype=np.int64)
    return MiningResult(a(ps), a(pd), a(ns), a(nd))


def test_loss_config_defaults_and_validation():
    assert (CFG.m_p, CFG.m_n, CFG.lambda_n) == (0.1, 1.4, 0.5)
    c = LossConfig.for_voxel(0.05)
    assert (c.tau_pos, c.tau_fn, c.sample_count) == (0.05, 0.1, 256)
    with pytest.raises(InvalidArgument):
        LossConfig(m_p=1.5, m_n=1.4)
    with pytest.raises(InvalidArgument):
        LossConfig(tau_pos=0.2, tau_fn=0.1)
    with pytest.raises(InvalidArgument):
        KDConfig(temperature=0)


def test_loss_zero_when_hinges_clamp():
    Fs = one_hot([[1, 0], [0, 1]])
    Fd = one_hot([[1, 0], [0, 1]])
    # negatives are orthogonal unit rows: distance sqrt2 >= 1.4
    m = mining([0, 1], [0, 1], [1, 0], [1, 0])
    assert hardest_contrastive_loss(Fs, Fd, m, CFG).item() == 0.0


def test_loss_single_positive_016():
    Fs = one_hot([[0.0, 0.0]])
    Fd = one_hot([[0.5, 0.0]])
    m = mining([0], [0], [-1], [-1])
    assert hardest_contrastive_loss(Fs, Fd, m, CFG).item() == (0.5 - 0.1) ** 2
    assert hardest_contrastive_loss(Fs, Fd, m, CFG).item() == pytest.approx(0.16, abs=1e-15)


def test_loss_negative_term_by_hand():
    Fs = one_hot([[0.0, 0.0], [5.0, 5.0]])
    Fd = one_hot([[0.0, 0.0], [1.0, 0.0]])
    # anchor 0 matched exactly, hardest negative at distance 1.0 on the source side
    m = mining([0], [0], [1], [-1])
    expect = 0.5 * (1.4 - 1.0) ** 2 / 1
    assert hardest_contrastive_loss(Fs, Fd, m, CFG).item() == pytest.approx(expect, abs=1e-15)
    m2 = mining([0], [0], [1], [1])
    # dst-side negative is source row 1, far beyond m_n
    assert hardest_contrastive_loss(Fs, Fd, m2, CFG).item() == pytest.approx(expect, abs=1e-15)


def test_loss_empty_positives():
    with pytest.raises(EmptyPositivesError):
        hardest_contrastive_loss(one_hot([[0, 0]]), one_hot([[0, 0]]), mining([], [], [], []), CFG)


def _brute_loss(Fs, Fd, m, cfg):
    d = lambda a, b: np.linalg.norm(a - b)
    pos = np.mean([max(d(Fs[i], Fd[j]) - cfg.m_p, 0) ** 2 for i, j in zip(m.pos_src, m.pos_dst)])
    out = pos
    for anchors, A, B, neg in ((m.pos_src, Fs, Fd, m.neg_for_src), (m.pos_dst, Fd, Fs, m.neg_for_dst)):
        vals = [max(cfg.m_n - d(A[i], B[n]), 0) ** 2 for i, n in zip(anchors, neg) if n >= 0]
        if vals:
            out += cfg.lambda_n * np.sum(vals) / len(vals)
    return out


@given(seeds)
def test_loss_matches_bruteforce_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    Fs, Fd = rng.normal(size=(12, 4)) * 0.5, rng.normal(size=(10, 4)) * 0.5
    n = int(rng.integers(1, 8))
    m = mining(rng.integers(0, 12, n), rng.integers(0, 10, n),
               np.where(rng.uniform(size=n) < 0.3, -1, rng.integers(0, 10, n)),
               np.where(rng.uniform(size=n) < 0.3, -1, rng.integers(0, 12, n)))
    got = hardest_contrastive_loss(Tensor(Fs), Tensor(Fd), m, CFG).item()
    assert got >= 0
    assert got == pytest.approx(_brute_loss(Fs, Fd, m, CFG), rel=1e-12, abs=1e-15)


@given(seeds)
def test_loss_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    Fs, Fd = rng.normal(size=(8, 3)) * 0.4, rng.normal(size=(8, 3)) * 0.4
    m = mining([0, 2, 5], [1, 2, 6], [3, -1, 4], [7, 1, -1])
    err = gradcheck.check_function(lambda ts: hardest_contrastive_loss(ts[0], ts[1], m, CFG),
                                   [Fs, Fd], rng)
    assert err < 1e-4


def _brute_mining(Fs, Fd, xs, ys, T, cfg, anchors, pool):
    pos = []
    for a in anchors:
        d = np.linalg.norm(ys - T.apply(xs[a][None])[0], axis=1)
        j = int(np.lexsort((np.arange(len(ys)), d))[0])
        if d[j] < cfg.tau_pos:
            pos.append((a, j))
    neg_s, neg_d = [], []
    for a, j in pos:
        best, arg = np.inf, -1
        for p in pool:
            if np.linalg.norm(ys[p] - ys[j]) < cfg.tau_fn:
                continue
            dd = np.linalg.norm(Fs[a] - Fd[p])
            if dd < best:
                best, arg = dd, p
        neg_s.append(arg)
        best, arg = np.inf, -1
        for p in anchors:
            if np.linalg.norm(xs[p] - xs[a]) < cfg.tau_fn:
                continue
            dd = np.linalg.norm(Fd[j] - Fs[p])
            if dd < best:
                best, arg = dd, p
        neg_d.append(arg)
    return pos, neg_s, neg_d


@given(seeds)
def test_mining_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0, 1, size=(60, 3))
    T = RigidTransform(random_rotation(rng, 0.3), rng.uniform(-0.2, 0.2, 3))
    ys = T.apply(xs[:45]) + rng.normal(0, 0.01, size=(45, 3))
    ys = np.vstack([ys, rng.uniform(0, 1, size=(15, 3))])
    Fs, Fd = rng.normal(size=(60, 5)), rng.normal(size=(60, 5))
    cfg = LossConfig(tau_pos=0.05, tau_fn=0.2, sample_count=30)
    try:
        m = mine_pairs(Fs, Fd, xs, ys, T, cfg, seed=seed % 1000)
    except EmptyPositivesError:
        return
    r = np.random.default_rng(seed % 1000)
    anchors = np.sort(r.choice(60, 30, replace=False))
    pool = np.sort(r.choice(60, 30, replace=False))
    pos, ns, nd = _brute_mining(Fs, Fd, xs, ys, T, cfg, anchors, pool)
    assert list(zip(m.pos_src.tolist(), m.pos_dst.tolist())) == pos
    assert m.neg_for_src.tolist() == ns
    assert m.neg_for_dst.tolist() == nd
    # invariants: positives within tau_pos, negatives outside tau_fn of the mate
    assert np.all(np.linalg.norm(T.apply(xs[m.pos_src]) - ys[m.pos_dst], axis=1) < cfg.tau_pos)
    v = m.valid_src
    assert np.all(np.linalg.norm(ys[m.neg_for_src[v]] - ys[m.pos_dst[v]], axis=1) >= cfg.tau_fn)


def test_mining_identity_and_exclusion():
    rng = np.random.default_rng(0)
    xs = rng.uniform(0, 1, size=(40, 3))
    F = rng.normal(size=(40, 4))
    m = mine_pairs(F, F, xs, xs, RigidTransform.identity(), LossConfig(sample_count=40))
    assert m.num_pos == 40 and np.array_equal(m.pos_src, m.pos_dst)
    # every pool point lies within tau_fn of the mate: no valid negative
    tight = rng.uniform(0, 0.01, size=(10, 3))
    m = mine_pairs(F[:10], F[:10], tight, tight, RigidTransform.identity(),
                   LossConfig(tau_pos=0.05, tau_fn=0.5, sample_count=10))
    assert m.num_valid_src == 0 and m.num_valid_dst == 0
    far = xs + 10
    with pytest.raises(EmptyPositivesError):
        mine_pairs(F, F, xs, far, RigidTransform.identity(), LossConfig())
    with pytest.raises(ShapeError):
        mine_pairs(F[:5], F, xs, xs, RigidTransform.identity(), LossConfig())


def test_kd_hand_case_and_identity():
    t = Tensor(np.array([[0.0, np.log(2.0)]]))
    s = Tensor(np.array([[0.0, 0.0]]))
    kl = (1 / 3) * np.log((1 / 3) / (1 / 2)) + (2 / 3) * np.log((2 / 3) / (1 / 2))
    assert kd_loss(t, s).item() == pytest.approx(kl / 2, abs=1e-15)
    x = Tensor(np.random.default_rng(0).normal(size=(5, 4)))
    assert kd_loss(x, x).item() == 0.0
    assert kd_loss(x, x, KDConfig(variant="l1")).item() == 0.0
    with pytest.raises(ShapeError):
        kd_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


@given(seeds, st.floats(0.3, 4.0))
def test_kd_nonnegative_and_gradients(seed, T):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 5)) * 2, rng.normal(size=(6, 5)) * 2
    assert kd_loss(Tensor(a), Tensor(b), KDConfig(temperature=T)).item() >= 0
    l1 = kd_loss(Tensor(a), Tensor(b), KDConfig(variant="l1")).item()
    assert l1 == pytest.approx(np.abs(a - b).mean(), rel=1e-12)
    err = gradcheck.check_function(lambda ts: kd_loss(a, ts[0], KDConfig(temperature=T)), [b], rng)
    assert err < 1e-4


# ---------------------------------------------------------------- transfer / freeze

def test_transfer_copies_scope_only():
    teacher = init_teacher(desk_scale(), seed=5)
    student = init_dbenet(desk_scale(), seed=6)
    ckpt = model_to_checkpoint(teacher)
    out, rep = transfer_weights(ckpt, student)
    for name in out.params.names():
        if name.startswith(("sfcn.encoder.", "sfcn.decoder.")):
            assert out.params[name].data.tobytes() == ckpt.tensors[name].tobytes()
            assert name in rep.copied
        else:
            assert out.params[name].data.tobytes() == student.params[name].data.tobytes()
    assert any(n.startswith("aux_encoder") for n in rep.skipped)
    assert not rep.missing
    out2, rep2 = transfer_weights(ckpt, student, ("sfcn.encoder", "sfcn.decoder", "attention"))
    assert out2.params["attention.w_q"].data.tobytes() == ckpt.tensors["attention.w_q"].tobytes()


def test_transfer_shape_mismatch_names_tensor():
    teacher = init_teacher(tiny(), seed=0)
    student = init_dbenet(desk_scale(), seed=0)
    with pytest.raises(TransferError, match=r"sfcn\.encoder\.conv0\.weight"):
        transfer_weights(teacher, student)
    with pytest.raises(InvalidArgument):
        transfer_weights(teacher, student, ("kpfcn",))


def test_unknown_tensors_reported_skipped():
    ckpt = model_to_checkpoint(init_teacher(desk_scale()))
    ckpt.tensors["future.layer.weight"] = np.zeros(3, np.float32)
    _, rep = transfer_weights(ckpt, init_dbenet(desk_scale()))
    assert "future.layer.weight" in rep.skipped


def test_freeze_mask_parse_and_apply():
    m = init_dbenet(desk_scale()).copy()
    assert FreezeMask.parse("enc+dec").prefixes == ("sfcn.encoder", "sfcn.decoder")
    assert FreezeMask.parse("sfcn.encoder,attention").prefixes == ("sfcn.encoder", "attention")
    frozen = FreezeMask.parse("enc+att").apply(m.params)
    assert all(n.startswith(("sfcn.encoder.", "attention.")) for n in frozen)
    assert set(m.params.trainable_names()) == set(m.params.names()) - set(frozen)
    with pytest.raises(InvalidArgument):
        FreezeMask(("nothing.here",)).apply(m.params)


def _pairs(n=2, seed=0, pts=400):
    from dbenet.synth import make_dataset
    return make_dataset("match", n, seed, points_per_fragment=pts)


@pytest.mark.parametrize("preset", ["enc", "enc+att", "enc+att+dec", "enc+dec"])
def test_freeze_presets_bit_invariant(preset):
    pairs = _pairs()
    init = init_dbenet(desk_scale(), seed=0)
    res = finetune(pairs, init, preset, OptimConfig(lr=1e-3), LossConfig.for_voxel(0.05), epochs=2, seed=0)
    frozen = FREEZE_PRESETS[preset]
    for name in init.params.names():
        before = init.params[name].data.tobytes()
        after = res.model.params[name].data.tobytes()
        if name.startswith(tuple(p + "." for p in frozen)):
            assert before == after, name
    changed = [n for n in init.params.names() if not n.startswith(tuple(p + "." for p in frozen))
               and init.params[n].data.tobytes() != res.model.params[n].data.tobytes()]
    assert changed
    assert len(res.history) == 2


def test_finetune_determinism_and_zero_epochs():
    pairs = _pairs()
    init = init_dbenet(desk_scale(), seed=0)
    a = finetune(pairs, init, "enc+dec", OptimConfig(lr=1e-3), LossConfig.for_voxel(0.05), epochs=1, seed=3)
    b = finetune(pairs, init, "enc+dec", OptimConfig(lr=1e-3), LossConfig.for_voxel(0.05), epochs=1, seed=3)
    for n in init.params.names():
        assert a.model.params[n].data.tobytes() == b.model.params[n].data.tobytes()
    assert a.history == b.history
    z = finetune(pairs, init, "enc+dec", epochs=0)
    assert z.history == []
    for n in init.params.names():
        assert z.model.params[n].data.tobytes() == init.params[n].data.tobytes()
    with pytest.raises(InvalidArgument):
        finetune([], init)


def test_finetune_skips_pairs_without_positives():
    good = _pairs(1)[0]
    far = Pair(good.src, PointCloud(good.dst.points + 50.0), good.T_gt, "far")
    res = finetune([good, far], init_dbenet(desk_scale()), "enc+dec", OptimConfig(lr=1e-3),
                   LossConfig.for_voxel(0.05), epochs=1)
    assert res.skipped == 1 and np.isfinite(res.history[0])


def test_finetune_with_kd_records_term():
    pairs = _pairs(1)
    teacher = init_teacher(desk_scale(), seed=2)
    res = finetune(pairs, init_dbenet(desk_scale()), "enc+dec", OptimConfig(lr=1e-3),
                   LossConfig.for_voxel(0.05), kd=KDConfig(variant="kl"), teacher=teacher, epochs=1)
    assert all("kd" in r and r["kd"] >= 0 for r in res.records)
    with pytest.raises(InvalidArgument):
        finetune(pairs, init_dbenet(desk_scale()), kd=KDConfig(), epochs=1)


def test_pretrain_teacher_deterministic_checkpoint():
    from dbenet.data import checkpoint_bytes, parse_checkpoint
    pairs = _pairs(1)
    t = init_teacher(desk_scale(), seed=0)
    a = pretrain_teacher(pairs, t, OptimConfig(lr=1e-3), LossConfig.for_voxel(0.05), epochs=1, seed=0)
    b = pretrain_teacher(pairs, t, OptimConfig(lr=1e-3), LossConfig.for_voxel(0.05), epochs=1, seed=0)
    ba, bb = checkpoint_bytes(a.checkpoint(0)), checkpoint_bytes(b.checkpoint(0))
    assert ba == bb
    assert checkpoint_bytes(parse_checkpoint(ba)) == ba
    assert set(a.checkpoint().tensors) == set(t.params.names())
    with pytest.raises(InvalidArgument):
        pretrain_teacher(pairs, init_dbenet(desk_scale()), epochs=1)

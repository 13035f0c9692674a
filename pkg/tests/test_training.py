import copy

import numpy as np
import pytest

from depthart import tensor as T, training, var as var_mod
from depthart.optim import AdamW, step_lr
from depthart.tensor import Tensor
from depthart.training import (Batch, ConfigError, TrainConfig,
                               depthart_step, depthart_targets,
                               depthart_targets_batch, fit,
                               prepare_training_set, teacher_forcing_step)
from depthart.var import VarConfig, VarModel, flatten_maps
from depthart.vq import (DivergenceError, ScaleSchedule, TokenMap, VqModel,
                         VqTrainConfig, train_vqvae)

from synth import synth_samples

rng = np.random.default_rng(3)


@pytest.fixture(scope="module")
def trained_tiny_vq():
    samples = synth_samples(64, res=16, seed=10)
    from depthart.data import normalize_depth
    rasters = np.stack([normalize_depth(s.depth, s.mask) for s in samples])[:, None]
    masks = np.ones_like(rasters)
    model = VqModel(schedule=ScaleSchedule(((1, 1), (2, 2), (4, 4))),
                    codebook_size=12, emb_dim=4, raster=16, seed=1)
    model, curve = train_vqvae(rasters, masks,
                               VqTrainConfig(steps=400, warmup_steps=120,
                                             batch=8, lr=2e-3, seed=1),
                               model=model)
    return model


@pytest.fixture(scope="module")
def tiny_set(trained_tiny_vq):
    return prepare_training_set(trained_tiny_vq, synth_samples(8, res=16, seed=4))


def fresh_var(vq, seed=0):
    cfg = VarConfig(schedule=vq.schedule, vocab=vq.codebook.size,
                    emb_dim=vq.emb_dim, width=32, heads=2, blocks=2)
    return VarModel(cfg, seed=seed, codebook_init=vq.codebook.vectors)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_file_round_trip(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("regime = tf\nlr=1e-4\nwd = 1e-2\nbatch=4\nsteps=100\n"
                 "decay_period=10\ndecay_gamma=0.8\nseed=3\n"
                 "data_dir=/data\nout_dir=/out\n# comment\n")
    cfg = TrainConfig.from_file(str(p))
    assert cfg.regime == "teacher_forcing"
    assert cfg.lr == 1e-4 and cfg.steps == 100 and cfg.seed == 3


def test_config_missing_key_named(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("regime=tf\nlr=1e-4\n")
    with pytest.raises(ConfigError, match="wd"):
        TrainConfig.from_file(str(p))


def test_config_unknown_key_rejected(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("regime=tf\nlr=1e-4\nwd=1e-2\nbatch=4\nsteps=10\n"
                 "decay_period=5\ndecay_gamma=0.8\nseed=0\ndata_dir=a\n"
                 "out_dir=b\nbogus=1\n")
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_file(str(p))


def test_config_validates_regime_and_positivity():
    with pytest.raises(ConfigError):
        TrainConfig(regime="nope")
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)


def test_step_lr_schedule():
    assert step_lr(1e-4, 0, 1000, 0.8) == 1e-4
    assert step_lr(1e-4, 999, 1000, 0.8) == 1e-4
    assert step_lr(1e-4, 1000, 1000, 0.8) == pytest.approx(0.8e-4)
    assert step_lr(1e-4, 2500, 1000, 0.8) == pytest.approx(0.64e-4)


def test_adamw_decoupled_decay():
    p = {"w": Tensor(np.array([10.0, -10.0], np.float32), requires_grad=True)}
    opt = AdamW(p, lr=0.1, weight_decay=0.5)
    p["w"].grad = np.zeros(2, np.float32)
    opt.step()
    # zero gradient: only the decay term moves the weights
    assert np.allclose(p["w"].data, [9.5, -9.5], atol=1e-6)


# ---------------------------------------------------------------------------
# refinement targets
# ---------------------------------------------------------------------------

def test_reduction_property_targets_equal_teacher(trained_tiny_vq):
    vq = trained_tiny_vq
    for seed in range(10):
        f = np.random.default_rng(seed).standard_normal(
            (vq.emb_dim,) + vq.schedule.latent).astype(np.float32)
        teacher = vq.decompose(f)
        targets = depthart_targets(teacher, f, vq)
        for t, x in zip(targets, teacher):
            assert np.array_equal(t.indices, x.indices)


def test_targets_single_scale_ignores_z():
    vq = VqModel(schedule=ScaleSchedule(((4, 4),)), codebook_size=8,
                 emb_dim=3, raster=16, seed=2)
    f = rng.standard_normal((3, 4, 4)).astype(np.float32)
    za = [TokenMap(k=0, indices=np.zeros((4, 4), np.int32))]
    zb = [TokenMap(k=0, indices=np.full((4, 4), 5, np.int32))]
    ta = depthart_targets(za, f, vq)
    tb = depthart_targets(zb, f, vq)
    assert np.array_equal(ta[0].indices, tb[0].indices)
    assert np.array_equal(ta[0].indices, vq.quantize(
        T.resize_bilinear(Tensor(f), (4, 4)).data, k=0).indices)


def test_targets_match_straightline_oracle(trained_tiny_vq):
    vq = trained_tiny_vq
    r = np.random.default_rng(8)
    f = r.standard_normal((vq.emb_dim,) + vq.schedule.latent).astype(np.float32)
    z = [TokenMap(k=k, indices=r.integers(0, vq.codebook.size, hw).astype(np.int32))
         for k, hw in enumerate(vq.schedule.sizes)]
    got = depthart_targets(z, f, vq)
    # independent straight-line recursion
    acc = np.zeros_like(f)
    for k, (h, w) in enumerate(vq.schedule.sizes):
        delta = f - acc
        down = T.resize_bilinear(Tensor(delta), (h, w)).data
        flat = down.reshape(vq.emb_dim, -1).T
        want = vq.codebook.nearest(flat).reshape(h, w)
        assert np.array_equal(got[k].indices, want)
        emb = vq.codebook.vectors[z[k].indices].transpose(2, 0, 1)
        up = T.resize_bilinear(Tensor(emb[None]), vq.schedule.latent)
        acc = acc + T.conv2d(up, vq.params["eta/w"], None, 1, 1).data[0]


def test_targets_batch_matches_single(trained_tiny_vq, tiny_set):
    vq = trained_tiny_vq
    z = [t.copy() for t in tiny_set.teacher]
    z[1] = (z[1] + 3) % vq.codebook.size
    batched = depthart_targets_batch(z, tiny_set.f_depth, vq)
    for b in range(4):
        z_maps = [TokenMap(k=k, indices=z[k][b].reshape(vq.schedule.sizes[k]).astype(np.int32))
                  for k in range(len(vq.schedule))]
        singles = depthart_targets(z_maps, tiny_set.f_depth[b], vq)
        for k, tm in enumerate(singles):
            assert np.array_equal(batched[k][b].reshape(tm.indices.shape),
                                  tm.indices)


def test_target_validity(trained_tiny_vq, tiny_set):
    z = [np.zeros_like(t) for t in tiny_set.teacher]
    targets = depthart_targets_batch(z, tiny_set.f_depth, trained_tiny_vq)
    for t in targets:
        assert t.min() >= 0 and t.max() < trained_tiny_vq.codebook.size


# ---------------------------------------------------------------------------
# regime steps
# ---------------------------------------------------------------------------

def test_loss_additivity(trained_tiny_vq, tiny_set):
    vq = trained_tiny_vq
    model = fresh_var(vq, seed=7)
    batch = tiny_set.batch(np.arange(4))
    k_total = len(vq.schedule)
    feats = var_mod.depth_input_features(model, vq, batch.teacher[:k_total - 1],
                                         k_total)
    seq = var_mod.embed_sequence(model, batch.image_tokens, feats)
    logits = var_mod.forward(model, seq, model.attention_mask(k_total))
    total = training._scale_loss(model, logits, batch.teacher).item()
    parts = 0.0
    for (lo, hi), tgt in zip(model.depth_slices(k_total), batch.teacher):
        block = logits.data[:, lo:hi, :].reshape(-1, model.config.vocab)
        parts += T.softmax_cross_entropy(Tensor(block), tgt.reshape(-1)).item()
    assert total == pytest.approx(parts, abs=1e-6)


def test_one_hot_margin_loss_near_zero(trained_tiny_vq, tiny_set):
    # synthetic logits that already pick the teacher with margin 20
    vq = trained_tiny_vq
    model = fresh_var(vq, seed=8)
    batch = tiny_set.batch(np.arange(2))
    n_depth = sum(vq.schedule.tokens_per_scale())
    logits = np.zeros((2, n_depth, model.config.vocab), np.float32)
    flat_targets = np.concatenate([t.reshape(2, -1) for t in batch.teacher], axis=1)
    for b in range(2):
        logits[b, np.arange(n_depth), flat_targets[b]] = 20.0
    loss = training._scale_loss(model, Tensor(logits), batch.teacher)
    assert loss.item() < 1e-6


def test_teacher_forcing_single_forward_per_batch(trained_tiny_vq, tiny_set):
    model = fresh_var(trained_tiny_vq, seed=9)
    opt = AdamW(model.params, lr=1e-4, weight_decay=1e-2)
    var_mod.forward_calls = 0
    teacher_forcing_step(model, trained_tiny_vq, tiny_set.batch(np.arange(4)), opt)
    assert var_mod.forward_calls == 1


def test_depthart_equals_teacher_forcing_when_predictions_match(
        trained_tiny_vq, tiny_set, monkeypatch):
    vq = trained_tiny_vq
    batch = tiny_set.batch(np.arange(4))
    model_a = fresh_var(vq, seed=11)
    model_b = fresh_var(vq, seed=11)
    loss_tf = teacher_forcing_step(model_a, vq, batch,
                                   AdamW(model_a.params, lr=1e-4))
    # force pass-1 predictions to the teacher decomposition
    monkeypatch.setattr(training, "infer_batch",
                        lambda m, v, img: [t.copy() for t in batch.teacher])
    loss_da = depthart_step(model_b, vq, batch, AdamW(model_b.params, lr=1e-4))
    assert loss_da == loss_tf  # bitwise: same inputs, same targets, same math


def test_depthart_targets_are_dynamic(trained_tiny_vq, tiny_set):
    vq = trained_tiny_vq
    model = fresh_var(vq, seed=12)
    opt = AdamW(model.params, lr=5e-3)
    batch = tiny_set.batch(np.arange(4))
    d1, d2 = {}, {}
    depthart_step(model, vq, batch, opt, diagnostics=d1)
    depthart_step(model, vq, batch, opt, diagnostics=d2)
    changed = any(not np.array_equal(a, b)
                  for a, b in zip(d1["targets"], d2["targets"]))
    assert changed, "targets should track the model between steps"


def test_exposure_alignment_pass2_inputs_match_pass1(trained_tiny_vq, tiny_set,
                                                      monkeypatch):
    vq = trained_tiny_vq
    model = fresh_var(vq, seed=13)
    hashes = []
    original = var_mod.embed_sequence

    def recording(model_, img, feats):
        out = original(model_, img, feats)
        import hashlib
        hashes.append(hashlib.sha256(out.data.tobytes()).hexdigest())
        return out

    monkeypatch.setattr(var_mod, "embed_sequence", recording)
    monkeypatch.setattr(training, "embed_sequence", recording)
    diags = {}
    depthart_step(model, vq, tiny_set.batch(np.arange(4)),
                  AdamW(model.params, lr=1e-4), diagnostics=diags)
    # pass 1 made K calls; the pass-2 call must reproduce the K-th bitwise
    k = len(vq.schedule)
    assert len(hashes) == k + 1
    assert hashes[k] == hashes[k - 1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort(trained_tiny_vq, tiny_set):
    model = fresh_var(trained_tiny_vq, seed=14)
    model.params["head_w"].data[:] = np.nan
    with pytest.raises(DivergenceError):
        teacher_forcing_step(model, trained_tiny_vq, tiny_set.batch(np.arange(2)),
                             AdamW(model.params))


# ---------------------------------------------------------------------------
# overfit runs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit_cfg():
    return TrainConfig(regime="teacher_forcing", lr=3e-3, wd=1e-2, batch=8,
                       steps=200, decay_period=1000, decay_gamma=0.8, seed=0)


def test_teacher_forcing_overfits(trained_tiny_vq, tiny_set, overfit_cfg):
    model = fresh_var(trained_tiny_vq, seed=20)
    _, curve, _ = fit(model, trained_tiny_vq, tiny_set, overfit_cfg)
    first = np.mean([l for _, l, _ in curve[:10]])
    last = np.mean([l for _, l, _ in curve[-10:]])
    assert last < 0.5 * first


def test_depthart_overfits(trained_tiny_vq, tiny_set, overfit_cfg):
    cfg = copy.replace(overfit_cfg, regime="depthart") if hasattr(copy, "replace") \
        else TrainConfig(**{**overfit_cfg.__dict__, "regime": "depthart"})
    model = fresh_var(trained_tiny_vq, seed=20)
    _, curve, _ = fit(model, trained_tiny_vq, tiny_set, cfg)
    first = np.mean([l for _, l, _ in curve[:10]])
    last = np.mean([l for _, l, _ in curve[-10:]])
    assert last < first


def test_overfit_infer_reproduces_teacher(trained_tiny_vq, tiny_set):
    cfg = TrainConfig(regime="teacher_forcing", lr=3e-3, wd=1e-2, batch=8,
                      steps=600, decay_period=1000, decay_gamma=0.8, seed=1)
    model = fresh_var(trained_tiny_vq, seed=21)
    fit(model, trained_tiny_vq, tiny_set, cfg)
    preds = var_mod.infer_batch(model, trained_tiny_vq, tiny_set.image_tokens)
    final = len(trained_tiny_vq.schedule) - 1
    agree = (preds[final] == tiny_set.teacher[final]).mean()
    assert agree >= 0.9


def test_fit_deterministic_same_seed(trained_tiny_vq, tiny_set):
    cfg = TrainConfig(regime="teacher_forcing", lr=1e-3, wd=1e-2, batch=4,
                      steps=30, decay_period=10, decay_gamma=0.8, seed=5)
    losses = []
    for _ in range(2):
        model = fresh_var(trained_tiny_vq, seed=30)
        _, curve, _ = fit(model, trained_tiny_vq, tiny_set, cfg)
        losses.append(curve[-1][1])
    assert losses[0] == losses[1]


def test_fit_regime_flag_switches_step_fn(trained_tiny_vq, tiny_set, monkeypatch):
    calls = {"teacher_forcing": 0, "depthart": 0}

    def wrap(name, fn):
        def inner(*a, **kw):
            calls[name] += 1
            return fn(*a, **kw)
        return inner

    monkeypatch.setitem(training.STEP_FNS, "teacher_forcing",
                        wrap("teacher_forcing", teacher_forcing_step))
    monkeypatch.setitem(training.STEP_FNS, "depthart",
                        wrap("depthart", depthart_step))
    base = dict(lr=1e-3, wd=1e-2, batch=4, steps=3, decay_period=10,
                decay_gamma=0.8, seed=0)
    fit(fresh_var(trained_tiny_vq, 1), trained_tiny_vq, tiny_set,
        TrainConfig(regime="teacher_forcing", **base))
    fit(fresh_var(trained_tiny_vq, 1), trained_tiny_vq, tiny_set,
        TrainConfig(regime="depthart", **base))
    assert calls == {"teacher_forcing": 3, "depthart": 3}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_writes_outputs_and_divergence_keeps_checkpoint(
        trained_tiny_vq, tiny_set, tmp_path):
    out = tmp_path / "run"
    cfg = TrainConfig(regime="teacher_forcing", lr=1e-3, wd=1e-2, batch=4,
                      steps=25, decay_period=10, decay_gamma=0.8, seed=2,
                      out_dir=str(out))
    model = fresh_var(trained_tiny_vq, seed=31)
    fit(model, trained_tiny_vq, tiny_set, cfg)
    assert (out / "model.dart").exists()
    assert (out / "ckpt_latest.dart").exists()
    assert (out / "loss.csv").read_text().startswith("step,loss,lr")
    # divergence: keeps the periodic checkpoint and the partial curve
    out2 = tmp_path / "diverge"
    cfg2 = TrainConfig(regime="teacher_forcing", lr=1e18, wd=1e-2, batch=4,
                       steps=40, decay_period=10, decay_gamma=0.8, seed=2,
                       out_dir=str(out2))
    model2 = fresh_var(trained_tiny_vq, seed=32)
    with pytest.raises(DivergenceError):
        fit(model2, trained_tiny_vq, tiny_set, cfg2)
    assert (out2 / "loss.csv").exists()
    from depthart.var import VarModel as VM
    assert (out2 / "ckpt_latest.dart").exists()
    VM.load(str(out2 / "ckpt_latest.dart"))  # loadable


# ---------------------------------------------------------------------------
# vq training sanity
# ---------------------------------------------------------------------------

def test_vqvae_training_improves_and_uses_codebook(trained_tiny_vq):
    samples = synth_samples(32, res=16, seed=40)
    from depthart.data import normalize_depth
    rasters = np.stack([normalize_depth(s.depth, s.mask) for s in samples])[:, None]
    feats = trained_tiny_vq.encode_batch(rasters)
    used = set()
    for idx in trained_tiny_vq.decompose_batch(feats):
        used.update(np.unique(idx).tolist())
    assert len(used) >= trained_tiny_vq.codebook.size // 2
    assert trained_tiny_vq.codebook.min_pairwise_distance() > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_vqvae_divergence_aborts():
    samples = synth_samples(8, res=16, seed=41)
    from depthart.data import normalize_depth
    rasters = np.stack([normalize_depth(s.depth, s.mask) for s in samples])[:, None]
    masks = np.ones_like(rasters)
    model = VqModel(schedule=ScaleSchedule(((1, 1), (2, 2), (4, 4))),
                    codebook_size=12, emb_dim=4, raster=16, seed=3)
    with pytest.raises(DivergenceError):
        train_vqvae(rasters, masks,
                    VqTrainConfig(steps=60, warmup_steps=10, batch=4,
                                  lr=1e18, seed=3), model=model)

"""Optimizer, stage runner, masked updates, checkpoints, determinism."""

import numpy as np
import pytest

from s3net import autodiff as ad
from s3net import checkpoint as ck
from s3net import data
from s3net import model as m
from s3net import objective as obj
from s3net import pruning as pr
from s3net import train

SMALL = m.ModelConfig(
    encoder_layers=((16, 10, 8), (32, 8, 5), (32, 4, 4)),
    d_model=32, n_heads=2, n_blocks=2, ffn_dim=64,
    codebooks_g=2, entries_v=12, codeword_dim=8,
)
SMALL_OBJ = obj.ObjectiveConfig(distractors_k=5)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    specs = data.default_language_specs(n_high=1, n_low=1, seed=13,
                                        high_seconds=24.0, low_seconds=12.0)
    return data.make_corpus(specs, tmp_path_factory.mktemp("corpus"),
                            window_seconds=0.45, seed=14)


def scalar_tree(value: float) -> m.ParamTree:
    tree = m.ParamTree()
    tree.add("context.block0.attn.wq", np.array([value], dtype=np.float32),
             m.SECTION_CONTEXT_LINEAR)
    return tree


class TestLearningRate:
    def test_linear_warmup_then_decay(self):
        cfg = train.TrainConfig(steps=100, peak_lr=1e-3, warmup_frac=0.1)
        assert train.learning_rate(cfg, 1) == pytest.approx(1e-4)
        assert train.learning_rate(cfg, 10) == pytest.approx(1e-3)
        assert train.learning_rate(cfg, 55) == pytest.approx(1e-3 * 45 / 90)
        assert train.learning_rate(cfg, 100) == 0.0

    def test_steps_validation(self):
        with pytest.raises(ValueError, match="steps"):
            train.TrainConfig(steps=0)


class TestOptimizerStep:
    def test_matches_hand_computation(self):
        theta0, g, lr = 0.5, 0.3, 1e-2
        cfg = train.TrainConfig(steps=1, beta1=0.9, beta2=0.98, eps=1e-6)
        tree = scalar_tree(theta0)
        state = train.init_opt_state(tree)
        train.optimizer_step(tree, {"context.block0.attn.wq": np.array([g], dtype=np.float32)},
                             state, lr, cfg)
        m1 = (1 - 0.9) * g
        v1 = (1 - 0.98) * g * g
        mhat = m1 / (1 - 0.9)
        vhat = v1 / (1 - 0.98)
        expected = theta0 - lr * mhat / (np.sqrt(vhat) + 1e-6)
        assert tree.array("context.block0.attn.wq")[0] == pytest.approx(expected, abs=1e-7)
        assert state["t"] == 1

    def test_zero_grads_leave_params(self):
        tree = scalar_tree(1.25)
        state = train.init_opt_state(tree)
        train.optimizer_step(tree, {"context.block0.attn.wq": np.zeros(1, dtype=np.float32)},
                             state, 1e-3, train.TrainConfig(steps=1))
        assert tree.array("context.block0.attn.wq")[0] == np.float32(1.25)
        assert state["t"] == 1

    def test_masked_positions_keep_weight_and_moments(self):
        tree = m.ParamTree()
        tree.add("context.block0.attn.wq", np.array([1.0, 2.0, 3.0], dtype=np.float32),
                 m.SECTION_CONTEXT_LINEAR)
        state = train.init_opt_state(tree)
        state["m"]["context.block0.attn.wq"][:] = [0.1, 0.2, 0.3]
        state["v"]["context.block0.attn.wq"][:] = [0.01, 0.02, 0.03]
        before_w = tree.array("context.block0.attn.wq").copy()
        before_m = state["m"]["context.block0.attn.wq"].copy()
        before_v = state["v"]["context.block0.attn.wq"].copy()
        keep = {"context.block0.attn.wq": np.array([True, False, True])}
        train.optimizer_step(tree, {"context.block0.attn.wq":
                                    np.array([0.5, 0.5, 0.5], dtype=np.float32)},
                             state, 1e-2, train.TrainConfig(steps=1), keep_mask=keep)
        w = tree.array("context.block0.attn.wq")
        assert w[1] == before_w[1]
        assert state["m"]["context.block0.attn.wq"][1] == before_m[1]
        assert state["v"]["context.block0.attn.wq"][1] == before_v[1]
        assert w[0] != before_w[0] and w[2] != before_w[2]

    def test_nonfinite_grads_rejected(self):
        tree = scalar_tree(1.0)
        state = train.init_opt_state(tree)
        bad = np.array([np.inf], dtype=np.float32)
        with pytest.raises(ad.NonFiniteError, match="gradient"):
            train.optimizer_step(tree, {"context.block0.attn.wq": bad}, state, 1e-3,
                                 train.TrainConfig(steps=1))


class TestPretrain:
    def test_loss_decreases_over_fifty_steps(self, corpus):
        deltas = []
        for seed in range(5):
            first_last = {}

            def metrics(rec, fl=first_last):
                fl.setdefault("first", rec["total"])
                fl["last"] = rec["total"]

            train.pretrain(corpus, SMALL, SMALL_OBJ,
                           train.TrainConfig(steps=50, batch_size=4, peak_lr=2e-3),
                           seed=seed, metrics=metrics)
            deltas.append(first_last["first"] - first_last["last"])
        assert np.median(deltas) > 0

    def test_same_seed_identical_final_state(self, corpus):
        cfg = train.TrainConfig(steps=8, batch_size=3)
        losses = []
        digests = []
        for _ in range(2):
            records = []
            c = train.pretrain(corpus, SMALL, SMALL_OBJ, cfg, seed=99,
                               metrics=records.append)
            losses.append([r["total"] for r in records])
            digests.append(c.params.digest())
        assert losses[0] == losses[1]
        assert digests[0] == digests[1]

    def test_divergence_aborts_with_step_and_metrics(self, corpus):
        cfg = train.TrainConfig(steps=5, batch_size=2)
        params = m.init_params(SMALL, 0)
        with np.errstate(over="ignore", invalid="ignore"):
            # large enough that a 32-wide matmul overflows float32
            params.set_array("context.in_proj.w",
                             np.full_like(params.array("context.in_proj.w"), 1e38))
            with pytest.raises(train.DivergenceError) as e:
                train.run_stage(params, corpus, SMALL, SMALL_OBJ, cfg, 0, "pretrain")
        assert e.value.step == 1 and e.value.stage == "pretrain"


class TestWarmup:
    def test_zero_learning_limit_keeps_base(self, corpus):
        base = train.pretrain(corpus, SMALL, SMALL_OBJ,
                              train.TrainConfig(steps=3, batch_size=2), seed=1)
        lang = corpus.languages[0]
        warmed = train.warmup_language(base, lang, corpus, SMALL, SMALL_OBJ,
                                       train.TrainConfig(steps=3, batch_size=2,
                                                         peak_lr=1e-30), seed=2)
        assert warmed.digest() == base.params.digest()

    def test_languages_diverge_and_base_untouched(self, corpus):
        base = train.pretrain(corpus, SMALL, SMALL_OBJ,
                              train.TrainConfig(steps=3, batch_size=2), seed=3)
        before = base.params.digest()
        cfg = train.TrainConfig(steps=5, batch_size=3, peak_lr=2e-3)
        t_a = train.warmup_language(base, corpus.languages[0], corpus, SMALL, SMALL_OBJ, cfg, 4)
        t_b = train.warmup_language(base, corpus.languages[1], corpus, SMALL, SMALL_OBJ, cfg, 4)
        assert base.params.digest() == before
        assert t_a.digest() != t_b.digest()

    def test_unknown_language_rejected(self, corpus):
        base = train.pretrain(corpus, SMALL, SMALL_OBJ,
                              train.TrainConfig(steps=2, batch_size=2), seed=5)
        with pytest.raises(KeyError, match="zz"):
            train.warmup_language(base, "zz", corpus, SMALL, SMALL_OBJ,
                                  train.TrainConfig(steps=2), seed=6)


@pytest.fixture(scope="module")
def pretrained(corpus):
    return train.pretrain(corpus, SMALL, SMALL_OBJ,
                          train.TrainConfig(steps=12, batch_size=3), seed=7)


def random_masks(params, corpus, p=0.5, seed=0):
    rng = np.random.default_rng(seed)
    return {lang: pr.random_mask(params, p, "layerwise", rng, group=lang)
            for lang in corpus.languages}


class TestAdapt:
    def test_missing_mask_fails_before_training(self, corpus, pretrained):
        masks = random_masks(pretrained.params, corpus)
        del masks[corpus.languages[1]]
        with pytest.raises(ValueError, match="no sub-network mask"):
            train.adapt_s3net(pretrained, masks, corpus, SMALL, SMALL_OBJ,
                              train.TrainConfig(steps=2, batch_size=2), seed=8)

    def test_update_isolation_per_step(self, corpus, pretrained):
        masks = random_masks(pretrained.params, corpus, p=0.5, seed=9)
        params = pretrained.params.copy()
        opt = train.init_opt_state(params)
        cfg = train.TrainConfig(steps=12, batch_size=2, peak_lr=2e-3)
        prunable = params.prunable_names()
        snapshots = []

        def snap():
            return ({n: params.array(n).copy() for n in prunable},
                    {n: opt["m"][n].copy() for n in prunable},
                    {n: opt["v"][n].copy() for n in prunable})

        steps = []
        snapshots.append(snap())

        def metrics(rec):
            steps.append(rec["language"])
            snapshots.append(snap())

        train.run_stage(params, corpus, SMALL, SMALL_OBJ, cfg, 10, "adapt",
                        masks=masks, opt_state=opt, metrics=metrics)
        assert len(set(steps)) > 1  # both languages took steps
        for k, lang in enumerate(steps):
            (w0, m0, v0), (w1, m1, v1) = snapshots[k], snapshots[k + 1]
            for name in prunable:
                dropped = ~masks[lang].entries[name]
                assert np.array_equal(w0[name][dropped], w1[name][dropped])
                assert np.array_equal(m0[name][dropped], m1[name][dropped])
                assert np.array_equal(v0[name][dropped], v1[name][dropped])

    def test_all_ones_masks_equal_plain_training(self, corpus, pretrained):
        cfg = train.TrainConfig(steps=6, batch_size=3)
        ones = {lang: pr.all_ones_mask(pretrained.params, group=lang)
                for lang in corpus.languages}
        a = pretrained.params.copy()
        train.run_stage(a, corpus, SMALL, SMALL_OBJ, cfg, 11, "adapt", masks=ones)
        b = pretrained.params.copy()
        train.run_stage(b, corpus, SMALL, SMALL_OBJ, cfg, 11, "adapt", masks=None)
        assert a.digest() == b.digest()

    def test_dead_positions_zeroed_once(self, corpus, pretrained):
        masks = random_masks(pretrained.params, corpus, p=0.6, seed=12)
        dead = train.dead_positions(masks)
        assert any(d.any() for d in dead.values())
        out = train.adapt_s3net(pretrained, masks, corpus, SMALL, SMALL_OBJ,
                                train.TrainConfig(steps=4, batch_size=2), seed=13)
        for name, d in dead.items():
            assert np.all(out.params.array(name)[d] == 0.0)
        # base checkpoint still intact
        assert not np.all(pretrained.params.array(next(iter(dead)))[dead[next(iter(dead))]] == 0.0)


class TestSamplingParity:
    def test_adapt_matches_pretrain_frequencies(self, corpus):
        specs = corpus.sampler_specs()
        n = 10_000
        freqs = {}
        for stage in ("pretrain", "adapt"):
            draws = [train.stage_language(specs, 42, stage, t) for t in range(1, n + 1)]
            freqs[stage] = {l: draws.count(l) / n for l in corpus.languages}
        for lang in corpus.languages:
            assert abs(freqs["pretrain"][lang] - freqs["adapt"][lang]) < 0.01


class TestCheckpointRoundTrip:
    def test_save_load_resume_bit_identical(self, corpus, tmp_path):
        obj_records, had_records = [], []
        full_cfg = train.TrainConfig(steps=10, batch_size=3)
        continuous = train.pretrain(corpus, SMALL, SMALL_OBJ, full_cfg, seed=21,
                                    metrics=obj_records.append)

        half = train.pretrain(corpus, SMALL, SMALL_OBJ, full_cfg, seed=21, stop_step=5)
        ck.save_checkpoint(half, tmp_path / "half")
        reloaded = ck.load_checkpoint(tmp_path / "half")
        assert reloaded.params.digest() == half.params.digest()
        assert reloaded.step == 5 and reloaded.stage == "pretrain"

        resumed = train.pretrain(corpus, SMALL, SMALL_OBJ, full_cfg, seed=21,
                                 metrics=had_records.append, resume=reloaded)
        assert resumed.params.digest() == continuous.params.digest()
        assert [r["total"] for r in obj_records[5:]] == [r["total"] for r in had_records]
        for name in continuous.params.names():
            np.testing.assert_array_equal(resumed.opt_state["m"][name],
                                          continuous.opt_state["m"][name])
            np.testing.assert_array_equal(resumed.opt_state["v"][name],
                                          continuous.opt_state["v"][name])

    def test_saved_twice_byte_identical(self, pretrained, tmp_path):
        ck.save_checkpoint(pretrained, tmp_path / "a")
        ck.save_checkpoint(pretrained, tmp_path / "b")
        for f in ("manifest.json", "params.bin", "optimizer.bin"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

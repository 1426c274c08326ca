"""Acceptance gate: every criterion checked at its stated tolerance.

Each test prints one `[acceptance] criterion N ...: PASS/FAIL` line (visible
even under pytest capture). The directional desk experiment (criterion 7)
and the prune-rate sweep (criterion 8) train at desk defaults and dominate
the suite's runtime.
"""

import json
import time

import numpy as np
import pytest

from s3net import analysis as an
from s3net import autodiff as ad
from s3net import checkpoint as ck
from s3net import data
from s3net import model as m
from s3net import objective as obj
from s3net import pipeline as pl
from s3net import pruning as pr
from s3net import train
from s3net.config import parse_config

from conftest import fd_grad, max_rel_err
from test_model import TINY
from test_objective import brute_force_contrastive
from test_pruning import sort_oracle_zero_sets, zero_sets
from test_train import SMALL, SMALL_OBJ


def announce(capsys, num, name, ok, detail=""):
    with capsys.disabled():
        print(f"\n[acceptance] criterion {num} ({name}): "
              f"{'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# shared desk-scale fixtures (criteria 7 and 8)

DESK_CORPUS_CONFIG = {
    "seed": 11,
    "corpus": {
        "window_seconds": 0.6,
        "languages": {"n_high": 2, "n_low": 2, "high_seconds": 120.0,
                      "low_seconds": 48.0, "spec_seed": 7},
    },
    "eval": {"seed": 4242},
    "sweep": {"prune_rate": [0.0, 0.2, 0.4, 0.6, 0.8], "max_cells": 8},
}


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    corpus_dir = tmp_path_factory.mktemp("desk") / "corpus"
    cfg_dict = json.loads(json.dumps(DESK_CORPUS_CONFIG))
    cfg_dict["corpus"]["path"] = str(corpus_dir)
    cfg = parse_config(cfg_dict)
    corpus = pl.stage_gen_data(cfg)
    return cfg_dict, corpus


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    specs = data.default_language_specs(n_high=1, n_low=1, seed=77,
                                        high_seconds=20.0, low_seconds=10.0)
    return data.make_corpus(specs, tmp_path_factory.mktemp("small") / "c",
                            window_seconds=0.45, seed=78)


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness


def _primitive_cases():
    """(name, point_factory); a point is (input arrays, loss builder) with all
    projection constants frozen, so the builder is a pure function of its
    tensor arguments."""

    def case(shapes, op, out_shape=None):
        def factory(rng):
            arrays = [rng.normal(size=s) if isinstance(s, tuple) else s(rng)
                      for s in shapes]
            weights = rng.normal(size=out_shape) if out_shape is not None else None

            def build(*tensors):
                y = op(*tensors)
                if weights is None:
                    return ad.reduce_sum(y)
                return ad.reduce_sum(ad.mul(y, ad.constant(weights)))

            return arrays, build
        return factory

    uniform = lambda lo, hi, s: (lambda rng: rng.uniform(lo, hi, size=s))
    return [
        ("add", case([(2, 3), (2, 3)], ad.add, (2, 3))),
        ("add_broadcast", case([(2, 3), (3,)], ad.add, (2, 3))),
        ("sub", case([(2, 3), (2, 3)], ad.sub, (2, 3))),
        ("mul", case([(2, 3), (2, 3)], ad.mul, (2, 3))),
        ("neg_scale", case([(2, 3)], lambda a: ad.scale(ad.neg(a), 1.7), (2, 3))),
        ("add_scalar", case([(2, 3)], lambda a: ad.add_scalar(a, 0.7), (2, 3))),
        ("matmul", case([(3, 4), (4, 2)], ad.matmul, (3, 2))),
        ("matmul_batched", case([(2, 3, 4), (2, 4, 2)], ad.matmul, (2, 3, 2))),
        ("matmul_shared", case([(2, 3, 4), (4, 2)], ad.matmul, (2, 3, 2))),
        ("conv1d", case([(1, 2, 10), (3, 2, 3), (3,)],
                        lambda x, w, b: ad.conv1d(x, w, b, stride=2), (1, 3, 4))),
        ("conv1d_padded", case([(1, 2, 8), (2, 2, 3)],
                               lambda x, w: ad.conv1d(x, w, None, 1, padding=1),
                               (1, 2, 8))),
        ("reshape_transpose", case([(2, 3, 2)],
                                   lambda a: ad.transpose(ad.reshape(a, (6, 2)), (1, 0)),
                                   (2, 6))),
        ("reduce_sum", case([(3, 4)], lambda a: ad.reduce_sum(a, axis=0), (4,))),
        ("reduce_mean", case([(3, 4)], lambda a: ad.reduce_mean(a, axis=1), (3,))),
        ("gelu", case([(3, 4)], ad.gelu, (3, 4))),
        ("layer_norm", case([(2, 6), uniform(0.8, 1.2, (6,)), uniform(-0.2, 0.2, (6,))],
                            ad.layer_norm, (2, 6))),
        ("softmax", case([(3, 5)], ad.softmax, (3, 5))),
        ("log_sum_exp", case([(3, 5)], ad.log_sum_exp, (3,))),
        ("xlogx", case([uniform(0.05, 1.0, (3, 4))], ad.xlogx, None)),
        ("l2_normalize", case([(3, 5)], ad.l2_normalize, (3, 5))),
        ("cosine_similarity", case([(4, 5), (4, 5)], ad.cosine_similarity, (4,))),
        ("gather_rows", case([(2, 5, 3)],
                             lambda a: ad.gather_rows(a, np.array([0, 1, 1, 0]),
                                                      np.array([1, 4, 4, 2])), (4, 3))),
        ("replace_rows", case([(2, 4, 3), (3,)],
                              lambda a, v: ad.replace_rows(
                                  a, np.array([[0, 1, 0, 1], [1, 0, 0, 0]], dtype=bool),
                                  v), (2, 4, 3))),
        ("mask_weights", case([(4, 4)],
                              lambda a: ad.mask_weights(
                                  a, np.arange(16).reshape(4, 4) % 3 != 0), (4, 4))),
        ("gumbel_soft", case([(3, 5)],
                             lambda a: ad.gumbel_softmax(a, 0.9, False,
                                                         np.random.default_rng(4321)),
                             (3, 5))),
    ]


def test_criterion_1_gradient_correctness(capsys):
    started = time.time()
    rng = np.random.default_rng(1)
    worst = {"case": "", "err": 0.0}
    # steeply curved ops get a smaller oracle step; tolerance is unchanged
    small_h = {"layer_norm", "l2_normalize", "cosine_similarity", "xlogx", "gumbel_soft"}
    for name, factory in _primitive_cases():
        h = 2e-4 if name in small_h else 1e-3
        for _point in range(100):
            arrays, build = factory(rng)
            arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
            tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
            grads = ad.backward(build(*tensors))

            def fn(*arrs):
                return float(build(*[ad.constant(a) for a in arrs]).data)

            for i, t in enumerate(tensors):
                err = max_rel_err(grads[t], fd_grad(fn, arrays, i, h=h))
                if err > worst["err"]:
                    worst = {"case": f"{name}[{i}]", "err": err}
    primitives_ok = worst["err"] < 1e-4

    # end-to-end loss spot checks (64-bit shadow, soft quantizer path)
    params64 = m.init_params(TINY, seed=21).astype(np.float64)
    ocfg = obj.ObjectiveConfig(distractors_k=3, mask=obj.MaskSpec(0.2, 3))
    wave = np.random.default_rng(22).normal(size=(2, 90)) * 0.3

    def loss_tensor():
        loss, _ = obj.total_loss(wave, params64, TINY, ocfg, 1.5,
                                 np.random.default_rng(99), hard=False)
        return loss

    grads = params64.grad_map(ad.backward(loss_tensor()))
    end_worst = 0.0
    spot_rng = np.random.default_rng(23)
    for name in ["context.block0.attn.wq", "context.block1.ffn.w1", "quantizer.codebook",
                 "encoder.conv0.w", "mask_embedding", "context.pos_conv.w"]:
        arr = params64.array(name)
        idx = np.unravel_index(int(spot_rng.integers(arr.size)), arr.shape)
        orig = arr[idx]
        arr[idx] = orig + 1e-5
        fp = float(loss_tensor().data)
        arr[idx] = orig - 1e-5
        fm = float(loss_tensor().data)
        arr[idx] = orig
        fd = (fp - fm) / 2e-5
        ga = grads[name][idx]
        end_worst = max(end_worst, abs(ga - fd) / max(abs(fd), abs(ga), 1e-6))
    elapsed = time.time() - started
    ok = primitives_ok and end_worst < 1e-3 and elapsed < 60
    announce(capsys, 1, "gradient correctness", ok,
             f"primitives worst {worst['err']:.2e} at {worst['case']} (tol 1e-4), "
             f"end-to-end worst {end_worst:.2e} (tol 1e-3), {elapsed:.1f}s (< 60s)")


def test_criterion_2_loss_formula_oracles(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        t, k = 6, 2
        c = rng.normal(size=(t, 5))
        q = rng.normal(size=(t, 5))
        masked = sorted(int(x) for x in rng.choice(t, size=4, replace=False))
        ds = {tt: [int(j) for j in rng.choice([x for x in masked if x != tt], k)]
              for tt in masked}
        ours = float(obj.contrastive_loss(c, q, masked, ds, kappa=0.15).data)
        ref = brute_force_contrastive(c, q, masked, ds, kappa=0.15)
        worst = max(worst, abs(ours - ref))
    contrastive_ok = worst <= 1e-6

    uniform = float(obj.diversity_loss(np.full((2, 320), 1.0 / 320)).data)
    uniform_ok = uniform == pytest.approx(-np.log(320) / 320, abs=1e-12)
    onehot = np.zeros((2, 5))
    onehot[:, 3] = 1.0
    onehot_ok = float(obj.diversity_loss(onehot).data) == 0.0
    ok = contrastive_ok and uniform_ok and onehot_ok
    announce(capsys, 2, "loss-formula oracles", ok,
             f"contrastive worst |diff| {worst:.2e} over 50 instances (tol 1e-6), "
             f"uniform V=320 -> {uniform:.6f}, one-hot -> 0 exactly")


def test_criterion_3_pruning_oracles(capsys):
    rng = np.random.default_rng(3)
    mismatches = 0
    count_violations = 0
    for scope in ("layerwise", "global"):
        for _ in range(100):
            sizes = [(int(rng.integers(2, 8)), int(rng.integers(2, 8)))
                     for _ in range(int(rng.integers(1, 4)))]
            scores = {f"context.block{i}.ffn.w1": rng.normal(size=s) ** 2
                      for i, s in enumerate(sizes)}
            p = float(rng.uniform(0, 0.95))
            mask = pr.extract_mask(pr.ImportanceTable(scores, "magnitude"), p, scope)
            if zero_sets(mask) != sort_oracle_zero_sets(scores, p, scope):
                mismatches += 1
            if scope == "layerwise":
                for name, bits in mask.entries.items():
                    if mask.zeros(name) != int(np.floor(p * bits.size + 1e-9)):
                        count_violations += 1
            else:
                if mask.total_zeros() != int(np.floor(p * mask.total_size() + 1e-9)):
                    count_violations += 1

    # first-order importance is exact for a linear loss
    a = ad.Tensor(np.array([1.0]), requires_grad=True)
    b = ad.Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.reduce_sum(ad.add(ad.scale(a, 3.0), ad.scale(b, 2.0)))
    g = ad.backward(loss)[a]
    importance = float(((g * a.data) ** 2)[0])
    removed = float(ad.reduce_sum(ad.scale(b, 2.0)).data)
    taylor_ok = importance == (float(loss.data) - removed) ** 2 == 9.0

    ok = mismatches == 0 and count_violations == 0 and taylor_ok
    announce(capsys, 3, "pruning oracles", ok,
             f"sort-oracle mismatches {mismatches}/200, count violations "
             f"{count_violations}, linear-loss importance exact: {taylor_ok}")


def test_criterion_4_subnetwork_semantics(capsys, small_corpus):
    started = time.time()
    # masked-forward equivalence: view vs materialized zeros, bit-exact
    params = m.init_params(SMALL, seed=41)
    equiv_fail = 0
    for trial in range(20):
        mask = pr.random_mask(params, 0.4, "layerwise",
                              np.random.default_rng(trial), group="g")
        batch = small_corpus.sample_batch(small_corpus.languages[trial % 2], "train",
                                          2, np.random.default_rng(trial))
        a, _ = obj.total_loss(batch.windows, pr.apply_mask(params, mask), SMALL,
                              SMALL_OBJ, 1.0, np.random.default_rng(1000 + trial))
        b, _ = obj.total_loss(batch.windows, pr.materialize_masked(params, mask), SMALL,
                              SMALL_OBJ, 1.0, np.random.default_rng(1000 + trial))
        if float(a.data) != float(b.data):
            equiv_fail += 1

    # update isolation over 100 steps of a live adaptation run
    masks = {lang: pr.random_mask(params, 0.5, "layerwise",
                                  np.random.default_rng(7 + i), group=lang)
             for i, lang in enumerate(small_corpus.languages)}
    run_params = params.copy()
    opt = train.init_opt_state(run_params)
    prunable = run_params.prunable_names()
    snapshots = [({n: run_params.array(n).copy() for n in prunable},
                  {n: opt["m"][n].copy() for n in prunable},
                  {n: opt["v"][n].copy() for n in prunable})]
    langs_taken = []

    def metrics(rec):
        langs_taken.append(rec["language"])
        snapshots.append(({n: run_params.array(n).copy() for n in prunable},
                          {n: opt["m"][n].copy() for n in prunable},
                          {n: opt["v"][n].copy() for n in prunable}))

    train.run_stage(run_params, small_corpus, SMALL, SMALL_OBJ,
                    train.TrainConfig(steps=100, batch_size=2, peak_lr=2e-3),
                    root_seed=42, stage="adapt", masks=masks, opt_state=opt,
                    metrics=metrics)
    isolation_fail = 0
    for k, lang in enumerate(langs_taken):
        (w0, m0, v0), (w1, m1, v1) = snapshots[k], snapshots[k + 1]
        for name in prunable:
            dropped = ~masks[lang].entries[name]
            if not (np.array_equal(w0[name][dropped], w1[name][dropped])
                    and np.array_equal(m0[name][dropped], m1[name][dropped])
                    and np.array_equal(v0[name][dropped], v1[name][dropped])):
                isolation_fail += 1
    elapsed = time.time() - started
    ok = equiv_fail == 0 and isolation_fail == 0 and len(langs_taken) == 100 and elapsed < 60
    announce(capsys, 4, "sub-network semantics", ok,
             f"view-vs-materialized mismatches {equiv_fail}/20 (bit-exact), isolation "
             f"violations {isolation_fail} over {len(langs_taken)} steps, {elapsed:.1f}s (< 60s)")


def test_criterion_5_language_sampling(capsys):
    def specs_for(hours):
        gen = data.GeneratorSpec(states=(data.StateSpec((300.0,), (1.0,)),),
                                 transitions=((1.0,),))
        return [data.LanguageSpec(id=f"l{i}", seconds=h, tier="high", generator=gen)
                for i, h in enumerate(hours)]

    exact = data.sampling_probabilities(specs_for([90.0, 10.0]), 0.5)
    exact_ok = np.allclose(exact, [0.75, 0.25], atol=1e-12)

    worst = 0.0
    rng = np.random.default_rng(5)
    for alpha in (0.5, 1.0):
        specs = specs_for([90.0, 30.0, 10.0])
        target = data.sampling_probabilities(specs, alpha)
        n = 100_000
        ids = [s.id for s in specs]
        counts = {i: 0 for i in ids}
        for _ in range(n):
            counts[data.language_sampler(specs, alpha, rng)] += 1
        for i, lang_id in enumerate(ids):
            worst = max(worst, abs(counts[lang_id] / n - target[i]))
    ok = exact_ok and worst < 0.005
    announce(capsys, 5, "language sampling", ok,
             f"exact 3:1 case: {exact.tolist()}, empirical worst |diff| {worst:.4f} "
             f"over 100k draws (tol 0.005) for alpha in {{0.5, 1.0}}")


def test_criterion_6_time_masking(capsys):
    t_frames, s, span, trials = 100, 0.065, 10, 10_000
    spec = obj.MaskSpec(s, span)
    rng_impl = np.random.default_rng(6)
    impl = np.mean([obj.sample_time_mask(t_frames, spec, rng_impl).size
                    for _ in range(trials)]) / t_frames
    rng_oracle = np.random.default_rng(1006)
    total = 0
    for _ in range(trials):
        starts = rng_oracle.random(t_frames) < s
        total += sum(starts[max(0, t - span + 1):t + 1].any() for t in range(t_frames))
    oracle = total / (trials * t_frames)
    diff = abs(impl - oracle)
    announce(capsys, 6, "time masking", diff < 0.01,
             f"mean masked fraction {impl:.4f} vs Monte-Carlo oracle {oracle:.4f}, "
             f"|diff| {diff:.4f} (tol 0.01)")


def test_criterion_7_directional_desk_experiment(capsys, desk_corpus):
    started = time.time()
    _, corpus = desk_corpus
    mc = m.ModelConfig()
    oc = obj.ObjectiveConfig()
    pre_cfg = train.TrainConfig(steps=2000)
    warm_cfg = train.TrainConfig(steps=500)
    adapt_cfg = train.TrainConfig(steps=500)
    eval_seed = 4242

    arms: dict[str, list[float]] = {"lth": [], "control": [], "random": []}
    for seed in range(5):
        base = train.pretrain(corpus, mc, oc, pre_cfg, seed=seed)
        lth_masks = {}
        for lang in corpus.languages:
            warmed = train.warmup_language(base, lang, corpus, mc, oc, warm_cfg, seed=seed)
            lth_masks[lang] = pr.extract_mask(pr.magnitude_scores(warmed), 0.4,
                                              "layerwise", group=lang)
        rng = np.random.default_rng(seed + 1000)
        masks_by_arm = {
            "lth": lth_masks,
            "control": {l: pr.all_ones_mask(base.params, group=l) for l in corpus.languages},
            "random": {l: pr.random_mask(base.params, 0.4, "layerwise", rng, group=l)
                       for l in corpus.languages},
        }
        for arm, masks in masks_by_arm.items():
            ckpt = train.adapt_s3net(base, masks, corpus, mc, oc, adapt_cfg, seed=seed)
            eval_masks = None if arm == "control" else masks
            report = an.eval_heldout(ckpt.params, eval_masks, corpus, mc, oc,
                                     eval_seed=eval_seed)
            arms[arm].append(report.average_total)

    # paired per-seed comparison (shared base checkpoint, sampling streams and
    # eval seed within each seed), median of the differences over 5 seeds
    lth_vs_control = np.array(arms["lth"]) - np.array(arms["control"])
    random_vs_lth = np.array(arms["random"]) - np.array(arms["lth"])
    cond_a = float(np.median(lth_vs_control)) <= 0.0
    cond_b = float(np.median(random_vs_lth)) >= 0.0
    elapsed = time.time() - started
    per_seed = "; ".join(
        f"seed {s}: lth {arms['lth'][s]:.4f} ctl {arms['control'][s]:.4f} "
        f"rnd {arms['random'][s]:.4f}" for s in range(5))
    announce(capsys, 7, "directional desk experiment", cond_a and cond_b,
             f"median paired deltas over 5 seeds: lth-control "
             f"{np.median(lth_vs_control):+.5f} (<= 0: {cond_a}), random-lth "
             f"{np.median(random_vs_lth):+.5f} (>= 0: {cond_b}); {per_seed}; "
             f"{elapsed / 60:.1f} min (target <= 30 min)")


def test_criterion_8_prune_rate_sweep(capsys, desk_corpus, tmp_path):
    started = time.time()
    cfg_dict, _corpus = desk_corpus
    cfg = parse_config(json.loads(json.dumps(cfg_dict)))
    report = pl.run_sweep(cfg, tmp_path / "sweep", jobs=1)
    rates = sorted(r["prune_rate"] for r in report["rows"])
    complete = rates == [0.0, 0.2, 0.4, 0.6, 0.8]
    paired = (len({r["run"] for r in report["rows"]}) == 5
              and report["control_run"] is not None)
    # pairing invariants are enforced by construction; verify from the files
    cell_reports = [json.loads((tmp_path / "sweep" / "cells" / r["run"] /
                                "reports" / "eval_adapt.json").read_text())
                    for r in report["rows"]]
    seeds = {c["eval_seed"] for c in cell_reports}
    digests = {c["corpus_digest"] for c in cell_reports}
    paired = paired and len(seeds) == 1 and len(digests) == 1
    elapsed = time.time() - started
    curve = ", ".join(f"p={r['prune_rate']:g}: {r['avg']:.4f}"
                      for r in sorted(report["rows"], key=lambda r: r["prune_rate"]))
    announce(capsys, 8, "prune-rate sweep shape", complete and paired,
             f"5 paired cells (shared eval seed {seeds} / corpus), loss-vs-p: "
             f"[{curve}]; {elapsed / 60:.1f} min")
    with capsys.disabled():
        print(report["text"], end="")


def test_criterion_9_reproducibility(capsys, tmp_path, small_corpus):
    # a full run re-executed from its own stored config reproduces metrics
    cfg_dict = {
        "seed": 9,
        "corpus": {"path": str(small_corpus.root), "window_seconds": 0.45,
                   "languages": {"n_high": 1, "n_low": 1, "high_seconds": 20.0,
                                 "low_seconds": 10.0, "spec_seed": 77}},
        "model": {"encoder_layers": [[16, 10, 8], [32, 8, 5], [32, 4, 4]],
                  "d_model": 32, "n_heads": 2, "n_blocks": 2, "ffn_dim": 64,
                  "entries_v": 12, "codeword_dim": 8},
        "objective": {"distractors_k": 5},
        "train": {"batch_size": 3, "pretrain_steps": 8, "warmup_steps": 4,
                  "adapt_steps": 6},
    }
    run_a = tmp_path / "a"
    pl.run_pipeline(parse_config(cfg_dict), run_a)
    stored = json.loads((run_a / "config.json").read_text())
    run_b = tmp_path / "b"
    pl.run_pipeline(parse_config(stored), run_b)
    files = ["metrics/pretrain.jsonl", "metrics/adapt.jsonl",
             "reports/eval_adapt.json", "reports/eval_pretrain.json",
             "checkpoints/pretrain/params.bin", "checkpoints/adapt/params.bin"]
    diffs = [f for f in files if (run_a / f).read_bytes() != (run_b / f).read_bytes()]

    # checkpoint round trip: pause at step 5, reload, finish; trajectories match
    full_cfg = train.TrainConfig(steps=10, batch_size=3)
    continuous = train.pretrain(small_corpus, SMALL, SMALL_OBJ, full_cfg, seed=31)
    half = train.pretrain(small_corpus, SMALL, SMALL_OBJ, full_cfg, seed=31, stop_step=5)
    ck.save_checkpoint(half, tmp_path / "half")
    resumed = train.pretrain(small_corpus, SMALL, SMALL_OBJ, full_cfg, seed=31,
                             resume=ck.load_checkpoint(tmp_path / "half"))
    roundtrip_ok = resumed.params.digest() == continuous.params.digest()
    ok = not diffs and roundtrip_ok
    announce(capsys, 9, "reproducibility", ok,
             f"re-executed run byte-identical: {not diffs} "
             f"(diffs: {diffs or 'none'}); 10-step checkpoint round trip "
             f"bit-identical: {roundtrip_ok}")

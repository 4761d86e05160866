"""Acceptance gates for the paired-training library.

Each test here is one externally checkable claim about the finished
system, exercised end to end at pinned tolerances. The image-corpus
tests run real training and dominate the suite's wall time; they share
one session fixture so the corpus is built and the runs happen once.

Set PAIRLEARN_DATA_ROOT to a directory holding the standard binary
image batches to run the accuracy gates on real data. Without it the
fixture writes a deterministic synthetic corpus in the same binary
layout, exercising the identical loading and training path.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest

import oracles
from pairlearn import nn, plm, tensor as T
from pairlearn.backbones import BackboneSpec, build_pair
from pairlearn.config import OptimConfig, RunConfig
from pairlearn.data import DatasetSpec, load_dataset
from pairlearn.glyphs import ensure_glyph_cifar
from pairlearn.optim import StageLosses
from pairlearn.plm import PlmConfig, one_hot
from pairlearn.tensor import Tape, Tensor
from pairlearn.trainer import Trainer, evaluate, run_experiment

F32 = np.float32


# ---------------------------------------------------------------------------
# shared configuration helpers


def conv_spec(classes=4, depth=1, width=8):
    return BackboneSpec(kind="conv", depth=depth, width=width, classes=classes)


def vit_spec(classes=4, depth=1, width=8, heads=2, patch=4):
    return BackboneSpec(kind="transformer", depth=depth, width=width,
                        classes=classes, heads=heads, patch=patch)


def tiny_config(mode="vpl", epochs=4, x=25, y=25, seed=0, lr=1e-3, ema=False,
                classes=4, train_count=64, eval_count=64, batch_size=32,
                image_size=8, noise=0.5, **extra):
    """A fast synthetic run: two one-block branches on 8x8 images."""
    data = DatasetSpec(source="synthetic", classes=classes, seed=seed,
                       image_size=image_size, channels=3,
                       train_count=train_count, eval_count=eval_count,
                       noise=noise)
    return RunConfig(
        mode=mode,
        branch_a=conv_spec(classes=classes),
        branch_b=vit_spec(classes=classes, patch=image_size // 2),
        plm=PlmConfig(tau=0.1, rho=2.0, routing="restricted"),
        x=x, y=y,
        optim_a=OptimConfig(max_lr=lr, min_lr=lr / 10),
        optim_b=OptimConfig(max_lr=lr, min_lr=lr / 10),
        data=data,
        epochs=epochs,
        batch_size=batch_size,
        seed=seed,
        ema=ema,
        **extra,
    )


def corpus_config(mode, seed, root):
    """The benchmark setup used by the accuracy gates: a three-stage
    conv-and-transformer pair on the 32x32 ten-class corpus."""
    data = DatasetSpec(source="cifar10-binary", classes=10, seed=seed,
                       root=root, flip=True, crop_pad=2,
                       limit=5000, eval_limit=2000,
                       mean=(0.35, 0.35, 0.35), std=(0.3, 0.3, 0.3))
    return RunConfig(
        mode=mode,
        branch_a=BackboneSpec(kind="conv", depth=3, width=32, classes=10),
        branch_b=BackboneSpec(kind="transformer", depth=2, width=32,
                              classes=10, heads=4, patch=4),
        plm=PlmConfig(tau=0.1, rho=4.0, routing="restricted"),
        x=20, y=20,
        optim_a=OptimConfig(max_lr=3e-3, min_lr=3e-5),
        optim_b=OptimConfig(max_lr=1e-3, min_lr=1e-5),
        data=data,
        epochs=10,
        batch_size=64,
        seed=seed,
        ema=True,
    )


@pytest.fixture(scope="session")
def corpus_root(tmp_path_factory):
    env = os.environ.get("PAIRLEARN_DATA_ROOT")
    if env and os.path.exists(os.path.join(env, "data_batch_1.bin")):
        return env
    root = str(tmp_path_factory.mktemp("corpus"))
    ensure_glyph_cifar(root, seed=0)
    return root


@pytest.fixture(scope="session")
def benchmark_runs(corpus_root):
    """Paired and independent training on the corpus, three seeds each.

    Returns per-arm metric rows plus the total training wall time so the
    accuracy gates can also check their time budget.
    """
    runs = {}
    t0 = time.perf_counter()
    for seed in (0, 1, 2):
        for mode in ("vpl", "independent"):
            trainer = Trainer(corpus_config(mode, seed, corpus_root))
            runs[(mode, seed)] = trainer.train()
    return {"rows": runs, "wall_s": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# criterion 1: analytic gradients match finite differences everywhere


def test_c1_gradients_match_finite_differences():
    """Every layer class and every loss agrees with central differences.

    Twenty random small instances per unit, relative error below 1e-3
    with the |ad - fd| / max(1, |fd|) metric at step 1e-3. Coordinates
    sitting within a step of a relu kink are re-probed at smaller steps,
    where a biased difference quotient collapses and a genuinely wrong
    gradient would not. The whole sweep must finish inside two minutes.
    """
    t0 = time.perf_counter()

    def layer_case(make, shape, train_flag=False, scale=0.5):
        def run(i):
            rng = np.random.default_rng(1000 + i)
            layer = make(rng)
            x = np.random.default_rng(2000 + i).standard_normal(shape).astype(F32) * scale
            if train_flag:
                call = lambda: layer(Tensor(x), True)
            else:
                call = lambda: layer(Tensor(x))
            v = np.random.default_rng(3000 + i).standard_normal(call().shape).astype(F32) * 0.5

            def build_loss():
                return T.tsum(T.multiply(call(), Tensor(v)))

            probe_rng = np.random.default_rng(4000 + i)
            return oracles.fd_gradient_refined_error(
                build_loss, layer.parameter_store().tensors(), probe_rng
            )
        return run

    layer_cases = {
        "linear": layer_case(lambda r: nn.Linear(6, 5, r), (4, 6)),
        "conv": layer_case(lambda r: nn.Conv2d(3, 4, 3, r, stride=2, pad=1), (2, 3, 8, 8)),
        "batchnorm": layer_case(lambda r: nn.BatchNorm2d(4), (3, 4, 5, 5), train_flag=True),
        "layernorm": layer_case(lambda r: nn.LayerNorm(8), (4, 8)),
        "attention": layer_case(lambda r: nn.MultiHeadSelfAttention(8, 2, r), (2, 5, 8)),
        "mlp": layer_case(lambda r: nn.Mlp(8, 16, r), (4, 8)),
        "patch_embed": layer_case(lambda r: nn.PatchEmbed(3, 8, 4, 8, r), (2, 3, 8, 8)),
        "transformer_block": layer_case(lambda r: nn.TransformerBlock(8, 2, 4, r), (2, 5, 8)),
        "residual_block": layer_case(lambda r: nn.ResidualBlock(4, 8, 2, r), (2, 4, 6, 6),
                                     train_flag=True),
    }

    def contrastive_case(i):
        rng = np.random.default_rng(5000 + i)
        n, d = int(rng.integers(2, 7)), int(rng.integers(3, 12))
        hc = T.parameter(rng.standard_normal((n, d)).astype(F32))
        ht = T.parameter(rng.standard_normal((n, d)).astype(F32))
        tau = float(rng.uniform(0.2, 1.0))
        return oracles.fd_gradient_refined_error(
            lambda: plm.contrastive_loss(hc, ht, tau), [hc, ht], rng
        )

    def kl_case(i):
        rng = np.random.default_rng(6000 + i)
        n, c = int(rng.integers(2, 7)), int(rng.integers(3, 9))
        zt = T.parameter(rng.standard_normal((n, c)).astype(F32))
        zc = T.parameter(rng.standard_normal((n, c)).astype(F32))
        rho = float(rng.uniform(1.0, 5.0))
        return oracles.fd_gradient_refined_error(
            lambda: plm.kl_loss(zt, zc, rho), [zt, zc], rng
        )

    def ce_case(i):
        rng = np.random.default_rng(7000 + i)
        n, c = int(rng.integers(2, 7)), int(rng.integers(3, 9))
        z = T.parameter(rng.standard_normal((n, c)).astype(F32))
        y = one_hot(rng.integers(0, c, size=n), c)
        return oracles.fd_gradient_refined_error(
            lambda: plm.cross_entropy(z, y), [z], rng
        )

    cases = dict(layer_cases)
    cases["loss_contrastive"] = contrastive_case
    cases["loss_kl"] = kl_case
    cases["loss_cross_entropy"] = ce_case

    failures = []
    for name, run in cases.items():
        worst = max(run(i) for i in range(20))
        if worst >= 1e-3:
            failures.append(f"{name}: worst rel err {worst:.3e}")
    elapsed = time.perf_counter() - t0

    assert not failures, "; ".join(failures)
    assert elapsed < 120.0, f"gradient sweep took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# criterion 2: losses agree with enumeration oracles and closed forms


def test_c2_losses_match_oracles():
    """Contrastive and distillation losses match loop-and-float64 oracles
    within 1e-6 on a hundred random instances, and hit their two known
    closed-form values exactly as closely."""
    rng = np.random.default_rng(42)
    worst_cl = worst_kl = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(2, 17))
        c = int(rng.integers(2, 11))
        hc = rng.standard_normal((n, d)).astype(F32)
        ht = rng.standard_normal((n, d)).astype(F32)
        tau = float(rng.uniform(0.1, 2.0))
        got = plm.contrastive_loss(Tensor(hc), Tensor(ht), tau).item()
        worst_cl = max(worst_cl, abs(got - oracles.contrastive_oracle(hc, ht, tau)))

        zt = rng.standard_normal((n, c)).astype(F32)
        zc = rng.standard_normal((n, c)).astype(F32)
        rho = float(rng.uniform(0.5, 8.0))
        got = plm.kl_loss(Tensor(zt), Tensor(zc), rho).item()
        worst_kl = max(worst_kl, abs(got - oracles.kl_oracle(zt, zc, rho)))

    assert worst_cl < 1e-6, f"contrastive loss off oracle by {worst_cl:.2e}"
    assert worst_kl < 1e-6, f"distillation loss off oracle by {worst_kl:.2e}"

    # One pair: the positive is the only candidate, so the loss is zero.
    h = rng.standard_normal((1, 8)).astype(F32)
    single = plm.contrastive_loss(Tensor(h), Tensor(h + 0.3), 0.37).item()
    assert abs(single) < 1e-6

    # Four identical embeddings: every anchor sees 7 equally scored
    # candidates, so each term is log 7.
    row = rng.standard_normal(8).astype(F32)
    same = Tensor(np.tile(row, (4, 1)))
    val = plm.contrastive_loss(same, Tensor(np.tile(row, (4, 1))), 0.37).item()
    assert abs(val - math.log(7.0)) < 1e-6


# ---------------------------------------------------------------------------
# criterion 3: restricted routing really is one-directional


def test_c3_restricted_routing_blocks_gradients():
    """Under restricted routing the contrastive term leaves the conv
    branch untouched and the distillation term leaves the transformer
    untouched, exactly, not approximately. In consequence the conv
    branch's first-stage updates are bitwise identical to training it
    alone."""
    rng = np.random.default_rng(3)
    pair_a, pair_b = build_pair(conv_spec(), vit_spec(), channels=3,
                                image_size=8, seed=11)
    x = Tensor(rng.standard_normal((6, 3, 8, 8)).astype(F32))
    y = one_hot(rng.integers(0, 4, size=6), 4)
    config = PlmConfig(tau=0.1, rho=2.0, routing="restricted")

    with Tape() as tape:
        out_a = pair_a(x, train=True)
        out_b = pair_b(x, train=True)
        report = plm.route(out_a.embeddings, out_b.embeddings,
                           out_a.logits, out_b.logits, y, config,
                           StageLosses(cl_active=True, kl_active=True))
        cl_grads = tape.backward(report.cl)
    for p in pair_a.parameter_store().tensors():
        assert p not in cl_grads
        assert np.all(cl_grads.get(p) == 0.0)
    reached_b = [p for p in pair_b.parameter_store().tensors() if p in cl_grads]
    assert reached_b, "contrastive term should reach the transformer branch"

    with Tape() as tape:
        out_a = pair_a(x, train=True)
        out_b = pair_b(x, train=True)
        report = plm.route(out_a.embeddings, out_b.embeddings,
                           out_a.logits, out_b.logits, y, config,
                           StageLosses(cl_active=True, kl_active=True))
        kl_grads = tape.backward(report.kl)
    for p in pair_b.parameter_store().tensors():
        assert p not in kl_grads
        assert np.all(kl_grads.get(p) == 0.0)
    reached_a = [p for p in pair_a.parameter_store().tensors() if p in kl_grads]
    assert reached_a, "distillation term should reach the conv branch"

    # First stage is contrastive-only, so the conv branch sees exactly the
    # gradients it would see training alone.
    paired = Trainer(tiny_config(mode="vpl", epochs=4, x=50, y=0, seed=7))
    alone = Trainer(tiny_config(mode="independent", epochs=4, x=50, y=0, seed=7))
    paired.train(until_epoch=2)
    alone.train(until_epoch=2)
    for (name, p), (name2, q) in zip(
        paired.branch_a.parameter_store().items(),
        alone.branch_a.parameter_store().items(),
    ):
        assert name == name2
        assert np.array_equal(p.values, q.values), f"conv param {name} diverged in stage 1"


# ---------------------------------------------------------------------------
# criterion 4: the three-stage schedule activates losses on the right epochs


def test_c4_stage_schedule_trace():
    """A hundred-epoch run with 20/20 stage percentages activates the
    contrastive term alone for epochs 0-19, both terms for 20-79, and the
    distillation term alone for 80-99. Degenerate percentages collapse to
    a single stage."""
    config = tiny_config(mode="vpl", epochs=100, x=20, y=20, seed=1,
                         train_count=32, eval_count=32, batch_size=32)
    rows = Trainer(config).train()
    assert len(rows) == 100
    for r in rows:
        expect_cl = r.epoch < 80
        expect_kl = r.epoch >= 20
        assert r.cl_active == expect_cl, f"epoch {r.epoch}: cl_active {r.cl_active}"
        assert r.kl_active == expect_kl, f"epoch {r.epoch}: kl_active {r.kl_active}"
        assert (r.cl is not None) == expect_cl
        assert (r.kl is not None) == expect_kl

    both = Trainer(tiny_config(mode="vpl", epochs=10, x=0, y=0, seed=1,
                               train_count=32, eval_count=32)).train()
    assert all(r.cl_active and r.kl_active for r in both)

    kl_only = Trainer(tiny_config(mode="vpl", epochs=10, x=0, y=100, seed=1,
                                  train_count=32, eval_count=32)).train()
    assert all((not r.cl_active) and r.kl_active for r in kl_only)


# ---------------------------------------------------------------------------
# criteria 5 and 6: accuracy claims on the image corpus


def test_c5_paired_transformer_beats_independent(benchmark_runs):
    """The transformer branch ends paired training with strictly higher
    top-1 than the same architecture trained alone, separated by more
    than one standard deviation across three seeds, inside the two-hour
    training budget."""
    rows = benchmark_runs["rows"]
    paired = np.array([rows[("vpl", s)][-1].eval_top1_b for s in (0, 1, 2)])
    alone = np.array([rows[("independent", s)][-1].eval_top1_b for s in (0, 1, 2)])
    mp, sp = paired.mean(), paired.std(ddof=1)
    ma, sa = alone.mean(), alone.std(ddof=1)
    assert mp - sp > ma + sa, (
        f"paired {mp:.4f}+-{sp:.4f} does not clear independent {ma:.4f}+-{sa:.4f}"
    )
    assert benchmark_runs["wall_s"] < 7200.0, (
        f"benchmark training took {benchmark_runs['wall_s']:.0f}s"
    )


def test_c6_conv_learns_faster_early(benchmark_runs):
    """Training the branches independently, the conv branch leads the
    transformer on eval top-1 through the first tenth of the epochs in at
    least two of three seeds."""
    rows = benchmark_runs["rows"]
    window = max(1, len(rows[("independent", 0)]) // 10)
    leads = 0
    for s in (0, 1, 2):
        run = rows[("independent", s)]
        if all(r.eval_top1_a > r.eval_top1_b for r in run[:window]):
            leads += 1
    assert leads >= 2, f"conv led in only {leads} of 3 seeds over {window} epochs"


# ---------------------------------------------------------------------------
# criterion 7: mutual learning takes two optimizer steps per batch


def test_c7_mutual_learning_step_accounting():
    """Mutual-learning mode performs exactly two optimizer step events per
    batch against one for paired mode, and pays for it in strictly more
    per-epoch wall time on the same configuration."""
    base = dict(epochs=2, seed=5, train_count=256, eval_count=64,
                batch_size=32, x=0, y=0)
    vpl = Trainer(tiny_config(mode="vpl", **base))
    vpl_rows = vpl.train()
    dml = Trainer(tiny_config(mode="dml", **base))
    dml_rows = dml.train()

    batches = math.ceil(256 / 32) * 2
    assert vpl.step_events == batches
    assert dml.step_events == 2 * batches
    assert dml.opt_a.step_count == batches
    assert dml.opt_b.step_count == batches

    vpl_wall = sum(r.wall_s for r in vpl_rows)
    dml_wall = sum(r.wall_s for r in dml_rows)
    assert dml_wall > vpl_wall, f"dml {dml_wall:.3f}s not above vpl {vpl_wall:.3f}s"


# ---------------------------------------------------------------------------
# criterion 8: determinism and checkpoint resume


def test_c8_deterministic_and_resumable(tmp_path):
    """A fixed seed reproduces the metrics file bitwise apart from wall
    time, and stopping at a checkpoint then resuming yields exactly the
    rows the uninterrupted run would have produced."""
    config = tiny_config(mode="vpl", epochs=4, seed=9, ema=True)

    rows1, _ = run_experiment(config, str(tmp_path / "run1"))
    rows2, _ = run_experiment(config, str(tmp_path / "run2"))
    for a, b in zip(rows1, rows2):
        assert a.values()[:-1] == b.values()[:-1], f"epoch {a.epoch} differs between runs"

    text1 = (tmp_path / "run1" / "metrics.csv").read_text().splitlines()
    text2 = (tmp_path / "run2" / "metrics.csv").read_text().splitlines()
    strip = lambda lines: [",".join(l.split(",")[:-1]) for l in lines if not l.startswith("#")]
    assert strip(text1) == strip(text2)

    _, ckpt = run_experiment(config, str(tmp_path / "partial"), stop_after=2)
    resumed, _ = run_experiment(config, str(tmp_path / "partial"), resume_path=ckpt)
    assert [r.epoch for r in resumed] == [2, 3]
    for got, want in zip(resumed, rows1[2:]):
        assert got.values()[:-1] == want.values()[:-1], (
            f"epoch {got.epoch} after resume differs from the uninterrupted run"
        )


# ---------------------------------------------------------------------------
# criterion 9: untrained accuracy sits at chance


def test_c9_untrained_accuracy_is_chance():
    """An untrained pair scores top-1 of 0.10 and top-5 of 0.50, within
    0.03, on ten thousand evenly labeled examples."""
    spec = DatasetSpec(source="synthetic", classes=10, seed=123,
                       image_size=16, channels=3,
                       train_count=10, eval_count=10000, noise=1.0)
    ds = load_dataset(spec, "eval")
    counts = np.bincount(ds.labels, minlength=10)
    assert np.all(counts == 1000)

    branch_a, branch_b = build_pair(
        conv_spec(classes=10, depth=2, width=16),
        vit_spec(classes=10, depth=1, width=16, heads=2, patch=4),
        channels=3, image_size=16, seed=77,
    )
    for branch in (branch_a, branch_b):
        top1, top5 = evaluate(branch, ds, spec, batch_size=500)
        assert abs(top1 - 0.10) <= 0.03, f"untrained top-1 {top1:.4f}"
        assert abs(top5 - 0.50) <= 0.03, f"untrained top-5 {top5:.4f}"

"""Acceptance criteria, each at its stated tolerance.

Every test records one pass/fail line (see ``acceptance_log``); the lines are
repeated in a summary section at the end of the pytest run.
"""

import math
import time
from collections import OrderedDict

import numpy as np
import pytest
import torch

from acceptance_log import report
from oracles import brute_force_prune, frechet_1d, inception_score_direct
from ticketgan.advaug import AdvConfig, adv_discriminator_loss, adv_generator_loss, augmented_train_step, pgd_feature_perturb
from ticketgan.checkpoint import read_checkpoint, write_checkpoint
from ticketgan.cli import main
from ticketgan.config import parse_config
from ticketgan.dataaug import AugPolicy
from ticketgan.experiments import advaug_trend, overfitting_trend, ticket_trend
from ticketgan.losses import LossSpec, discriminator_loss, generator_loss
from ticketgan.metrics import GaussianStats, frechet_distance, inception_score
from ticketgan.models import ModelSpec, build_gan
from ticketgan.pipeline import prepare, train
from ticketgan.sparsity import MaskPair, PruneConfig, ones_mask, global_magnitude_prune, mask_counts, read_masks, run_imp
from ticketgan.training import TrainConfig, TrainState, train_step

D64 = torch.float64


# -- 1. sparsity schedule ----------------------------------------------------

@pytest.mark.parametrize("rounds,label", [(2, "36.00%"), (9, "86.58%")])
def test_c01_sparsity_schedule(tmp_path, rounds, label):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"prune.rho = 0.2\nprune.rounds = {rounds}\ndata.fraction = 0.1\n")
    start = time.perf_counter()
    code = main(["find-ticket", "--config", str(cfg), "--out", str(tmp_path / "t")])
    seconds = time.perf_counter() - start
    worst, pct = 0.0, []
    for player in ("g", "d"):
        mask, header = read_masks(tmp_path / "t" / f"masks_{player}.tkm")
        remaining, total = mask_counts(mask)
        worst = max(worst, abs(remaining - total * 0.8 ** rounds))
        pct.append(f"{100 * (1 - remaining / total):.2f}%")
    ok = code == 0 and worst <= 1.0 and seconds < 60 and f"{100 * (1 - 0.8 ** rounds):.2f}%" == label
    report(1, ok, f"k={rounds}: sparsity G/D {pct[0]}/{pct[1]} (label {label}), worst drift {worst:.2f} elements, "
                  f"{seconds:.1f}s")
    assert ok


# -- 2. rewind exactness -----------------------------------------------------

def test_c02_rewind_exact_every_round():
    models = build_gan(ModelSpec("mlp_gan_2d"), 0)
    data = torch.randn(200, 2, dtype=D64, generator=torch.Generator().manual_seed(0))
    theta0 = OrderedDict((k, v.clone()) for k, v in models.theta.items())
    phi0 = OrderedDict((k, v.clone()) for k, v in models.phi.items())
    failures, checked = [], []

    def check(r, theta, phi, masks):
        for store, init, mask in ((theta, theta0, masks.g), (phi, phi0, masks.d)):
            for k in store:
                got = store[k].detach()
                keep = mask.get(k)
                if keep is None:
                    same = torch.equal(got, init[k])
                else:
                    same = torch.equal(got[keep], init[k][keep]) and bool(torch.all(got[~keep] == 0))
                if not same:
                    failures.append((r, k))
        checked.append(r)

    run_imp(models, data, PruneConfig(rounds=4, epochs_per_round=2), TrainConfig(batch_size=32), callback=check)
    ok = not failures and checked == [1, 2, 3, 4]
    report(2, ok, f"rounds checked {checked}; mismatches {failures[:3]}")
    assert ok


# -- 3. mask persistence -----------------------------------------------------

def test_c03_masked_zeros_never_shrink():
    cfg = parse_config("data.fraction = 0.1\ntrain.iterations = 2000\nmetrics.samples = 200\n")
    setup = prepare(cfg)
    m = setup.models
    masks = MaskPair(global_magnitude_prune(m.theta, ones_mask(m.theta), 0.36),
                     global_magnitude_prune(m.phi, ones_mask(m.phi), 0.36))
    history, shrunk = [], []

    def zero_set(state):
        out = set()
        for player, store, mask in (("g", state.theta, masks.g), ("d", state.phi, masks.d)):
            for k, keep in mask.items():
                idx = torch.nonzero((~keep) & (store[k].detach() == 0)).tolist()
                out.update((player, k, tuple(i)) for i in idx)
        return out

    expected = sum(int((~v).sum()) for v in list(masks.g.values()) + list(masks.d.values()))

    def on_eval(state, row):
        cur = zero_set(state)
        if history and not history[-1] <= cur:
            shrunk.append(state.iteration)
        history.append(cur)

    result = train(setup, masks=masks, on_eval=on_eval, evaluate_every=100)
    sizes = {len(h) for h in history}
    ok = result.state.iteration == 2000 and len(history) == 20 and not shrunk and sizes == {expected}
    report(3, ok, f"{len(history)} checks over {result.state.iteration} iterations; masked-zero count {sorted(sizes)} "
                  f"of {expected}; shrink events {shrunk}")
    assert ok


# -- 4. pruning oracle -------------------------------------------------------

def test_c04_prune_matches_oracle():
    mismatches = 0
    sizes = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        store, mask = OrderedDict(), OrderedDict()
        budget = int(rng.integers(10, 10_001))
        n_layers = int(rng.integers(1, 5))
        for i in range(n_layers):
            size = max(1, budget // n_layers)
            rows = int(rng.integers(1, max(2, int(math.sqrt(size)) + 1)))
            shape = (rows, max(1, size // rows))
            w = rng.normal(size=shape)
            if seed % 3 == 0:
                w = np.round(w, 1)  # many exact ties
            store[f"layer{i}.weight"] = torch.tensor(w)
            mask[f"layer{i}.weight"] = torch.from_numpy(rng.random(shape) > rng.uniform(0, 0.6))
        sizes.append(sum(v.numel() for v in store.values()))
        if mask_counts(mask)[0] == 0:
            continue
        rho = float(rng.uniform(0.01, 0.99))
        got = global_magnitude_prune(store, mask, rho)
        want = brute_force_prune(store, mask, rho)
        mismatches += sum(got[k].reshape(-1).tolist() != want[k] for k in mask)
    ok = mismatches == 0 and max(sizes) <= 10_000
    report(4, ok, f"100 stores (max {max(sizes)} entries), {mismatches} mismatching tensors")
    assert ok


# -- 5. metric oracles -------------------------------------------------------

def test_c05_metric_oracles():
    g = lambda mu, var: GaussianStats(np.array([mu]), np.array([[var]]), 2)  # noqa: E731
    errs = [abs(frechet_distance(g(0, 1), g(1, 1)) - 1.0), abs(frechet_distance(g(0, 1), g(0, 4)) - 1.0)]
    rng = np.random.default_rng(0)
    for _ in range(200):
        ma, mb = rng.normal(size=2)
        va, vb = rng.uniform(0.01, 10, size=2)
        errs.append(abs(frechet_distance(g(ma, va), g(mb, vb)) - frechet_1d(ma, va, mb, vb)))
    self_fd = []
    for d in (1, 3, 8):
        x = rng.normal(size=(50, d))
        a = GaussianStats(x.mean(0), np.cov(x.T).reshape(d, d), 50)
        self_fd.append(frechet_distance(a, a))
    is_uniform = inception_score(np.full((20, 6), 1 / 6))[0]
    is_onehot = inception_score(np.eye(10)[np.arange(100) % 10])[0]
    is_err = 0.0
    for seed in range(200):
        r = np.random.default_rng(seed)
        n, k = int(r.integers(2, 60)), int(r.integers(2, 12))
        p = r.dirichlet(np.full(k, 0.5), size=n)
        splits = int(r.integers(1, min(n, 6) + 1))
        got, want = inception_score(p, splits), inception_score_direct(p, splits)
        is_err = max(is_err, abs(got[0] - want[0]), abs(got[1] - want[1]))
    ok = (max(errs) <= 1e-9 and max(self_fd) == 0.0 and abs(is_uniform - 1) <= 1e-9 and abs(is_onehot - 10) <= 1e-9
          and is_err <= 1e-10)
    report(5, ok, f"FID 1-D max err {max(errs):.1e}; fd(a,a) max {max(self_fd)}; IS uniform {is_uniform:.12f}, "
                  f"one-hot {is_onehot:.12f}; IS vs direct sum max err {is_err:.1e}")
    assert ok


# -- 6. PGD correctness ------------------------------------------------------

def test_c06_pgd_linear_and_ball():
    rng = np.random.default_rng(0)
    ball_violations = linear_misses = linear_cases = 0
    for i in range(1000):
        steps = int(rng.integers(1, 8))
        alpha = float(rng.choice([0.001, 0.01, 0.05, 0.1]))
        reach = bool(rng.random() < 0.5)
        eps = float(rng.uniform(alpha, steps * alpha)) if reach else float(rng.uniform(alpha, 3 * steps * alpha))
        cfg = AdvConfig(steps=steps, step_size=alpha, eps=eps)
        shape = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(1, 4))))
        h = torch.tensor(rng.normal(size=shape))
        w = torch.tensor(rng.normal(size=shape))
        if i % 2 == 0:
            b = float(rng.normal())
            delta = pgd_feature_perturb(h, lambda x: (w * x).sum() + b, cfg)
            if steps * alpha >= eps:
                linear_cases += 1
                linear_misses += not torch.equal(delta, eps * torch.sign(w))
        else:
            delta = pgd_feature_perturb(h, lambda x: (torch.tanh(w * x) ** 2).sum() + (x ** 3).sum(), cfg)
        ball_violations += bool(delta.abs().max() > eps)
    ok = ball_violations == 0 and linear_misses == 0 and linear_cases > 100
    report(6, ok, f"1000 instances: {ball_violations} outside the eps ball; affine exact-corner misses "
                  f"{linear_misses}/{linear_cases}")
    assert ok


# -- 7. degeneracy equivalences ----------------------------------------------

def test_c07_degenerate_configs():
    spec = ModelSpec("mlp_gan_2d")
    data = torch.randn(200, 2, dtype=D64, generator=torch.Generator().manual_seed(1))
    cfg = TrainConfig(iterations=5, batch_size=32, d_steps_per_g=2)

    def run(step):
        m = build_gan(spec, 3)
        state = TrainState.create(m.theta, m.phi, 3)
        for _ in range(5):
            step(state, m)
        return state

    ref = run(lambda s, m: train_step(s, data, m.gen, m.disc, cfg))
    adv0 = AdvConfig(lambda_g=0.0, lambda_d=0.0, g_split=spec.g_split, d_split=spec.d_split)
    got = run(lambda s, m: augmented_train_step(s, data, m.gen, m.disc, cfg, adv0, policy=AugPolicy.off()))
    bitwise = all(torch.equal(ref.theta[k], got.theta[k]) for k in ref.theta) and \
        all(torch.equal(ref.phi[k], got.phi[k]) for k in ref.phi)

    m = build_gan(spec, 4)
    z = torch.randn(16, spec.latent_dim, dtype=D64)
    x = data[:16]
    n0 = AdvConfig(steps=0, g_split=spec.g_split, d_split=spec.d_split)
    fake = m.gen(m.theta, z)
    same = []
    for ls in (LossSpec("hinge"), LossSpec("non_saturating")):
        same.append(torch.equal(adv_generator_loss(m.gen, m.theta, m.disc, m.phi, z, n0, ls),
                                generator_loss(m.disc(m.phi, fake), ls)))
        same.append(torch.equal(adv_discriminator_loss(m.disc, m.phi, x, fake, n0, ls),
                                discriminator_loss(m.disc(m.phi, x), m.disc(m.phi, fake), ls)))
    ok = bitwise and all(same)
    report(7, ok, f"lambda=0 + identity policy bitwise equal to vanilla: {bitwise}; n=0 losses equal clean: {all(same)}")
    assert ok


# -- 8. gradient checks ------------------------------------------------------

def _rel_err(fn, params):
    leaves = [p.detach().clone().requires_grad_(True) for p in params]
    grads = torch.autograd.grad(fn(*leaves), leaves)
    num, ana = [], []
    h = 1e-6
    with torch.no_grad():
        for i, p in enumerate(leaves):
            base = [q.detach() for q in leaves]
            g = torch.zeros_like(p)
            for j in range(p.numel()):
                e = torch.zeros_like(p)
                e.view(-1)[j] = h
                plus, minus = list(base), list(base)
                plus[i], minus[i] = base[i] + e, base[i] - e
                g.view(-1)[j] = (fn(*plus) - fn(*minus)) / (2 * h)
            num.append(g.reshape(-1))
            ana.append(grads[i].reshape(-1))
    num, ana = torch.cat(num), torch.cat(ana)
    return float((num - ana).norm() / num.norm())


def test_c08_gradient_checks():
    from ticketgan.dataaug import rand_brightness, rand_contrast, rand_cutout, rand_saturation, rand_translation

    gen = torch.Generator().manual_seed(0)
    errs = {}
    real = torch.tensor([0.3, -0.4, 2.5, -2.2], dtype=D64)
    fake = torch.tensor([-0.2, 0.6, 1.7, -3.1], dtype=D64)
    for v in ("hinge", "non_saturating"):
        ls = LossSpec(v)
        errs[f"L_D {v}"] = _rel_err(lambda r, f: discriminator_loss(r, f, ls), [real, fake])
        errs[f"L_G {v}"] = _rel_err(lambda f: generator_loss(f, ls), [fake])
    x = torch.randn(2, 3, 8, 8, dtype=D64, generator=gen)
    w = torch.randn(2, 3, 8, 8, dtype=D64, generator=gen)
    transforms = {
        "brightness": lambda t, g: rand_brightness(t, 0.5, g), "saturation": lambda t, g: rand_saturation(t, 1.0, g),
        "contrast": lambda t, g: rand_contrast(t, 0.5, g), "translation": lambda t, g: rand_translation(t, 0.125, g),
        "cutout": lambda t, g: rand_cutout(t, 0.5, g),
    }
    for name, fn in transforms.items():
        errs[name] = _rel_err(lambda t: (w * torch.sin(fn(t, torch.Generator().manual_seed(3)))).sum(), [x])

    spec = ModelSpec("mlp_gan_2d", width=6, depth=1, latent_dim=3)
    m = build_gan(spec, 2)
    z = torch.randn(8, 3, dtype=D64, generator=gen)
    xr = torch.randn(8, 2, dtype=D64, generator=gen)
    adv = AdvConfig(steps=1, step_size=0.01, g_split=1, d_split=1)
    g1, g2 = m.gen.split_parts(m.theta)
    d1, d2 = m.disc.split_parts(m.phi)
    for v in ("hinge", "non_saturating"):
        ls = LossSpec(v)
        dg = pgd_feature_perturb(g1(z), lambda hh: generator_loss(m.disc(m.phi, g2(hh)), ls), adv)
        names = list(m.theta)

        def g_obj(*theta, ls=ls, dg=dg, names=names):
            a, b = m.gen.split_parts(OrderedDict(zip(names, theta)))
            return generator_loss(m.disc(m.phi, b(a(z) + dg)), ls)

        errs[f"outer G {v}"] = _rel_err(g_obj, [m.theta[k] for k in names])
        fk = m.gen(m.theta, z).detach()
        dr = pgd_feature_perturb(d1(xr), lambda hh: discriminator_loss(d2(hh), d2(d1(fk)), ls), adv)
        df = pgd_feature_perturb(d1(fk), lambda hh: discriminator_loss(d2(d1(xr)), d2(hh), ls), adv)
        dnames = list(m.phi)

        def d_obj(*phi, ls=ls, dr=dr, df=df, dnames=dnames):
            a, b = m.disc.split_parts(OrderedDict(zip(dnames, phi)))
            return discriminator_loss(b(a(xr) + dr), b(a(fk) + df), ls)

        errs[f"outer D {v}"] = _rel_err(d_obj, [m.phi[k] for k in dnames])
    worst = max(errs, key=errs.get)
    ok = all(e < 1e-4 for e in errs.values())
    report(8, ok, f"{len(errs)} checks, worst relative error {errs[worst]:.1e} ({worst})")
    assert ok


# -- 9. overfitting reproduction ---------------------------------------------

def test_c09_overfitting_gap():
    trend = overfitting_trend(seeds=(0, 1, 2), fractions=(0.1, 1.0))
    small, full = trend.runs["fraction=0.1"], trend.runs["fraction=1"]
    fake = trend.median("fraction=0.1", "fake_acc")
    gap_small = trend.median("fraction=0.1", "gap_points")
    gap_full = trend.median("fraction=1", "gap_points")
    bal_small = 100 * np.median([r["d_acc_train"] - r["d_acc_val"] for r in small])
    ok = fake > 0.95 and gap_small > 20 and gap_full <= gap_small - 10 and trend.seconds < 600
    report(9, ok, f"10% data: median fake acc {100 * fake:.1f}%, train-val real-accuracy gap {gap_small:.1f} pts "
                  f"(balanced {bal_small:.1f}); 100% data gap {gap_full:.1f} pts; "
                  f"per-seed gaps {[round(r['gap_points'], 1) for r in small]} / "
                  f"{[round(r['gap_points'], 1) for r in full]}; {trend.seconds:.0f}s")
    assert ok


# -- 10. ticket benefit ------------------------------------------------------

def test_c10_ticket_trend():
    trend = ticket_trend(seeds=(0, 1, 2), rounds=(2, 5))
    dense_fid, dense_modes = trend.median("dense", "fid"), trend.median("dense", "modes_covered")
    parts, ok = [f"dense FID {dense_fid:.4f} modes {dense_modes:g}"], trend.seconds < 900
    for k in (2, 5):
        imp_fid, imp_modes = trend.median(f"imp_k{k}", "fid"), trend.median(f"imp_k{k}", "modes_covered")
        rnd_fid = trend.median(f"random_k{k}", "fid")
        sp = trend.median(f"imp_k{k}", "sparsity_g")
        ok &= imp_fid <= dense_fid and imp_modes >= dense_modes and not rnd_fid < imp_fid
        ok &= abs(sp - (1 - 0.8 ** k)) < 1e-3
        parts.append(f"IMP {100 * sp:.1f}% FID {imp_fid:.4f} modes {imp_modes:g} vs random {rnd_fid:.4f}")
    report(10, bool(ok), "; ".join(parts) + f"; {trend.seconds:.0f}s")
    assert ok


# -- 11. AdvAug benefit ------------------------------------------------------

def test_c11_advaug_trend():
    trend = advaug_trend(seeds=(0, 1, 2), rounds=5)
    base = trend.median("no_advaug", "fid")
    mild = trend.median("pgd1_a0.01", "fid")
    strong = trend.median("pgd5_a0.1", "fid")
    ok = mild <= base and not strong < base
    report(11, ok, f"67.2% ticket, 10% data, median FID: no AdvAug {base:.4f}, PGD-1 a=0.01 {mild:.4f}, "
                   f"PGD-5 a=0.1 {strong:.4f}; per seed {[round(r['fid'], 4) for r in trend.runs['no_advaug']]} / "
                   f"{[round(r['fid'], 4) for r in trend.runs['pgd1_a0.01']]} / "
                   f"{[round(r['fid'], 4) for r in trend.runs['pgd5_a0.1']]}; {trend.seconds:.0f}s")
    assert ok


# -- 12. determinism and resume ----------------------------------------------

@pytest.mark.parametrize("text", [
    "data.fraction = 0.1\ntrain.iterations = 60\ntrain.eval_every = 20\ntrain.checkpoint_every = 30\n"
    "metrics.samples = 200\n",
    "model.arch = conv_gan_32\nmodel.width = 4\ndata.source = toy_shapes\ndata.size = 100\ntrain.batch_size = 8\n"
    "train.iterations = 6\ntrain.eval_every = 4\ntrain.checkpoint_every = 3\nmetrics.samples = 20\n"
    "aug.policy = color,translation,cutout\nadvaug.steps = 2\n",
], ids=["ring_advaug", "conv_diffaug_advaug"])
def test_c12_resume_bitwise(tmp_path, text):
    cfg = parse_config(text)
    full = train(prepare(cfg), tmp_path / "full")
    total = full.total_iterations
    train(prepare(cfg), tmp_path / "part", stop_at=total // 2)
    train(prepare(cfg), tmp_path / "part", resume=tmp_path / "part" / "last.tkgn")
    same_ckpt = (tmp_path / "full" / "last.tkgn").read_bytes() == (tmp_path / "part" / "last.tkgn").read_bytes()
    same_csv = (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
    ck = read_checkpoint(tmp_path / "full" / "last.tkgn", expected_hash=cfg.hash())
    write_checkpoint(tmp_path / "copy.tkgn", ck)
    round_trip = (tmp_path / "copy.tkgn").read_bytes() == (tmp_path / "full" / "last.tkgn").read_bytes()
    ok = same_ckpt and same_csv and round_trip
    report(12, ok, f"{cfg['model.arch']}: {total} iterations, resumed at {total // 2}: checkpoint bytes equal {same_ckpt}, "
                   f"metric CSV equal {same_csv}, write/read/write byte-identical {round_trip}")
    assert ok

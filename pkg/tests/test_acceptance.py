"""Acceptance criteria 1-9, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary. Criteria 4 and 7 take minutes.
"""

import time

import numpy as np
import pytest

import oracles
from conftest import param_dict, randomize, record_criterion
from hgpe import analysis, io, ops
from hgpe.backbone import MICRO, PRESETS, REPORTED_COMPLEXITY, HGpeModel, build_model, preset, random_input
from hgpe.blocks import ASA, CRA, GIG, GPM, GPEBlock, IRB, LSAE, gn_groups
from hgpe.gradcheck import run_suite
from hgpe.tensor import Tensor
from hgpe.train import train_toy

VARIANTS = ("S", "T", "N")


def check(n, passed, detail, elapsed, budget):
    in_time = elapsed < budget
    ok = bool(passed) and in_time
    record_criterion(n, ok, f"{detail}; {elapsed:.1f}s (budget {budget:g}s)")
    assert passed, detail
    assert in_time, f"took {elapsed:.1f}s, budget {budget:g}s"


def test_criterion_1_parameter_counts():
    t0 = time.perf_counter()
    parts, ok = [], True
    for v in VARIANTS:
        t1 = time.perf_counter()
        params = analysis.count_params(HGpeModel(preset(v)), include_head=False)
        ref = REPORTED_COMPLEXITY[v][0]
        dev = params / (ref * 1e6) - 1
        ok &= abs(dev) <= 0.10 and time.perf_counter() - t1 < 5
        parts.append(f"{v} {params / 1e6:.3f}M vs {ref}M ({dev:+.1%})")
    check(1, ok, "backbone params within 10%: " + ", ".join(parts), time.perf_counter() - t0, 15)


def test_criterion_2_flops():
    t0 = time.perf_counter()
    parts, ok = [], True
    for v in VARIANTS:
        row = analysis.reference_comparison(v, (224, 224))
        ok &= abs(row.flops_deviation) <= 0.20
        parts.append(f"{v} {row.flops_g:.3f}G [{row.convention}] vs {row.reference[1]}G "
                     f"({row.flops_deviation:+.1%})")
    check(2, ok, "224x224 flops within 20%: " + ", ".join(parts), time.perf_counter() - t0, 10)


def _oracle_cases(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(2, 8, size=2))
    training = bool(seed % 2)
    out = []
    c, k = int(rng.integers(1, 5)), int(rng.choice([3, 5, 7]))
    m = randomize(GIG(c, k), seed)
    x = rng.standard_normal((n, c, h, w))
    out.append(("gig", m, x, training, lambda x, p: oracles.gig(x, p, k, training)))
    heads = int(rng.choice([1, 2]))
    c = heads * int(rng.integers(1, 4))
    win = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    m = randomize(LSAE(c, win, heads), seed)
    x = rng.standard_normal((n, c, h, w))
    out.append(("lsae", m, x, training, lambda x, p: oracles.lsae(x, p, win, heads, training)))
    c = int(rng.choice([1, 2, 4, 6, 20]))
    m = randomize(ASA(c), seed)
    x = rng.standard_normal((n, c, h, w))
    out.append(("asa", m, x, training, lambda x, p, g=gn_groups(c): oracles.asa(x, p, 3, g)))
    c = int(rng.integers(1, 40))
    m = randomize(CRA(c), seed)
    x = rng.standard_normal((n, c, h, w))
    out.append(("cra", m, x, training, lambda x, p, kk=m.kernel: oracles.cra(x, p, kk)))
    cin = int(rng.integers(1, 4))
    cout = cin if seed % 3 else int(rng.integers(1, 4))
    stride = 2 if seed % 4 == 0 else 1
    m = randomize(IRB(cin, cout, int(rng.integers(1, 4)), stride), seed)
    x = rng.standard_normal((n, cin, h, w))
    out.append(("irb", m, x, training,
                lambda x, p, s=stride, r=m.residual: oracles.irb(x, p, s, r, training)))
    return out


def test_criterion_3_oracle_equivalence():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(25):
        for name, m, x, training, oracle in _oracle_cases(1000 + seed):
            p = param_dict(m)
            m.set_mode(training)
            err = float(np.abs(m(Tensor(x)).data - oracle(x, p)).max())
            worst[name] = max(worst.get(name, 0.0), err)
    ok = all(e < 1e-10 for e in worst.values())
    detail = "25 instances each, max abs err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    check(3, ok, detail, time.perf_counter() - t0, 60)


@pytest.mark.slow
def test_criterion_4_gradient_suite():
    t0 = time.perf_counter()
    reports = run_suite(seeds=range(5))
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    worst = max(reports, key=lambda r: r.max_error)
    detail = (f"{len(reports)} cases x 5 seeds, worst {worst.name} {worst.max_error:.2e}"
              + (f", failing: {', '.join(failed)}" if failed else ""))
    check(4, not failed, detail, time.perf_counter() - t0, 300)


def test_criterion_5_structural_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    bad_windows = 0
    for win in (4, 7, 14):
        for h in range(1, 41):
            for w in range(1, 41):
                x = Tensor(rng.standard_normal((1, 2, h, w)))
                parts, rec = ops.window_partition(x, win, win)
                if ops.window_merge(parts, rec).data.tobytes() != x.data.tobytes():
                    bad_windows += 1
    row_err = 0.0
    for seed in range(30):
        r = np.random.default_rng(seed)
        heads = int(r.choice([1, 2]))
        m = randomize(LSAE(4, int(r.integers(1, 8)), heads), seed)
        m.keep_attention = True
        m(Tensor(r.standard_normal((1, 4, int(r.integers(1, 12)), int(r.integers(1, 12)))) * 5))
        row_err = max(row_err, float(np.abs(m.last_attention.sum(-1) - 1).max()))
    split_ok = True
    for c in (2, 8, 12, 20):
        x = Tensor(rng.standard_normal((2, c, 5, 3)))
        a, b = ops.split_channels(x, [c // 2, c // 2])
        split_ok &= ops.concat_channels([a, b]).data.tobytes() == x.data.tobytes()
    gpe_err = 0.0
    for c, win in ((8, 4), (12, 7), (20, 2)):
        m = GPEBlock(c, win, 2).zero_()
        x = rng.standard_normal((2, c, 9, 11))
        for mode in (True, False):
            m.set_mode(mode)
            gpe_err = max(gpe_err, float(np.abs(m(Tensor(x)).data - x).max()))
    ok = bad_windows == 0 and row_err <= 1e-6 and split_ok and gpe_err <= 1e-10
    detail = (f"window round trips failing {bad_windows}/4800, attention row err {row_err:.1e}, "
              f"split/concat exact {split_ok}, zeroed GPE err {gpe_err:.1e}")
    check(5, ok, detail, time.perf_counter() - t0, 120)


def test_criterion_6_closed_forms():
    t0 = time.perf_counter()
    gpm_params = analysis.gpm_closed_form(64, 7, 14, 14, 7, 64)[0]
    wmhsa_params = analysis.wmhsa_closed_form(64, 196, 49)[0]
    stages = analysis.complexity_report(HGpeModel(preset("S")), (224, 224)).stages
    cheaper = all(s.closed_flops < s.wmhsa_flops for s in stages)
    ratios = [s.ratio for s in stages]
    ok = gpm_params == 19399 and wmhsa_params == 16640 and cheaper and all(0.5 <= r <= 2 for r in ratios)
    detail = (f"gpm params {gpm_params}, wmhsa params {wmhsa_params}, gpm < wmhsa flops at S stages "
              f"{cheaper}, counted/closed GPM ratios {', '.join(f'{r:.2f}' for r in ratios)}")
    check(6, ok, detail, time.perf_counter() - t0, 1)


@pytest.mark.slow
def test_criterion_7_trainability():
    t0 = time.perf_counter()
    result = train_toy(MICRO, steps=300, seed=0)
    elapsed = time.perf_counter() - t0
    ma = result.moving_average(20)
    rises = np.flatnonzero(np.diff(ma) > 0)
    again = train_toy(MICRO, steps=3, seed=0)
    deterministic = again.losses == result.losses[:3]
    ok = result.final_accuracy >= 0.9 and rises.size == 0 and deterministic
    detail = (f"train accuracy {result.final_accuracy:.3f}, final loss {result.losses[-1]:.2e}, "
              f"moving-average rises {rises.size}"
              + (f" (first at step {rises[0] + 20})" if rises.size else "")
              + f", repeat run identical {deterministic}")
    check(7, ok, detail, elapsed, 600)


def test_criterion_8_ablations():
    t0 = time.perf_counter()
    flags = ("use_gig", "use_lsae", "use_asa_cra")
    deltas, ok = [], True
    for cfg in [MICRO] + [PRESETS[v] for v in VARIANTS]:
        full = HGpeModel(cfg).params.num_params()
        for flag in flags:
            ablated = cfg.replace(**{flag: False})
            analysis.shape_trace(HGpeModel(ablated), (64, 64))
            delta = full - HGpeModel(ablated).params.num_params()
            ok &= delta >= 0
            deltas.append(delta)
    for flag in flags:
        cfg = MICRO.replace(**{flag: False})
        out = build_model(cfg, 0).forward(random_input(cfg, 2), "train")
        ok &= bool(np.isfinite(out.data).all())
    full = build_model(MICRO, 3)
    off = HGpeModel(MICRO.replace(use_gig=False))
    src = full.params
    for name, t in off.params.items():
        t.data = src[name].data.copy()
    for _, m in full.modules():
        if isinstance(m, GPM):
            object.__setattr__(m.gig, "forward", lambda x: x)
    x = random_input(MICRO, 2, seed=4)
    identical = all(full.forward(x, mode).data.tobytes() == off.forward(x, mode).data.tobytes()
                    for mode in ("infer", "train"))
    ok &= identical
    detail = (f"{len(deltas)} single-flag ablations valid, min param delta {min(deltas)}, "
              f"GIG-off equals identity GIG bit-exactly {identical}")
    check(8, ok, detail, time.perf_counter() - t0, 60)


def test_criterion_9_serialization(tmp_path):
    t0 = time.perf_counter()
    src = build_model(MICRO, 1)
    src.forward(random_input(MICRO, 4), "train")
    io.save_weights(src, tmp_path / "w.bin")
    dst = HGpeModel(MICRO)
    io.load_weights(dst, tmp_path / "w.bin")
    x = random_input(MICRO, 3, seed=2)
    exact = src.forward(x, "infer").data.tobytes() == dst.forward(x, "infer").data.tobytes()
    lossless = True
    for cfg in [MICRO] + [PRESETS[v] for v in VARIANTS]:
        io.save_config(cfg, tmp_path / "c.json")
        lossless &= io.load_config(tmp_path / "c.json") == cfg
    check(9, exact and lossless, f"logits bit-exact {exact}, config round trip lossless {lossless}",
          time.perf_counter() - t0, 30)

"""Acceptance suite: one test per numbered criterion, each with its runtime budget.

Every test records a one-line PASS/FAIL summary that the conftest hook prints
at the end of the session. Heavy artifacts (baseline detector, co-evolution
runs) are module fixtures whose build time is charged to the criteria that
need them.
"""

from __future__ import annotations

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from arcsim import blue as B
from arcsim import cli
from arcsim import config as C
from arcsim import datasets as DS
from arcsim import federation as F
from arcsim import harness as H
from arcsim import jsma as J
from arcsim import metrics as M
from arcsim import nn
from arcsim import plant as P
from arcsim import provenance as PV
from arcsim import red as R
from arcsim import scenarios as S
from arcsim import shapley as SH
from arcsim.coevolution import AttackBuffer, sample_batch

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(n: int, budget_s: float, charged_s: float = 0.0):
    """Time the body, record one summary line and enforce the runtime budget."""
    info: dict[str, str] = {}
    t0 = time.perf_counter()

    def line(ok: bool, why: str = "") -> str:
        el = time.perf_counter() - t0 + charged_s
        details = "; ".join(f"{k}={v}" for k, v in info.items())
        tail = f" [{why}]" if why else ""
        return f"criterion {n:>2}: {'PASS' if ok else 'FAIL'} ({el:.1f}s of {budget_s:.0f}s) {details}{tail}"

    try:
        yield info
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        ACCEPTANCE_LINES[n] = line(False, msg[:160])
        raise
    elapsed = time.perf_counter() - t0 + charged_s
    ok = elapsed < budget_s
    ACCEPTANCE_LINES[n] = line(ok, "" if ok else "over budget")
    assert ok, f"criterion {n} took {elapsed:.1f}s (budget {budget_s}s)"


def _fmt(x: float) -> str:
    return f"{x:.4g}"


# ---------------------------------------------------------------------------
# Shared fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cfg() -> C.ExperimentConfig:
    return C.ExperimentConfig()


@pytest.fixture(scope="module")
def base(cfg):
    t0 = time.perf_counter()
    corpus = H.build_corpus(cfg)
    d0 = H.train_baseline(cfg, corpus)
    return corpus, d0, time.perf_counter() - t0


@pytest.fixture(scope="module")
def arc(cfg, base, tmp_path_factory):
    """Two ``coevolve`` runs from the same baseline and seed."""
    _, d0, _ = base
    root = tmp_path_factory.mktemp("arc")
    B.save_ensemble(root / "d0.npz", d0)
    times = []
    for name in ("run_a", "run_b"):
        t0 = time.perf_counter()
        rc = cli.main(["coevolve", "--defender", str(root / "d0.npz"), "--out", str(root / name)])
        times.append(time.perf_counter() - t0)
        assert rc == 0, f"coevolve {name} failed"
    return root / "run_a", root / "run_b", times


@pytest.fixture(scope="module")
def defenders(arc):
    a = arc[0]
    n = len([p for p in a.glob("epoch[0-9]*") if p.is_dir()])
    return {
        "d0": B.load_ensemble(a / "d0.npz"),
        "d1": B.load_ensemble(a / "epoch1" / "defender.npz"),
        "final": B.load_ensemble(a / "defender_final.npz"),
        "runs": [M.load_runs(a / f"epoch{k}" / "attack_runs.npz") for k in range(1, n + 1)],
    }


@pytest.fixture(scope="module")
def tuned(base):
    t0 = time.perf_counter()
    ramp = S.tune_ramp(base[1], seed=0)
    return ramp, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1. Physics
# ---------------------------------------------------------------------------


def _bisect_equilibrium(p: P.PlantParams, u, lo=250.0, hi=326.0) -> np.ndarray:
    Tc, Fl, CAf = u

    def g(T):
        k = p.k0 * math.exp(-p.E_over_R / T)
        ca = (Fl / p.V) * CAf / (Fl / p.V + k)
        return (Fl / p.V) * (p.T_f - T) + (-p.dH / p.rho_Cp) * k * ca - p.UA / (p.rho_Cp * p.V) * (T - Tc)

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if g(lo) * g(mid) <= 0 else (mid, hi)
    T = 0.5 * (lo + hi)
    k = p.k0 * math.exp(-p.E_over_R / T)
    return np.array([(Fl / p.V) * CAf / (Fl / p.V + k), T])


def test_c01_physics():
    with criterion(1, 10) as info:
        p = P.PlantParams()
        u = p.nominal_actuators().as_array()
        x0 = np.array([0.5, 340.0])

        def run(h):
            x = x0.copy()
            for _ in range(int(round(1.0 / h))):
                x = P.rk4_array(x, u, p, h)
            return x

        ref = run(0.05 / 1024)
        ratio = np.abs(run(0.05) - ref).max() / np.abs(run(0.025) - ref).max()
        info["halving_ratio"] = _fmt(ratio)
        assert 12.0 <= ratio <= 20.0

        oracle = _bisect_equilibrium(p, u)
        eq = P.find_equilibrium(p)
        d = P.physics_derivatives(P.ProcessState(*eq), p.nominal_actuators(), p)
        info["max_abs_deriv"] = _fmt(max(abs(v) for v in d))
        assert max(abs(v) for v in d) < 1e-6
        np.testing.assert_allclose(eq, oracle, rtol=1e-9)

        q = P.PlantParams(k0=0.0, T_f=300.0, T_c=300.0)
        s0 = P.ProcessState(1.0, 300.0)
        assert P.physics_derivatives(s0, q.nominal_actuators(), q) == (0.0, 0.0)
        s = s0
        for _ in range(200):
            s = P.step_rk4(s, q.nominal_actuators(), q, 0.05)
        assert s == s0


# ---------------------------------------------------------------------------
# 2. Gradients
# ---------------------------------------------------------------------------

N_INSTANCES = 20
TOL = 1e-4


def _net_param_check(net, x, target, rng) -> float:
    params = net.init_params(rng)
    params.data += 0.1 * rng.standard_normal(params.data.size)

    def loss(pv):
        y, tape = net.forward(pv, x)
        lv, dy = nn.mse_loss(y, target)
        return lv.mean(), tape, dy / len(lv)

    _, tape, dy = loss(params)
    grads, _ = nn.backward(tape, params, dy)
    return nn.directional_check(lambda flat: loss(params.like(flat))[0], params.data, grads.data, rng, n_dirs=2)


def test_c02_gradients(base):
    _, d0, _ = base
    with criterion(2, 60) as info:
        rng = np.random.default_rng(2024)
        worst = {}
        errs = []
        for _ in range(N_INSTANCES):
            net = nn.Network([nn.Dense(5, 7), nn.Activation("tanh", 7), nn.Dense(7, 3)])
            errs.append(_net_param_check(net, rng.standard_normal((4, 5)), rng.standard_normal((4, 3)), rng))
        worst["dense"] = max(errs)

        errs = []
        for _ in range(N_INSTANCES):
            net = nn.Network([nn.GRU(3, 4, return_sequences=False), nn.Dense(4, 2)])
            errs.append(_net_param_check(net, rng.standard_normal((2, 8, 3)), rng.standard_normal((2, 2)), rng))
        worst["gru"] = max(errs)

        errs = []
        for _ in range(N_INSTANCES):
            net = nn.Network([nn.LSTM(3, 4), nn.Dense(4, 3)])
            errs.append(_net_param_check(net, rng.standard_normal((2, 8, 3)), rng.standard_normal((2, 8, 3)), rng))
        worst["lstm"] = max(errs)

        errs = []
        for i in range(N_INSTANCES):
            agent = R.RedAgent.create(7, (0.25, 1.0, 0.01), seed=i)
            obs, act, w = rng.normal(size=(4, 7)), rng.normal(size=(4, 3)), rng.normal(size=4)
            mu, tape = agent.pi_net.forward(agent.policy, obs)
            _, dmu, dls = nn.gaussian_log_prob(act, mu, agent.log_std)
            g, _ = nn.backward(tape, agent.policy, w[:, None] * dmu)
            n_pol = len(agent.policy)

            def f(flat, agent=agent, obs=obs, act=act, w=w, n_pol=n_pol):
                lp = nn.gaussian_log_prob(act, agent.pi_net(agent.policy.like(flat[:n_pol]), obs), flat[n_pol:])[0]
                return float(w @ lp)

            x = np.concatenate([agent.policy.data, agent.log_std])
            errs.append(nn.directional_check(f, x, np.concatenate([g.data, (w[:, None] * dls).sum(axis=0)]), rng, n_dirs=2))
        worst["policy_head"] = max(errs)

        # hardening loss: hinges kept active by inflating the member medians
        ens = d0.copy()
        ens.raw_median = ens.raw_median * np.array([4.0, 4.0, 1.0])
        errs = []
        for _ in range(N_INSTANCES):
            X = ens.norm_mean + ens.norm_std * rng.normal(size=(4, ens.cfg.window_len, ens.n_channels))
            X[1] += 2 * ens.norm_std
            batch = B.WindowSet(X, np.array([B.NORMAL, B.ATTACK, B.ATTACK, B.NORMAL]), ["Z_normal"] * 4)
            _, grads = B.hardening_loss(ens, batch)
            for name in ("lstm", "ae"):
                pv = ens.lstm_params if name == "lstm" else ens.ae_params

                def f(flat, pv=pv, batch=batch):
                    old = pv.data.copy()
                    pv.data[:] = flat
                    try:
                        return B.hardening_loss(ens, batch)[0]
                    finally:
                        pv.data[:] = old

                errs.append(nn.directional_check(f, pv.data.copy(), grads[name].data, rng, n_dirs=1))
        worst["hardening_loss"] = max(errs)

        errs = []
        for _ in range(N_INSTANCES):
            X = d0.norm_mean + d0.norm_std * rng.normal(size=(d0.cfg.window_len, d0.n_channels))
            g = J.saliency(d0, X)
            errs.append(
                nn.directional_check(lambda v: B.combined_raw(d0, v.reshape(1, *X.shape))[0][0], X, g, rng, n_dirs=2)
            )
        worst["jsma_saliency"] = max(errs)

        for k, v in worst.items():
            info[k] = f"{v:.1e}"
        bad = [k for k, v in worst.items() if not v <= TOL]
        assert not bad, f"relative error above {TOL} for {bad}"


# ---------------------------------------------------------------------------
# 3. Baseline detector
# ---------------------------------------------------------------------------


def test_c03_baseline_quality(cfg, base):
    corpus, d0, fit_s = base
    with criterion(3, 300, charged_s=fit_s) as info:
        fpr = M.window_fpr(d0, corpus.test)
        rec = H.fault_recall(d0, cfg, corpus.train)
        info["fpr"] = _fmt(fpr)
        info["recall_min"] = _fmt(rec.min())
        assert fpr <= 0.015
        assert np.all(rec >= 0.95), f"per-channel recall {np.round(rec, 3).tolist()}"


# ---------------------------------------------------------------------------
# 4. Red agent
# ---------------------------------------------------------------------------


def _train_red(cfg, d0, seed, w_detect=None):
    env = cfg.env_config()
    if w_detect is not None:
        env = replace(env, reward=replace(env.reward, w_detect=w_detect))
    agent = R.RedAgent.create(R.AttackEnv(env, d0).obs_dim, env.max_delta, replace(cfg.red.ppo), seed=seed)
    return R.train_attacker(agent, d0, cfg.red.cycles, env, seed=seed)


def test_c04_red_agent_learns(cfg, base):
    _, d0, _ = base
    with criterion(4, 900) as info:
        s0 = cfg.seeds.attacker
        improved = 0
        for s in range(s0, s0 + 3):
            res = _train_red(cfg, d0, s)
            improved += res.final_decile_reward > res.first_decile_reward
        info["seeds_improved"] = f"{improved}/3"
        w = cfg.red.env.reward.w_detect
        off = float(np.mean(_train_red(cfg, d0, s0, w_detect=0.0).cycle_score))
        on = float(np.mean(_train_red(cfg, d0, s0, w_detect=10.0 * w).cycle_score))
        info["score_wd0"] = _fmt(off)
        info["score_wd10x"] = _fmt(on)
        assert improved >= 2
        assert on < off


# ---------------------------------------------------------------------------
# 5 and 13. Co-evolution
# ---------------------------------------------------------------------------


def test_c05_coevolution_directional(arc, defenders, base):
    corpus = base[0]
    with criterion(5, 1800, charged_s=arc[2][0]) as info:
        d0, d1, dfin = defenders["d0"], defenders["d1"], defenders["final"]
        gains = []
        for runs in defenders["runs"]:
            gains.append(M.evaluate(dfin, runs + corpus.normal_eval).f1 - M.evaluate(d0, runs + corpus.normal_eval).f1)
        info["f1_gain"] = "/".join(f"{g:+.3f}" for g in gains)
        every = [r for runs in defenders["runs"] for r in runs] + corpus.normal_eval
        full, no_arc = H.ablation_grid(dfin, d0, H.default_rows()[:2], every)
        info["f1_arc"] = _fmt(full.f1)
        info["f1_no_arc"] = _fmt(no_arc.f1)
        first = defenders["runs"][0] + corpus.normal_eval
        f_fin, f_d1 = M.evaluate(dfin, first).f1, M.evaluate(d1, first).f1
        info["forgetting"] = f"{f_fin - f_d1:+.3f}"
        assert len(gains) == 3
        assert full.f1 > no_arc.f1, "(b) ablation ordering"
        assert f_fin >= f_d1 - 0.05, "(c) forgetting bound"
        assert all(g >= 0.1 for g in gains), f"(a) F1 gain per epoch {[round(g, 4) for g in gains]}"


def test_c13_reproducible_reports(arc):
    a, b, times = arc
    with criterion(13, 1800, charged_s=times[1]) as info:
        ra, rb = (a / "epoch_report.csv").read_bytes(), (b / "epoch_report.csv").read_bytes()
        info["epochs"] = str(len(ra.decode().splitlines()) - 1)
        assert ra == rb
        assert len(ra.decode().splitlines()) == 4


# ---------------------------------------------------------------------------
# 6. Replay composition
# ---------------------------------------------------------------------------


def test_c06_replay_composition(base):
    corpus = base[0]
    with criterion(6, 10) as info:
        rng = np.random.default_rng(6)
        L, c = corpus.train.X.shape[1], corpus.train.X.shape[2]
        buf = AttackBuffer(L)
        for epoch in (1, 2):
            X = rng.normal(size=(50, L, c))
            buf.add(B.WindowSet(X, np.full(50, B.ATTACK), np.full(50, "Z_new"), np.zeros(50, int)), [], epoch)
        Zj = B.WindowSet(rng.normal(size=(20, L, c)), np.full(20, B.ATTACK), np.full(20, "Z_JSMA"), np.zeros(20, int))
        counts: dict[str, int] = {}
        for _ in range(1000):
            for o in sample_batch(buf, corpus.train, Zj, (0.5, 0.2, 0.1, 0.2), 64, rng).origins:
                counts[o] = counts.get(o, 0) + 1
        tot = sum(counts.values())
        want = {"Z_normal": 0.5, "Z_new": 0.2, "Z_JSMA": 0.1, "Z_replay": 0.2}
        got = {k: counts.get(k, 0) / tot for k in want}
        info.update({k: f"{v:.3f}" for k, v in got.items()})
        assert all(abs(got[k] - want[k]) <= 0.02 for k in want)


# ---------------------------------------------------------------------------
# 7. JSMA
# ---------------------------------------------------------------------------


def test_c07_jsma_contract(arc, defenders, cfg):
    d0 = defenders["d0"]
    with criterion(7, 120) as info:
        Xs = []
        for f in sorted(arc[0].glob("epoch*/z_new.npz")):
            with np.load(f) as z:
                Xs.append(z["X"])
        X = np.concatenate(Xs)
        detected = np.flatnonzero(B.score_batch(d0, X)[2] > d0.threshold)[:100]
        info["windows"] = str(len(detected))
        assert len(detected) == 100, "fewer than 100 detected attack windows"
        W = B.WindowSet(X[detected], np.full(100, B.ATTACK), np.full(100, "Z_new"), np.zeros(100, int))
        Z, reps = J.perturb_set(d0, W, cfg.jsma_config())
        lo, hi = np.asarray(J.DEFAULT_BOUNDS).T
        l0 = np.count_nonzero((Z.X != W.X).reshape(100, -1), axis=1)
        info["evasion_rate"] = _fmt(np.mean([r.evaded for r in reps]))
        info["max_l0"] = str(int(l0.max()))
        assert np.all(l0 <= 3)
        assert np.all((Z.X >= lo) & (Z.X <= hi))
        after = B.score_batch(d0, Z.X)[2]
        assert np.all(after < np.array([r.score_before for r in reps]))


# ---------------------------------------------------------------------------
# 8. Scenarios
# ---------------------------------------------------------------------------


def _latency(ens, run) -> float:
    lat = M.evaluate_run(ens, run.labeled()).latency_s
    return math.inf if lat == M.MISSED else float(lat)


def test_c08_scenarios(defenders, tuned):
    d0, dfin = defenders["d0"], defenders["final"]
    ramp, tune_s = tuned
    with criterion(8, 300, charged_s=tune_s) as info:
        info["ramp_K"] = _fmt(ramp)
        phase1 = S.expand(S.coolant_priming_valve_trip(ramp, include_trip=False))
        two = S.expand(S.coolant_priming_valve_trip(ramp))
        rep = S.expand(S.default_replay(seed=0))
        lat = {n: (_latency(d0, r), _latency(dfin, r)) for n, r in (("two_stage", two), ("replay", rep))}
        for n, (a, b) in lat.items():
            info[n] = f"D0 {a:g}s vs Dfinal {b:g}s"
        assert not S.raises_alarm(d0, phase1), "priming phase alarms D_0"
        assert all(b < a for a, b in lat.values()), "D_final not strictly faster on both scenarios"
        assert any(math.isinf(a) for a, _ in lat.values()), "D_0 misses neither scenario"


# ---------------------------------------------------------------------------
# 9 and 10. Federation
# ---------------------------------------------------------------------------


def _brute_krum(X: np.ndarray, f: int) -> int:
    n = len(X)
    best, best_i = math.inf, -1
    for i in range(n):
        d = sorted(float(np.sum((X[i] - X[j]) ** 2)) for j in range(n) if j != i)
        s = sum(d[: n - f - 2])
        if s < best:
            best, best_i = s, i
    return best_i


def test_c09_federation_resilience(cfg, base):
    corpus, d0, _ = base
    fc = cfg.federation
    with criterion(9, 30) as info:
        rng = np.random.default_rng(cfg.seeds.federation)
        shards = F.partition_non_iid(corpus.train, 10, fc.skew, rng)
        L = d0.cfg.window_len
        sigma = corpus.train.X.reshape(-1, corpus.train.X.shape[-1]).std(axis=0)
        attacks = DS.fault_windows(1, 99, 5.0 * sigma, window_len=L)
        atk = F.partition_non_iid(attacks, 10, 0.0, rng)
        clients = [F.Client(i, s, a) for i, (s, a) in enumerate(zip(shards, atk))]
        poison = F.PoisonSpec("sign_flip", 100.0, (7, 8, 9))
        _, rep, sent = F.run_round(
            d0, clients, fc.local_steps, poison, F.AggregatorSpec("krum", f=3), rng, lr=fc.lr, batch_size=fc.batch_size
        )
        honest = [u for u in sent if u.client_id not in poison.clients]
        h_mean = np.mean([u.delta for u in honest], axis=0)
        out = F.aggregate(sent, F.AggregatorSpec("krum", f=3))
        assert any(np.array_equal(out, u.delta) for u in honest), "Krum output is not an honest update"
        X = np.stack([u.delta for u in sent])
        assert F.krum_select(sent, 3).client_id == sent[_brute_krum(X, 3)].client_id
        cos = {
            "median": F.cosine(F.aggregate(sent, F.AggregatorSpec("median")), h_mean),
            "trimmed_mean": F.cosine(F.aggregate(sent, F.AggregatorSpec("trimmed_mean", beta=0.3)), h_mean),
            "fedavg": F.cosine(F.aggregate(sent, F.AggregatorSpec()), h_mean),
        }
        info.update({k: f"{v:+.3f}" for k, v in cos.items()})
        info["krum_pick"] = str(rep.selected)
        assert cos["median"] >= 0.9 and cos["trimmed_mean"] >= 0.9
        assert cos["fedavg"] < 0


def test_c10_aggregator_algebra():
    with criterion(10, 10) as info:
        rng = np.random.default_rng(10)
        specs = [F.AggregatorSpec(), F.AggregatorSpec("median"), F.AggregatorSpec("trimmed_mean", beta=0.2), F.AggregatorSpec("krum", f=2)]
        for _ in range(50):
            n, d = int(rng.integers(7, 13)), int(rng.integers(1, 30))
            X = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
            ups = [F.ModelUpdate(i, X[i]) for i in range(n)]
            perm = [ups[i] for i in rng.permutation(n)]
            for sp in specs:
                np.testing.assert_allclose(F.aggregate(perm, sp), F.aggregate(ups, sp), rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(
                F.aggregate(ups, F.AggregatorSpec("trimmed_mean", beta=0.0)), X.mean(axis=0), rtol=1e-12, atol=1e-12
            )
            c = float(rng.uniform(0.01, 100.0))
            scaled = [F.ModelUpdate(i, c * X[i]) for i in range(n)]
            for sp in specs[:3]:
                np.testing.assert_allclose(F.aggregate(scaled, sp), c * F.aggregate(ups, sp), rtol=1e-10, atol=1e-12)
            assert F.krum_select(scaled, 2).client_id == F.krum_select(ups, 2).client_id
        info["instances"] = "50"


# ---------------------------------------------------------------------------
# 11. Shapley
# ---------------------------------------------------------------------------


def test_c11_shapley(defenders, base, tuned):
    corpus = base[0]
    ramp, tune_s = tuned
    with criterion(11, 120, charged_s=tune_s) as info:
        rng = np.random.default_rng(11)
        groups = SH.CHANNEL_GROUPS
        worst = 0.0
        for _ in range(50):
            A = rng.normal(size=(5, 5))
            b = rng.normal(size=5)
            f = lambda X, A=A, b=b: np.tanh(np.einsum("nlc,cd,nld->n", X, A, X) / 50) + np.sin(X @ b).mean(axis=1)
            w, bw = rng.normal(size=(12, 5)), rng.normal(size=(12, 5))
            att = SH.shapley_exact(f, w, groups, bw)
            worst = max(worst, abs(att.values.sum() - (att.explained_score - att.baseline_score)))
        info["efficiency_err"] = f"{worst:.1e}"
        assert worst <= 1e-9

        for _ in range(10):
            coef = rng.normal(size=5)
            f = lambda X, coef=coef: (X.mean(axis=1) * coef).sum(axis=1)
            w, bw = rng.normal(size=(12, 5)), rng.normal(size=(12, 5))
            att = SH.shapley_exact(f, w, groups, bw)
            d = (w - bw).mean(axis=0) * coef
            want = [d[list(ch)].sum() for ch in groups.values()]
            np.testing.assert_allclose(att.values, want, atol=1e-12)

        g3 = {"x": (0, 1), "y": (2,), "z": (3, 4)}
        for _ in range(10):
            A = rng.normal(size=(5, 5))
            f = lambda X, A=A: np.tanh(np.einsum("nlc,cd,nld->n", X, A, X) / 10)
            w, bw = rng.normal(size=(12, 5)), rng.normal(size=(12, 5))
            np.testing.assert_allclose(
                SH.shapley_exact(f, w, g3, bw).values, SH.shapley_permutation(f, w, g3, bw), atol=1e-9
            )

        window = cli.trigger_window(ramp, defenders["d0"].cfg.window_len)
        rep = SH.explain_scenario(defenders["d0"], defenders["final"], window, SH.median_baseline(corpus.cal))
        top = rep.hardened.top(2)
        info["top2_hardened"] = "+".join(top)
        info["top2_d0"] = "+".join(rep.d0.top(2))
        assert set(top) == {"coolant", "feed"}


# ---------------------------------------------------------------------------
# 12. Provenance
# ---------------------------------------------------------------------------


def test_c12_provenance(caplog):
    with criterion(12, 30) as info:
        key = PV.derive_key("puf_sim", "gw-1", 42, registry=["gw-1"])
        pk = key.public_bytes()
        rng = np.random.default_rng(12)
        ledger = PV.HashChainLedger()
        diode = PV.DiodeChannel.create()
        batches = []
        for i in range(1000):
            payload = rng.bytes(int(rng.integers(1, 257)))
            res = PV.seal_batch(payload, key, ledger, diode.sender, i)
            got = PV.SealedBatch.from_bytes(diode.receiver.receive())
            assert res.status is PV.Status.SUCCESS and got == res.batch
            assert PV.verify(got.payload, got.signature, pk)
            batches.append(got)
        records = list(ledger.records)
        assert PV.verify_chain(records, batches, {"gw-1": pk}) == []

        flips = 0
        for b in batches[:4]:
            for field in ("payload", "signature"):
                blob = getattr(b, field)
                for bit in range(len(blob) * 8):
                    bad = bytearray(blob)
                    bad[bit // 8] ^= 1 << (bit % 8)
                    p, s = (bytes(bad), b.signature) if field == "payload" else (b.payload, bytes(bad))
                    assert not PV.verify(p, s, pk)
                    flips += 1
        info["bit_flips"] = str(flips)

        for k in (0, 17, 500, 998):
            tampered = list(batches)
            bb = tampered[k]
            pl = bytearray(bb.payload)
            pl[0] ^= 1
            tampered[k] = PV.SealedBatch(bytes(pl), bb.signature, bb.signer_id, bb.sequence)
            assert {f.sequence for f in PV.verify_chain(records, tampered, {"gw-1": pk})} == {k}
            recs = list(records)
            r = recs[k]
            fake = bytes(32)
            recs[k] = PV.LedgerRecord(k, fake, r.prev_record_hash, PV.LedgerRecord.compute_hash(k, fake, r.prev_record_hash))
            breaks = [f.sequence for f in PV.verify_chain(recs) if f.kind == "chain_break"]
            assert breaks[:1] == [k + 1]

        d = PV.DiodeChannel.create()
        assert not hasattr(d.receiver, "send") and not hasattr(d.sender, "receive")
        with pytest.raises(AttributeError):
            d.receiver.send = lambda blob: None

        def missing():
            raise PV.KeyUnavailable("gone")

        branches = {}
        with caplog.at_level(logging.WARNING, logger="arcsim.provenance"):
            caplog.clear()
            res = PV.seal_batch(b"p", missing, PV.HashChainLedger(), PV.DiodeChannel.create().sender, 0)
            branches["key"] = res.status is PV.Status.FAILURE and any(
                r.levelno == logging.CRITICAL and "key" in r.message for r in caplog.records
            )
            caplog.clear()
            dd = PV.DiodeChannel.create()
            res = PV.seal_batch(b"p", key, PV.UnreachableLedger(), dd.sender, 0)
            branches["ledger"] = (
                res.status is PV.Status.SUCCESS
                and not res.ledger_ok
                and dd.receiver.pending() == 1
                and any(r.levelno == logging.WARNING and "ledger" in r.message for r in caplog.records)
            )
            caplog.clear()
            dd = PV.DiodeChannel.create()
            dd.break_link()
            res = PV.seal_batch(b"p", key, PV.HashChainLedger(), dd.sender, 0)
            branches["diode"] = res.status is PV.Status.FAILURE and any(
                r.levelno == logging.CRITICAL and "diode" in r.message for r in caplog.records
            )
        info["branches"] = ",".join(k for k, v in branches.items() if v)
        assert all(branches.values()), branches

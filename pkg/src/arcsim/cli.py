"""Command-line entry point: ``arcsim <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from arcsim import blue, coevolution, datasets, federation, harness, jsma, metrics, provenance, scenarios, shapley
from arcsim import config as C
from arcsim import plant as P

logger = logging.getLogger("arcsim")


class CliError(RuntimeError):
    pass


def _load_cfg(args) -> C.ExperimentConfig:
    return C.load(args.config)


def _out(args, cfg: C.ExperimentConfig, name: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir) / name


def _defender(path: str | None, cfg: C.ExperimentConfig, corpus: harness.Corpus | None = None) -> blue.DetectorEnsemble:
    if path:
        return blue.load_ensemble(path)
    logger.info("no defender given; training the baseline from the config")
    return harness.train_baseline(cfg, corpus or harness.build_corpus(cfg))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> None:
    cfg = _load_cfg(args)
    out = harness.prepare_run_dir(_out(args, cfg, "simulate"), cfg, args.seed, "simulate")
    if args.scenario:
        sc = scenarios.load(args.scenario)
        run = scenarios.expand(sc, cfg.plant)
        traj = P.Trajectory(run.states, run.actuators, run.sensors, run.attack.astype(int))
    else:
        rng = np.random.default_rng(args.seed)
        traj = P.normal_episode(cfg.plant, args.steps, rng, setpoint_sigma=datasets.NORMAL_SETPOINT_SIGMA)
    P.write_trajectory_csv(out / "trajectory.csv", traj)


def cmd_train_baseline(args) -> None:
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg.seeds.baseline = args.seed
    out = harness.prepare_run_dir(_out(args, cfg, "baseline"), cfg, cfg.seeds.baseline, "train-baseline")
    corpus = harness.build_corpus(cfg)
    D0 = harness.train_baseline(cfg, corpus)
    blue.save_ensemble(out / "d0.npz", D0)
    rec = harness.fault_recall(D0, cfg, corpus.train)
    with open(out / "baseline_report.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "value"])
        wr.writerow(["fpr_test", f"{metrics.window_fpr(D0, corpus.test):.10g}"])
        wr.writerow(["threshold", f"{D0.threshold:.10g}"])
        for ch, r in zip(P.CHANNELS, rec):
            wr.writerow([f"recall_step_bias_{ch}", f"{r:.10g}"])


def cmd_coevolve(args) -> None:
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg.seeds.coevolution = args.seed
    if args.epochs is not None:
        cfg.coevolution.n_epochs = args.epochs
    out = harness.prepare_run_dir(_out(args, cfg, "coevolve"), cfg, cfg.seeds.coevolution, "coevolve")
    corpus = harness.build_corpus(cfg)
    if args.defender:
        shutil.copyfile(args.defender, out / "d0.npz")
        D0 = blue.load_ensemble(args.defender)
    else:
        D0 = harness.train_baseline(cfg, corpus)
        blue.save_ensemble(out / "d0.npz", D0)
    ccfg = cfg.coevolution_config()
    if ccfg.n_epochs == 0:
        shutil.copyfile(out / "d0.npz", out / "defender_final.npz")
        (out / "epoch_report.csv").write_text(",".join(coevolution.REPORT_HEADER) + "\n")
        return
    res = coevolution.run_arc(ccfg, D0, corpus.train, corpus.cal, corpus.normal_eval, corpus.test, out_dir=out)
    (out / "epoch_report.csv").write_text(res.report_csv())
    blue.save_ensemble(out / "defender_final.npz", res.D_final)


def _attack_runs(paths) -> list[metrics.LabeledRun]:
    runs = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("epoch*/attack_runs.npz")) if p.is_dir() else [p]
        if not files:
            raise CliError(f"no attack runs under {p}")
        for f in files:
            runs += metrics.load_runs(f)
    return runs


def cmd_evaluate(args) -> None:
    cfg = _load_cfg(args)
    out = harness.prepare_run_dir(_out(args, cfg, "evaluate"), cfg, cfg.seeds.data, "evaluate")
    D = blue.load_ensemble(args.defender)
    runs = _attack_runs(args.runs)
    if not args.no_normal:
        runs += harness.build_corpus(cfg).normal_eval
    harness.write_eval_csvs(out, metrics.evaluate(D, runs))


def cmd_ablate(args) -> None:
    cfg = _load_cfg(args)
    out = harness.prepare_run_dir(_out(args, cfg, "ablate"), cfg, cfg.seeds.data, "ablate")
    arc = Path(args.arc)
    D_arc = blue.load_ensemble(arc / "defender_final.npz")
    D0 = blue.load_ensemble(arc / "d0.npz")
    runs = _attack_runs([arc]) + harness.build_corpus(cfg).normal_eval
    res = harness.ablation_grid(D_arc, D0, harness.default_rows(), runs)
    harness.write_ablation_csv(out / "ablation.csv", res)


def cmd_jsma(args) -> None:
    cfg = _load_cfg(args)
    out = harness.prepare_run_dir(_out(args, cfg, "jsma"), cfg, cfg.seeds.data, "jsma")
    D = blue.load_ensemble(args.defender)
    with np.load(args.windows) as z:
        W = blue.WindowSet(z["X"], z["labels"], z["origins"], z["epochs"])
    detected = np.flatnonzero(blue.score_batch(D, W.X)[2] > D.threshold)[: args.n or cfg.jsma.n_windows]
    Z, reps = jsma.perturb_set(D, W.take(detected), cfg.jsma_config())
    jsma.write_report(out / "jsma_report.csv", reps)
    ev = float(np.mean([r.evaded for r in reps])) if reps else float("nan")
    logger.info("jsma: %d windows, evasion rate %.4f", len(reps), ev)


def _parse_poison(text: str, n_clients: int, dim: int, rng) -> federation.PoisonSpec | None:
    if text in ("", "none"):
        return None
    parts = text.split(":")
    if len(parts) != 3:
        raise CliError("--poison expects kind:scale:count")
    kind, scale, count = parts[0], float(parts[1]), int(parts[2])
    if not 0 <= count <= n_clients:
        raise CliError("poisoned client count out of range")
    bad = tuple(range(n_clients - count, n_clients))
    direction = None
    if kind == "targeted_drift":
        d = rng.standard_normal(dim)
        direction = tuple(d / np.linalg.norm(d))
    return federation.PoisonSpec(kind, scale, bad, direction)


def cmd_federate(args) -> None:
    cfg = _load_cfg(args)
    fc = cfg.federation
    n = args.clients if args.clients is not None else fc.clients
    rounds = args.rounds if args.rounds is not None else fc.rounds
    skew = args.skew if args.skew is not None else fc.skew
    agg = federation.AggregatorSpec.parse(args.agg or fc.agg)
    seed = cfg.seeds.federation if args.seed is None else args.seed
    out = harness.prepare_run_dir(_out(args, cfg, "federate"), cfg, seed, "federate")
    rng = np.random.default_rng(seed)
    corpus = harness.build_corpus(cfg)
    D = _defender(args.defender, cfg, corpus)
    poison = _parse_poison(args.poison if args.poison is not None else fc.poison, n, len(D.differentiable_params()), rng)
    sigma = corpus.train.X.reshape(-1, corpus.train.X.shape[-1]).std(axis=0)
    attacks = datasets.fault_windows(2, seed + 3, 5.0 * sigma, window_len=cfg.blue.window_len, params=cfg.plant)
    shards = federation.partition_non_iid(corpus.train, n, skew, rng)
    atk = federation.partition_non_iid(attacks, n, 0.0, rng)
    clients = [federation.Client(i, s, a) for i, (s, a) in enumerate(zip(shards, atk))]
    eval_runs = harness.fault_runs(cfg, sigma, 2, seed + 4) + corpus.normal_eval
    reports = []
    for r in range(1, rounds + 1):
        D, rep, _ = federation.run_round(
            D, clients, fc.local_steps, poison, agg, rng, lr=fc.lr, batch_size=fc.batch_size, round_index=r,
            Z_cal=corpus.cal, eval_normal=corpus.test, eval_runs=eval_runs,
        )
        reports.append(rep)
        logger.info("round %d: cosine to honest %.4f, fpr %.4f", r, rep.cosine_to_honest, rep.global_fpr)
    federation.write_round_csv(out / "rounds.csv", reports)
    blue.save_ensemble(out / "defender_global.npz", D)


def _key(cfg: C.ExperimentConfig) -> provenance.KeyPair:
    pc = cfg.provenance
    reg = provenance.HsmSim(pc.master_seed) if pc.key_source == "hsm_sim" else [pc.device_id]
    if pc.key_source == "hsm_sim":
        reg.register(pc.device_id)
    return provenance.derive_key(pc.key_source, pc.device_id, pc.master_seed, registry=reg)


def cmd_seal(args) -> None:
    cfg = _load_cfg(args)
    out = harness.prepare_run_dir(_out(args, cfg, "seal"), cfg, cfg.provenance.master_seed, "seal")
    data = Path(args.input).read_bytes().splitlines(keepends=True)
    size = args.batch_lines or cfg.provenance.batch_size
    key = _key(cfg)
    ledger = provenance.HashChainLedger(out / "ledger.txt")
    diode = provenance.DiodeChannel.create()
    bdir = out / "batches"
    bdir.mkdir(exist_ok=True)
    start = len(ledger)
    failures = 0
    with open(out / "seal_report.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["sequence", "status", "ledger_ok"])
        for i in range(0, max(len(data), 1), size):
            seq = start + i // size
            res = provenance.seal_batch(b"".join(data[i : i + size]), key, ledger, diode.sender, seq)
            wr.writerow([seq, res.status.name, int(res.ledger_ok)])
            failures += res.status is not provenance.Status.SUCCESS
            blob = diode.receiver.receive()
            if blob is not None:
                (bdir / f"{seq:08d}.asb").write_bytes(blob)
    (out / "keys.csv").write_text(f"device_id,public_key_hex\n{key.device_id},{key.public_bytes().hex()}\n")
    if failures:
        raise CliError(f"{failures} batch(es) failed to seal")


def cmd_verify_ledger(args) -> None:
    cfg = _load_cfg(args)
    out = harness.prepare_run_dir(_out(args, cfg, "verify"), cfg, 0, "verify-ledger")
    records = provenance.read_ledger(args.ledger)
    batches = []
    if args.batches:
        batches = [provenance.SealedBatch.from_bytes(p.read_bytes()) for p in sorted(Path(args.batches).glob("*.asb"))]
    keys = {}
    if args.keys:
        with open(args.keys, newline="") as fh:
            for row in csv.DictReader(fh):
                keys[row["device_id"]] = bytes.fromhex(row["public_key_hex"])
    found = provenance.verify_chain(records, batches, keys)
    with open(out / "findings.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["kind", "sequence", "detail"])
        for f in found:
            wr.writerow([f.kind, f.sequence, f.detail])
    if found:
        raise CliError(f"{len(found)} integrity finding(s); first at sequence {found[0].sequence} ({found[0].kind})")


def cmd_explain(args) -> None:
    cfg = _load_cfg(args)
    out = harness.prepare_run_dir(_out(args, cfg, "explain"), cfg, cfg.seeds.data, "explain")
    corpus = harness.build_corpus(cfg)
    D0 = blue.load_ensemble(args.d0)
    Dh = blue.load_ensemble(args.hardened)
    ramp = args.ramp if args.ramp is not None else scenarios.tune_ramp(D0, seed=args.seed)
    w = trigger_window(ramp, D0.cfg.window_len, seed=args.seed, params=cfg.plant)
    rep = shapley.explain_scenario(D0, Dh, w, shapley.median_baseline(corpus.cal))
    shapley.write_explain_csv(out / "explain.csv", rep)


def trigger_window(ramp: float, window_len: int, seed: int = 0, params=None) -> np.ndarray:
    """The first full window after the feed-side trip of the two-stage scenario."""
    run = scenarios.expand(scenarios.coolant_priming_valve_trip(ramp, seed=seed), params)
    t2 = scenarios.LEAD_IN + scenarios.priming_steps()
    end = min(t2 + window_len, len(run.sensors))
    return run.sensors[end - window_len : end]


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="arcsim", description="Adversarial co-evolution testbed for a simulated reactor.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment YAML (defaults when omitted)")
        p.add_argument("--out", help="output directory")
        p.set_defaults(fn=fn)
        return p

    p = add("simulate", cmd_simulate, "simulate normal operation or a scenario file")
    p.add_argument("--steps", type=int, default=240)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario")

    p = add("train-baseline", cmd_train_baseline, "fit the baseline detector ensemble")
    p.add_argument("--seed", type=int)

    p = add("coevolve", cmd_coevolve, "run attacker/defender co-evolution")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--defender", help="baseline ensemble (.npz); trained when omitted")

    p = add("evaluate", cmd_evaluate, "F1, latency and ROC of a defender")
    p.add_argument("--defender", required=True)
    p.add_argument("--runs", nargs="+", required=True, help="attack_runs.npz files or coevolve directories")
    p.add_argument("--no-normal", action="store_true", help="skip the generated normal runs")

    p = add("ablate", cmd_ablate, "ablation grid over a coevolve output directory")
    p.add_argument("--arc", required=True)

    p = add("jsma", cmd_jsma, "saliency-guided perturbation of detected windows")
    p.add_argument("--defender", required=True)
    p.add_argument("--windows", required=True, help="z_new.npz")
    p.add_argument("-n", type=int)

    p = add("federate", cmd_federate, "federated hardening with poisoned clients")
    p.add_argument("--clients", type=int)
    p.add_argument("--poison", help="kind:scale:count or none")
    p.add_argument("--agg", help="fedavg | median | trimmed_mean:beta | krum:f")
    p.add_argument("--rounds", type=int)
    p.add_argument("--skew", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--defender")

    p = add("seal", cmd_seal, "sign, anchor and publish a data file in batches")
    p.add_argument("--input", required=True)
    p.add_argument("--batch-lines", type=int)

    p = add("verify-ledger", cmd_verify_ledger, "check a ledger and its sealed batches")
    p.add_argument("--ledger", required=True)
    p.add_argument("--batches")
    p.add_argument("--keys")

    p = add("explain", cmd_explain, "Shapley attribution of the two-stage scenario")
    p.add_argument("--d0", required=True)
    p.add_argument("--hardened", required=True)
    p.add_argument("--ramp", type=float)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except Exception as exc:  # reported as one parsable line
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: train-clean, embed, population, verify, attack, experiment,
security.  Every command takes --config (JSON; defaults apply when
omitted), most take --out.  --seed overrides the config root seed,
--json mirrors the human-readable output as JSON.  Exit codes: 0 success,
1 usage/config error, 2 numeric failure, 3 verification precondition.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, attacks, persist, security
from .backend import backend_name
from .config import ExperimentConfig, default_config, load_config
from .errors import ConfigError, NumericError, VerificationError
from .experiment import run_experiment
from .verify import (acc_on, acc_w, build_clean_population, load_population,
                     ood_trigger_acc, quantile_threshold, verify)
from .watermark import embed_iwe, embed_ood_baseline, train_clean


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _emit(args, human: str, payload: dict):
    print(json.dumps(payload, sort_keys=True) if args.json else human)


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig(default_config())
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _materialize(cfg: ExperimentConfig):
    data = cfg.make_dataset()
    return data, cfg.make_trigger(data), cfg.make_key()


def cmd_train_clean(args) -> int:
    cfg = _load_cfg(args)
    data, trigger, key = _materialize(cfg)
    res = train_clean(data, cfg.embed, cfg.stream("clean", 0))
    out = Path(args.out)
    persist.save_model(out / "clean", res.model,
                       {"seed": cfg.stream("clean", 0), "scheme": "clean",
                        "config_hash": cfg.hash()})
    if args.export_csv:
        persist.dataset_to_csv(data, out / "dataset.csv")
    a = acc_on(res.model, data)
    aw = acc_w(res.model, trigger, key, cfg.embed.exclude_top_k)
    _emit(args, f"clean model: acc={a:.4f} acc_w={aw:.4f} -> {out / 'clean'}",
          {"acc": a, "acc_w": aw, "model": str(out / "clean")})
    return 0


def cmd_embed(args) -> int:
    cfg = _load_cfg(args)
    data, trigger, key = _materialize(cfg)
    out = Path(args.out)
    if args.method == "iwe":
        res = embed_iwe(data, trigger, key, cfg.embed, cfg.stream("iwe", 0))
        stat = acc_w(res.model, trigger, key, cfg.embed.exclude_top_k)
        persist.save_trigger(out / "trigger", trigger)
        persist.save_key(out / "key.json", key)
    else:
        ood = cfg.make_ood_trigger()
        res = embed_ood_baseline(data, ood, cfg.doc["ood"]["delta"],
                                 cfg.embed, cfg.stream("oodmodel", 0))
        stat = ood_trigger_acc(res.model, ood)
        persist.save_ood_trigger(out / "ood_trigger", ood)
    name = args.method
    persist.save_model(out / name, res.model,
                       {"scheme": name, "config_hash": cfg.hash()})
    persist.write_csv(out / f"{name}_curve.csv",
                      ["epoch", "loss_main", "loss_wm", "acc", "acc_w"],
                      res.curve)
    a = acc_on(res.model, data)
    _emit(args, f"{name} model: acc={a:.4f} trigger_stat={stat:.4f} -> {out / name}",
          {"acc": a, "trigger_stat": stat, "model": str(out / name),
           "curve": str(out / f"{name}_curve.csv")})
    return 0


def cmd_population(args) -> int:
    cfg = _load_cfg(args)
    data, trigger, key = _materialize(cfg)
    ood = cfg.make_ood_trigger()
    n = cfg.doc["population"]["n_models"]
    seeds = [cfg.stream("clean", i) for i in range(n)]
    pop = build_clean_population(data, cfg.embed, trigger, key, seeds, ood=ood,
                                 cache_dir=Path(args.out), jobs=args.jobs)
    pop_dir = Path(args.out) / pop.config_hash[:16]
    _emit(args,
          f"population of {len(pop)} clean models at {pop_dir}\n"
          f"  acc  mean={pop.acc_samples.mean():.4f} std={pop.acc_samples.std():.4f}\n"
          f"  accw mean={pop.accw_samples.mean():.4f} std={pop.accw_samples.std():.4f}",
          {"dir": str(pop_dir), "n": len(pop),
           "acc_mean": float(pop.acc_samples.mean()),
           "accw_mean": float(pop.accw_samples.mean()),
           "config_hash": pop.config_hash})
    return 0


def cmd_verify(args) -> int:
    model, _ = persist.load_model(args.model)
    trigger = persist.load_trigger(args.trigger)
    key = persist.load_key(args.key)
    pop = load_population(args.population)
    if pop.config is None:
        raise VerificationError("population manifest lacks its config document")
    want = pop.config.get("trigger_hash")
    got = persist.array_hash(trigger.inputs, trigger.wm_labels)
    if want != got:
        raise VerificationError("trigger does not match the population's trigger")
    if list(key.indices) != list(pop.config.get("key", [])):
        raise VerificationError("partition key does not match the population's key")
    report = verify(model, trigger, key, pop.config["k"], pop, args.alpha)
    print(report.to_json())
    return 0


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    data, trigger, key = _materialize(cfg)
    k = cfg.embed.exclude_top_k
    victim, _ = persist.load_model(args.model)
    pop = load_population(args.population) if args.population else None
    acfg = cfg.doc["attacks"]
    seed = cfg.stream("attack", args.kind, "cli")
    out = Path(args.out)
    import time as _time
    t0 = _time.perf_counter()
    attacked = None
    if args.kind == "ft":
        a = acfg["ft"]
        ac = attacks.AttackConfig(kind="ft", ft_lr0=a["lr0"], ft_decay=a["decay"],
                                  ft_epochs=a["epochs"])
        attacked = attacks.attack_ft(victim, data, ac, seed)
        conf = a
    elif args.kind == "fp":
        a = acfg["fp"]
        ac = attacks.AttackConfig(kind="fp", prune_fraction=a["fraction"],
                                  prune_ft_lr=a["ft_lr"], prune_ft_epochs=a["ft_epochs"])
        attacked = attacks.attack_prune(victim, data, ac, seed)
        conf = a
    elif args.kind == "kd":
        a = acfg["kd"]
        ac = attacks.AttackConfig(kind="kd", tau=a["tau"], lam=a["lam"],
                                  kd_epochs=a["epochs"], kd_lr=a["lr"])
        attacked = attacks.attack_kd(victim, data, victim.arch, ac, seed).model
        conf = a
    elif args.kind == "replace":
        attacked = attacks.LogitReplacementModel(victim, k, "gaussian", seed)
        conf = {"source": "gaussian"}
    else:  # noise
        a = acfg["noise"]
        sigma = a["sigmas"][0]
        ac = attacks.AttackConfig(kind="noise", noise_sigma=sigma, noise_kind=a["kind"])
        threshold = None
        if pop is not None:
            threshold = quantile_threshold(pop.accw_samples, cfg.alpha)
        summ = attacks.attack_noise_logits(victim, trigger, key, k, ac,
                                           a["trials"], seed, threshold)
        payload = summ.to_dict()
        payload["sigma"] = sigma
        out.mkdir(parents=True, exist_ok=True)
        (out / "attack_noise.json").write_text(json.dumps(payload, sort_keys=True))
        _emit(args, f"noise attack: mean acc_w {summ.mean_accw:.4f} "
                    f"(baseline {summ.baseline_accw:.4f})", payload)
        return 0
    rep = attacks.evaluate_attack(args.kind, conf, victim, attacked, data,
                                  trigger, key, k, pop, cfg.alpha,
                                  _time.perf_counter() - t0)
    if isinstance(attacked, attacks.LogitReplacementModel):
        note = "tampered wrapper, no weights artifact"
    else:
        persist.save_model(out / f"attacked_{args.kind}", attacked,
                           {"scheme": f"attacked_{args.kind}", "victim": str(args.model)})
        note = str(out / f"attacked_{args.kind}")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"attack_{args.kind}.json").write_text(json.dumps(rep.to_dict(),
                                                             sort_keys=True))
    _emit(args,
          f"{args.kind} attack: delta_acc={rep.delta_acc:+.4f} "
          f"acc_w={rep.post_accw:.4f} verdict={rep.post_verdict} ({note})",
          rep.to_dict())
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_cfg(args)
    echo = None if args.json else print
    manifest = run_experiment(cfg, args.out, jobs=args.jobs, echo=echo)
    payload = {"out": str(args.out), "config_hash": manifest["config_hash"],
               "stages": {k: v["status"] for k, v in manifest["stages"].items()}}
    _emit(args, f"experiment complete -> {args.out} "
                f"(config {manifest['config_hash'][:12]})", payload)
    return 0


def cmd_security(args) -> int:
    if args.calc == "odds":
        odds = security.guessing_odds(args.K, args.K_prime, args.n_aug)
        human = ("forgery odds\n"
                 f"  P1 (trigger guess)  = {odds.p1_exact} = {odds.p1:.3e}\n"
                 f"  P2 (key guess)      = {odds.p2_exact} = {odds.p2:.3e}\n"
                 f"  P_success = P1 * P2 = {odds.p_success:.3e}")
        _emit(args, human, odds.to_dict())
    else:
        Ks = [int(x) for x in args.K_list.split(",")]
        rows = security.noise_cancellation_curve(Ks, args.sigma, args.trials,
                                                 kind=args.kind, seed=args.seed or 0)
        lines = ["K sigma predicted empirical stderr"]
        for r in rows:
            lines.append(f"{r.K} {r.sigma} {r.predicted_var:.6f} "
                         f"{r.empirical_var:.6f} {r.std_error:.6f}")
        _emit(args, "\n".join(lines), {"rows": [r.to_dict() for r in rows]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iwelab",
                description="watermark embedding, verification, and attacks "
                            "for small dense classifiers")
    p.add_argument("--version", action="version",
                   version=f"iwelab {__version__} (kernels: {backend_name()})")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="experiment config JSON (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the config root seed")
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("train-clean", help="train and persist one clean model")
    common(sp)
    sp.add_argument("--export-csv", action="store_true",
                    help="also dump the dataset splits as CSV")
    sp.set_defaults(func=cmd_train_clean)

    sp = sub.add_parser("embed", help="train one watermarked model")
    common(sp)
    sp.add_argument("--method", choices=("iwe", "ood"), default="iwe")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("population", help="train/cache the clean-model population")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_population)

    sp = sub.add_parser("verify", help="hypothesis-test ownership verification")
    sp.add_argument("--model", required=True)
    sp.add_argument("--trigger", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--population", required=True,
                    help="population directory (with manifest.json)")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("attack", help="run one erasure/adaptive attack")
    common(sp)
    sp.add_argument("--model", required=True, help="victim model artifact")
    sp.add_argument("--kind", choices=attacks.ATTACK_KINDS, required=True)
    sp.add_argument("--population", help="population dir for verdicts")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("experiment", help="full cached pipeline")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("security", help="closed-form security calculators")
    ssub = sp.add_subparsers(dest="calc", required=True)
    so = ssub.add_parser("odds")
    so.add_argument("--K", type=int, required=True)
    so.add_argument("--K-prime", dest="K_prime", type=int, required=True)
    so.add_argument("--n-aug", dest="n_aug", type=int, required=True)
    so.add_argument("--json", action="store_true")
    so.set_defaults(func=cmd_security, calc="odds")
    sn = ssub.add_parser("noise-curve")
    sn.add_argument("--K-list", default="4,10,20")
    sn.add_argument("--sigma", type=float, default=1.0)
    sn.add_argument("--trials", type=int, default=10000)
    sn.add_argument("--kind", choices=("gaussian", "uniform"), default="gaussian")
    sn.add_argument("--seed", type=int)
    sn.add_argument("--json", action="store_true")
    sn.set_defaults(func=cmd_security, calc="noise-curve")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except VerificationError as exc:
        print(f"verification precondition failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Full-pipeline orchestration with cached, resumable stages.

Stage order: data -> population -> watermarked -> attacks -> security.
Each stage records its status and artifact paths in ``manifest.json``.
Re-running with an unchanged config skips everything (byte-identical
no-op); a partially failed run resumes at the first incomplete stage.
Parallelism (``jobs``) covers population seeds and watermarked-model
training; results merge in seed order so outputs do not depend on
completion order.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, attacks, persist, security
from .backend import backend_name
from .config import ExperimentConfig
from .errors import ConfigError
from .verify import (acc_on, acc_w, build_clean_population, load_population,
                     ood_trigger_acc, quantile_threshold, verify,
                     verify_ood_population)
from .watermark import embed_iwe, embed_ood_baseline

STAGES = ("data", "population", "watermarked", "attacks", "security")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


class Experiment:
    def __init__(self, cfg: ExperimentConfig, out_dir, jobs: int = 1, echo=None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.jobs = max(1, int(jobs))
        self.echo = echo or (lambda msg: None)
        self.chash = cfg.hash()
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()
        # in-memory artifacts shared across stages
        self.data = None
        self.trigger = None
        self.key = None
        self.ood = None
        self.population = None
        self.iwe_models = []
        self.ood_models = []

    # ---- manifest handling ------------------------------------------------

    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            manifest = json.loads(self.manifest_path.read_text())
            if manifest.get("config_hash") != self.chash:
                raise ConfigError(
                    f"{self.out} holds results for a different config "
                    f"({manifest.get('config_hash', '?')[:12]}... vs "
                    f"{self.chash[:12]}...); use a fresh --out directory")
            return manifest
        return {"config_hash": self.chash, "tool_version": __version__,
                "backend": backend_name(), "created_at": _now(),
                "stages": {name: {"status": "pending"} for name in STAGES}}

    def _stage_done(self, name: str) -> bool:
        st = self.manifest["stages"].get(name, {})
        if st.get("status") != "done":
            return False
        return all((self.out / p).exists() for p in st.get("artifacts", []))

    def _finish_stage(self, name: str, artifacts: list, started: str):
        self.manifest["stages"][name] = {
            "status": "done", "artifacts": sorted(artifacts),
            "started_at": started, "finished_at": _now()}
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1,
                                                 sort_keys=True))

    # ---- stages -----------------------------------------------------------

    def run(self) -> dict:
        if all(self._stage_done(s) for s in STAGES):
            self.echo(f"cache hit for config {self.chash[:12]}, nothing to do")
            return self.manifest
        for name in STAGES:
            self._materialize_for(name)
            if self._stage_done(name):
                self.echo(f"stage {name}: cached")
                continue
            started = _now()
            self.echo(f"stage {name}: running")
            artifacts = getattr(self, f"_stage_{name}")()
            self._finish_stage(name, artifacts, started)
        return self.manifest

    def _materialize_for(self, stage: str):
        """Rebuild in-memory inputs a stage needs, loading cached artifacts."""
        if self.data is None:
            self.data = self.cfg.make_dataset()
            self.trigger = self.cfg.make_trigger(self.data)
            self.key = self.cfg.make_key()
            self.ood = self.cfg.make_ood_trigger()
        if stage in ("watermarked", "attacks") and self.population is None \
                and self._stage_done("population"):
            pop_rel = self.manifest["stages"]["population"]["pop_dir"]
            self.population = load_population(self.out / pop_rel)
        if stage == "attacks" and not self.iwe_models and self._stage_done("watermarked"):
            n = self.cfg.doc["watermarked"]["n_models"]
            self.iwe_models = [persist.load_model(self.out / "models" / f"iwe_{i:02d}")[0]
                               for i in range(n)]
            self.ood_models = [persist.load_model(self.out / "models" / f"ood_{i:02d}")[0]
                               for i in range(n)]

    def _stage_data(self) -> list:
        art = self.out / "artifacts"
        persist.save_dataset(art / "dataset", self.data)
        persist.save_trigger(art / "trigger", self.trigger)
        persist.save_key(art / "key.json", self.key)
        persist.save_ood_trigger(art / "ood_trigger", self.ood)
        return ["artifacts/dataset.json", "artifacts/dataset.bin",
                "artifacts/trigger.json", "artifacts/trigger.bin",
                "artifacts/key.json",
                "artifacts/ood_trigger.json", "artifacts/ood_trigger.bin"]

    def _stage_population(self):
        n = self.cfg.doc["population"]["n_models"]
        seeds = [self.cfg.stream("clean", i) for i in range(n)]
        pop = build_clean_population(self.data, self.cfg.embed, self.trigger,
                                     self.key, seeds, ood=self.ood,
                                     cache_dir=self.out / "populations",
                                     jobs=self.jobs)
        self.population = pop
        pop_rel = f"populations/{pop.config_hash[:16]}"
        st = self.manifest["stages"]["population"]
        st["pop_dir"] = pop_rel
        return [f"{pop_rel}/manifest.json"]

    def _stage_watermarked(self) -> list:
        n = self.cfg.doc["watermarked"]["n_models"]
        iwe_seeds = [self.cfg.stream("iwe", i) for i in range(n)]
        ood_seeds = [self.cfg.stream("oodmodel", i) for i in range(n)]
        delta_ood = self.cfg.doc["ood"]["delta"]
        jobs_args = [("iwe", self.data, self.trigger, self.key, self.cfg.embed,
                      None, None, s) for s in iwe_seeds]
        jobs_args += [("ood", self.data, None, None, self.cfg.embed,
                       self.ood, delta_ood, s) for s in ood_seeds]
        if self.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                models = list(pool.map(_train_watermarked_job, jobs_args))
        else:
            models = [_train_watermarked_job(a) for a in jobs_args]
        self.iwe_models = models[:n]
        self.ood_models = models[n:]

        artifacts = []
        rows = []
        k = self.cfg.embed.exclude_top_k
        for scheme, seeds, mods in (("iwe", iwe_seeds, self.iwe_models),
                                    ("ood", ood_seeds, self.ood_models)):
            for i, (seed, model) in enumerate(zip(seeds, mods)):
                name = f"models/{scheme}_{i:02d}"
                persist.save_model(self.out / name, model,
                                   {"seed": seed, "scheme": scheme,
                                    "config_hash": self.chash})
                artifacts += [name + ".json", name + ".bin"]
                stat = acc_w(model, self.trigger, self.key, k) if scheme == "iwe" \
                    else ood_trigger_acc(model, self.ood)
                rows.append({"scheme": scheme, "index": i, "seed": seed,
                             "acc": acc_on(model, self.data), "acc_w": stat})
        persist.write_csv(self.out / "fidelity.csv",
                          ["scheme", "index", "seed", "acc", "acc_w"], rows)
        return artifacts + ["fidelity.csv"]

    def _stage_attacks(self) -> list:
        cfg, data, trig, key = self.cfg, self.data, self.trigger, self.key
        k = cfg.embed.exclude_top_k
        alpha = cfg.alpha
        pop = self.population
        acfg = cfg.doc["attacks"]
        reports = []
        artifacts = []

        def report(kind, conf, victim, attacked, idx, t0):
            rep = attacks.evaluate_attack(kind, conf, victim, attacked, data,
                                          trig, key, k, pop, alpha,
                                          time.perf_counter() - t0)
            row = rep.to_dict()
            row["victim"] = idx
            reports.append(row)
            return rep

        # default FT, FP, KD (one row each in robustness.csv)
        summary_rows = []
        for kind in ("ft", "fp", "kd", "replace"):
            reps = []
            for i, victim in enumerate(self.iwe_models):
                seed = cfg.stream("attack", kind, i)
                t0 = time.perf_counter()
                if kind == "ft":
                    a = acfg["ft"]
                    ac = attacks.AttackConfig(kind="ft", ft_lr0=a["lr0"],
                                              ft_decay=a["decay"], ft_epochs=a["epochs"])
                    attacked = attacks.attack_ft(victim, data, ac, seed)
                    conf = a
                elif kind == "fp":
                    a = acfg["fp"]
                    ac = attacks.AttackConfig(kind="fp", prune_fraction=a["fraction"],
                                              prune_ft_lr=a["ft_lr"],
                                              prune_ft_epochs=a["ft_epochs"])
                    attacked = attacks.attack_prune(victim, data, ac, seed)
                    conf = a
                elif kind == "kd":
                    a = acfg["kd"]
                    ac = attacks.AttackConfig(kind="kd", tau=a["tau"], lam=a["lam"],
                                              kd_epochs=a["epochs"], kd_lr=a["lr"])
                    attacked = attacks.attack_kd(victim, data, victim.arch, ac, seed).model
                    conf = a
                else:
                    attacked = attacks.LogitReplacementModel(victim, k, "gaussian", seed)
                    conf = {"source": "gaussian"}
                reps.append(report(kind, conf, victim, attacked, i, t0))
            summary_rows.append({
                "attack": kind,
                "delta_acc_mean": float(np.mean([r.delta_acc for r in reps])),
                "acc_w_mean": float(np.mean([r.post_accw for r in reps])),
                "tpr": float(np.mean([r.post_verdict for r in reps])),
            })
        persist.write_csv(self.out / "robustness.csv",
                          ["attack", "delta_acc_mean", "acc_w_mean", "tpr"],
                          summary_rows)
        artifacts.append("robustness.csv")

        # FT learning-rate sweep on both schemes
        sweep_rows = []
        for scheme, victims in (("iwe", self.iwe_models), ("ood", self.ood_models)):
            for lr0 in acfg["ft_sweep"]:
                ac = attacks.AttackConfig(kind="ft", ft_lr0=lr0,
                                          ft_decay=acfg["ft"]["decay"],
                                          ft_epochs=acfg["ft"]["epochs"])
                deltas, verdicts = [], []
                for i, victim in enumerate(victims):
                    seed = cfg.stream("attack", "ftsweep", scheme, repr(lr0), i)
                    attacked = attacks.attack_ft(victim, data, ac, seed)
                    deltas.append(acc_on(victim, data) - acc_on(attacked, data))
                    if scheme == "iwe":
                        verdicts.append(verify(attacked, trig, key, k, pop, alpha).verdict)
                    else:
                        verdicts.append(verify_ood_population(attacked, self.ood,
                                                              pop, alpha).verdict)
                sweep_rows.append({"scheme": scheme, "lr0": float(lr0),
                                   "delta_acc_mean": float(np.mean(deltas)),
                                   "tpr": float(np.mean(verdicts))})
        persist.write_csv(self.out / "ft_tradeoff.csv",
                          ["scheme", "lr0", "delta_acc_mean", "tpr"], sweep_rows)
        artifacts.append("ft_tradeoff.csv")

        # prune-only curve (co-decline of ACC and ACC_W)
        curve_rows = []
        for fraction in acfg["prune_curve"]:
            accs, accws = [], []
            for victim in self.iwe_models:
                pruned = attacks.prune_only(victim, data, fraction)
                accs.append(acc_on(pruned, data))
                accws.append(acc_w(pruned, trig, key, k))
            curve_rows.append({"fraction": float(fraction),
                               "acc_mean": float(np.mean(accs)),
                               "acc_w_mean": float(np.mean(accws))})
        persist.write_csv(self.out / "prune_curve.csv",
                          ["fraction", "acc_mean", "acc_w_mean"], curve_rows)
        artifacts.append("prune_curve.csv")

        # KD hyperparameter table
        kd_rows = []
        for setting in acfg["kd_settings"]:
            ac = attacks.AttackConfig(kind="kd", tau=setting["tau"], lam=setting["lam"],
                                      kd_epochs=acfg["kd"]["epochs"],
                                      kd_lr=acfg["kd"]["lr"])
            reps = []
            for i, victim in enumerate(self.iwe_models):
                seed = cfg.stream("attack", "kdset", repr(setting["tau"]),
                                  repr(setting["lam"]), i)
                t0 = time.perf_counter()
                student = attacks.attack_kd(victim, data, victim.arch, ac, seed).model
                reps.append(report("kd", setting, victim, student, i, t0))
            kd_rows.append({"tau": setting["tau"], "lam": setting["lam"],
                            "delta_acc_mean": float(np.mean([r.delta_acc for r in reps])),
                            "acc_w_mean": float(np.mean([r.post_accw for r in reps])),
                            "tpr": float(np.mean([r.post_verdict for r in reps]))})
        persist.write_csv(self.out / "kd_settings.csv",
                          ["tau", "lam", "delta_acc_mean", "acc_w_mean", "tpr"],
                          kd_rows)
        artifacts.append("kd_settings.csv")

        # noise cancellation: Monte-Carlo law plus observed flip rates
        ncfg = acfg["noise"]
        noise_rows = []
        for sigma in ncfg["sigmas"]:
            for row in security.noise_cancellation_curve(
                    ncfg["curve_K"], sigma, max(ncfg["trials"], 1000),
                    kind=ncfg["kind"], seed=cfg.stream("noisecurve", repr(sigma))):
                d = row.to_dict()
                d["kind"] = ncfg["kind"]
                noise_rows.append(d)
        persist.write_csv(self.out / "noise_curve.csv",
                          ["K", "sigma", "kind", "predicted_var",
                           "empirical_var", "std_error"], noise_rows)
        artifacts.append("noise_curve.csv")

        threshold = quantile_threshold(pop.accw_samples, alpha)
        flip_rows = []
        for sigma in ncfg["sigmas"]:
            ac = attacks.AttackConfig(kind="noise", noise_sigma=sigma,
                                      noise_kind=ncfg["kind"])
            summ = attacks.attack_noise_logits(
                self.iwe_models[0], trig, key, k, ac, ncfg["trials"],
                cfg.stream("attack", "noise", repr(sigma)), threshold=threshold)
            row = summ.to_dict()
            row["sigma"] = sigma
            flip_rows.append(row)
        persist.write_csv(self.out / "noise_attack.csv",
                          ["sigma", "baseline_accw", "mean_accw",
                           "verdict_flip_rate", "group1_noise_var",
                           "group0_noise_var", "predicted_var"], flip_rows)
        artifacts.append("noise_attack.csv")

        (self.out / "attacks").mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(r, sort_keys=True) for r in reports]
        (self.out / "attacks" / "reports.jsonl").write_text("\n".join(lines) + "\n")
        artifacts.append("attacks/reports.jsonl")
        return artifacts

    def _stage_security(self) -> list:
        ds = self.cfg.doc["dataset"]
        n_aug = self.cfg.doc["attacks"]["security"]["n_aug"]
        odds = security.guessing_odds(ds["K"], len(self.cfg.doc["trigger"]["classes"]),
                                      n_aug)
        reference = security.guessing_odds(100, 1, n_aug)
        doc = {"odds": odds.to_dict(), "reference_K100": reference.to_dict()}
        (self.out / "security.json").write_text(json.dumps(doc, indent=1,
                                                           sort_keys=True))
        return ["security.json"]


def _train_watermarked_job(args):
    scheme, data, trigger, key, embed_cfg, ood, delta_ood, seed = args
    if scheme == "iwe":
        return embed_iwe(data, trigger, key, embed_cfg, seed,
                         record_curve=False).model
    return embed_ood_baseline(data, ood, delta_ood, embed_cfg, seed,
                              record_curve=False).model


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1, echo=None) -> dict:
    return Experiment(cfg, out_dir, jobs=jobs, echo=echo).run()

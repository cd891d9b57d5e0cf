"""Experiment stages. Each stage reads its inputs from and writes its outputs to `cfg.out`.

Layout of an output directory:

    classifier.ckpt            backdoored model (attack)
    defense[_variant].ckpt     transform + mapping (defend / ablate)
    metrics.csv                one row per (attack, defense), upserted by every evaluation
    reports/*.json             MetricsReport + diagnostics + config echo per evaluation
    ablation.{csv,md}          full vs no_hrf vs no_scl
    sweep.{csv,md}             ShrinkPad trend over pad sizes
    adaptive/                  classifier and defense of the adaptive attacker
    blackbox/                  surrogate and defense trained through the oracle
    summary.{csv,md}           report over metrics.csv
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import astuple
from pathlib import Path

import numpy as np

from .attacks import PoisonPlan, TriggerSpec, build_poisoned_dataset, poison_test_set, train_adaptive_backdoor
from .baseline import ShrinkPadConfig, shrinkpad
from .blackbox import LocalOracle, RemoteOracle, blackbox_defend, distill_surrogate
from .classifier import load_classifier, predict_probs, save_classifier, train_classifier
from .config import ExperimentConfig
from .data import load_dataset, strip_labels
from .metrics import (
    CSV_FIELDS,
    MetricsReport,
    attack_success_rate,
    benign_accuracy,
    markdown_table,
    read_csv,
    theorem_diagnostics,
    write_csv,
)
from .refine import (
    DefendedModel,
    defended_predict,
    identity_mapping,
    load_defense,
    make_output_mapping,
    save_defense,
    train_refine,
)

log = logging.getLogger(__name__)

PROVENANCE_FIELDS = ("config_hash", "seeds", "code_version")
METRIC_FIELDS = CSV_FIELDS + PROVENANCE_FIELDS
SWEEP_FIELDS = ("experiment_id", "attack", "pad_size", "BA", "ASR") + PROVENANCE_FIELDS
DEFENSES = ("none", "refine", "shrinkpad")
VARIANTS = ("full", "no_hrf", "no_scl")


class DependencyError(FileNotFoundError):
    """An upstream artifact this stage needs has not been produced."""


_DATA_CACHE: dict = {}


def _data(cfg: ExperimentConfig):
    desc = cfg.descriptor()
    key = astuple(desc)
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = load_dataset(desc)
    return _DATA_CACHE[key]


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise DependencyError(f"missing upstream artifact {path} (run `{producer}` first)")
    return path


def _row_seeds(cfg) -> str:
    return json.dumps(cfg.seeds.model_dump(), sort_keys=True, separators=(",", ":"))


def _provenance_row(cfg) -> dict:
    return {"config_hash": cfg.config_hash(), "seeds": _row_seeds(cfg), "code_version": cfg.provenance()["code_version"]}


def _write_json(path: Path, body: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _write_md(path: Path, table: str, cfg) -> Path:
    p = cfg.provenance()
    footer = f"\nconfig {p['config_hash']} | seeds {_row_seeds(cfg)} | code {p['code_version']}\n"
    path.write_text(table + "\n" + footer)
    return path


def upsert_metrics(path: Path, rows: list[dict], fields=METRIC_FIELDS, key=("experiment_id", "attack", "defense")) -> Path:
    """Replace rows sharing a key, keep the rest, write back sorted by key."""
    existing = read_csv(path) if path.is_file() else []
    fresh = {tuple(str(r[k]) for k in key): r for r in rows}
    kept = [r for r in existing if tuple(r[k] for k in key) not in fresh]
    merged = sorted(kept + list(fresh.values()), key=lambda r: tuple(str(r[k]) for k in key))
    return write_csv(path, merged, fields=fields)


# ------------------------------------------------------------------------ attack


def classifier_path(root: Path) -> Path:
    return root / "classifier.ckpt"


def defense_path(root: Path, variant: str = "full") -> Path:
    return root / ("defense.ckpt" if variant == "full" else f"defense_{variant}.ckpt")


def _plan_from_header(header: dict) -> PoisonPlan:
    p = header["plan"]
    return PoisonPlan(TriggerSpec.from_dict(p["trigger"]), p["target_label"], p["poison_rate"])


def _attack_name(cfg, adaptive: bool = False) -> str:
    return cfg.attack.variant + ("+adaptive" if adaptive else "")


def run_attack(cfg: ExperimentConfig, root: Path | None = None, adaptive: bool = False) -> Path:
    """Poison the training split and train (or adaptively train) the classifier."""
    root = Path(root or cfg.out)
    train, _ = _data(cfg)
    plan = cfg.plan(train.shape)
    tcfg = cfg.train_config()
    t0 = time.perf_counter()
    if adaptive:
        model = train_adaptive_backdoor(train, plan, cfg.adaptive.gamma, cfg.refine_config(no_scl=False), tcfg,
                                        cfg.classifier.arch, poison_seed=cfg.seeds.poison,
                                        inner_steps=cfg.adaptive.inner_steps, **cfg.classifier.arch_kwargs)
    else:
        poisoned = build_poisoned_dataset(train, plan, seed=cfg.seeds.poison)
        model = train_classifier(poisoned, tcfg, cfg.classifier.arch, **cfg.classifier.arch_kwargs)
    elapsed = time.perf_counter() - t0
    log.info("classifier trained in %.1fs", elapsed)
    extra = {"plan": plan.to_dict(), "attack": _attack_name(cfg, adaptive), "config": cfg.echo(),
             "stage_hash": cfg.section_hash("dataset", "attack", "classifier", "seeds", adaptive=adaptive,
                                            gamma=cfg.adaptive.gamma if adaptive else None),
             **cfg.provenance()}
    return save_classifier(model, classifier_path(root), extra)


# ------------------------------------------------------------------------ defend


def _defense_hash(cfg, variant: str, cls_header: dict) -> str:
    return cfg.section_hash("refine", "seeds", variant=variant, classifier=cls_header.get("stage_hash"))


def run_defend(cfg: ExperimentConfig, root: Path | None = None, variant: str | None = None,
               reuse: bool = False) -> Path:
    """Train the transform against the saved classifier and save the defense checkpoint."""
    root = Path(root or cfg.out)
    if variant is None:
        variant = "no_hrf" if cfg.ablation.no_hrf else "no_scl" if cfg.ablation.no_scl else "full"
    if variant not in VARIANTS:
        raise ValueError(f"unknown defense variant {variant!r}")
    model, header = load_classifier(_require(classifier_path(root), "attack"))
    out = defense_path(root, variant)
    stage_hash = _defense_hash(cfg, variant, header)
    if reuse and out.is_file():
        _, _, dh = load_defense(out)
        if dh.get("stage_hash") == stage_hash:
            log.info("reusing %s", out)
            return out
    train, _ = _data(cfg)
    unlabeled = strip_labels(train, cfg.refine.unlabeled_fraction, seed=cfg.seeds.data)
    k = model.num_classes
    mapping = identity_mapping(k) if variant == "no_hrf" else make_output_mapping(k, cfg.seeds.mapping)
    rcfg = cfg.refine_config(no_scl=variant == "no_scl")
    t0 = time.perf_counter()
    module = train_refine(model, unlabeled, mapping, rcfg)
    log.info("defense %s trained in %.1fs", variant, time.perf_counter() - t0)
    extra = {"variant": variant, "attack": header.get("attack"), "config": cfg.echo(), "stage_hash": stage_hash,
             **cfg.provenance()}
    return save_defense(out, module, mapping, extra)


# ------------------------------------------------------------------------ eval


def _evaluate(cfg, model, predict, transform_fn, test, triggered, target) -> dict:
    ba = benign_accuracy(predict, test)
    asr = attack_success_rate(predict, triggered, target)
    report = MetricsReport(ba, asr, len(test), len(triggered), cfg.echo())
    diag = {"lhs": None, "w1": None, "ratio": None}
    if transform_fn is not None:
        diag = theorem_diagnostics(model, transform_fn, test.images, cfg.diagnostics.max_points, seed=cfg.seeds.data)
    return {"report": report, "diagnostics": diag}


def _record(cfg, root_out: Path, attack: str, defense: str, result: dict, extra: dict | None = None) -> dict:
    rep, diag = result["report"], result["diagnostics"]
    row = {"experiment_id": cfg.experiment_id, "attack": attack, "defense": defense, "BA": rep.BA,
           "ASR": rep.ASR, "lhs": diag["lhs"], "w1": diag["w1"], "ratio": diag["ratio"], **_provenance_row(cfg)}
    body = {"BA": rep.BA, "ASR": rep.ASR, "n_benign": rep.n_benign, "n_triggered": rep.n_triggered,
            "diagnostics": diag, "config": rep.config, **cfg.provenance(), **(extra or {})}
    _write_json(root_out / "reports" / f"{attack}__{defense}.json", body)
    upsert_metrics(root_out / "metrics.csv", [row])
    return row


def _test_sets(cfg, header):
    _, test = _data(cfg)
    plan = _plan_from_header(header)
    triggered = poison_test_set(test, plan)
    return test, triggered, plan.target_label


def evaluate_refine(cfg, root: Path, variant: str = "full", label: str | None = None, out: Path | None = None) -> dict:
    model, header = load_classifier(_require(classifier_path(root), "attack"))
    module, mapping, dh = load_defense(_require(defense_path(root, variant), "defend"))
    defended = DefendedModel(module, model, mapping)
    test, triggered, target = _test_sets(cfg, header)
    from .refine import transform as apply_transform

    result = _evaluate(cfg, model, lambda x: defended_predict(defended, x)[0],
                       lambda x: apply_transform(x, module), test, triggered, target)
    name = label or ("refine" if variant == "full" else f"refine_{variant}")
    return _record(cfg, Path(out or cfg.out), header.get("attack", cfg.attack.variant), name, result,
                   {"permutation": list(mapping.perm)})


def evaluate_none(cfg, root: Path, out: Path | None = None) -> dict:
    model, header = load_classifier(_require(classifier_path(root), "attack"))
    test, triggered, target = _test_sets(cfg, header)
    result = _evaluate(cfg, model, lambda x: predict_probs(model, x).argmax(1), None, test, triggered, target)
    return _record(cfg, Path(out or cfg.out), header.get("attack", cfg.attack.variant), "none", result)


def shrinkpad_rows(cfg, root: Path, pad_sizes) -> list[dict]:
    model, header = load_classifier(_require(classifier_path(root), "attack"))
    test, triggered, target = _test_sets(cfg, header)
    rows = []
    for s in pad_sizes:
        sp = ShrinkPadConfig(s, seed=cfg.seeds.data)
        fn = lambda x, sp=sp: shrinkpad(x, sp)
        result = _evaluate(cfg, model, lambda x, fn=fn: predict_probs(model, fn(x)).argmax(1),
                           fn if s else None, test, triggered, target)
        rows.append(_record(cfg, Path(cfg.out), header.get("attack", cfg.attack.variant), f"shrinkpad_S{s}", result))
    return rows


def run_eval(cfg: ExperimentConfig, defense: str = "refine") -> list[dict]:
    root = Path(cfg.out)
    if defense not in DEFENSES:
        raise ValueError(f"unknown defense {defense!r}; choose from {DEFENSES}")
    if defense == "none":
        return [evaluate_none(cfg, root)]
    if defense == "shrinkpad":
        return shrinkpad_rows(cfg, root, cfg.sweep.pad_sizes)
    variant = "no_hrf" if cfg.ablation.no_hrf else "no_scl" if cfg.ablation.no_scl else "full"
    return [evaluate_refine(cfg, root, variant)]


# ------------------------------------------------------------------------ composite stages


def run_ablate(cfg: ExperimentConfig) -> list[dict]:
    """Full REFINE vs identity mapping vs no contrastive term, all on the saved classifier."""
    root = Path(cfg.out)
    rows = [evaluate_none(cfg, root)]
    for variant in VARIANTS:
        run_defend(cfg, root, variant, reuse=True)
        rows.append(evaluate_refine(cfg, root, variant))
    write_csv(root / "ablation.csv", rows, fields=METRIC_FIELDS)
    _write_md(root / "ablation.md", markdown_table(rows), cfg)
    return rows


def run_adaptive(cfg: ExperimentConfig) -> list[dict]:
    """Adaptive attacker, then defend and evaluate it; artifacts under out/adaptive."""
    root = Path(cfg.out) / "adaptive"
    run_attack(cfg, root, adaptive=True)
    run_defend(cfg, root, "full")
    return [evaluate_none(cfg, root), evaluate_refine(cfg, root)]


def run_blackbox(cfg: ExperimentConfig) -> list[dict]:
    """Distill a surrogate from the score oracle, train the defense on it, deploy on the oracle."""
    out = Path(cfg.out)
    root = out / "blackbox"
    if cfg.blackbox.url:
        oracle = RemoteOracle(cfg.blackbox.url)
        attack = cfg.attack.variant
        target_header = None
    else:
        model, target_header = load_classifier(_require(classifier_path(out), "attack"))
        oracle = LocalOracle(model)
        attack = target_header.get("attack", cfg.attack.variant)
    train, test = _data(cfg)
    plan = _plan_from_header(target_header) if target_header else cfg.plan(train.shape)
    triggered = poison_test_set(test, plan)
    unlabeled = strip_labels(train, cfg.refine.unlabeled_fraction, seed=cfg.seeds.data)
    dcfg = cfg.train_config(cfg.blackbox.distill)
    surrogate = distill_surrogate(oracle, unlabeled, cfg.blackbox.surrogate_arch, dcfg,
                                  query_batch=cfg.blackbox.query_batch, **cfg.blackbox.distill.arch_kwargs)
    save_classifier(surrogate, root / "surrogate.ckpt", {"config": cfg.echo(), **cfg.provenance()})
    mapping = make_output_mapping(oracle.num_classes, cfg.seeds.mapping)
    defended, _ = blackbox_defend(oracle, unlabeled, cfg.refine_config(no_scl=False), surrogate=surrogate,
                                  mapping=mapping)
    save_defense(root / "defense.ckpt", defended.transform, mapping,
                 {"variant": "blackbox", "config": cfg.echo(), **cfg.provenance()})

    def oracle_predict(x):
        return np.concatenate([oracle.query(x[s : s + cfg.blackbox.query_batch]).argmax(1)
                               for s in range(0, len(x), cfg.blackbox.query_batch)])

    from .refine import transform as apply_transform

    rows = []
    for name, predict, tf in (("oracle_none", oracle_predict, None),
                              ("blackbox_refine", lambda x: defended_predict(defended, x)[0],
                               lambda x: apply_transform(x, defended.transform))):
        # diagnostics need white-box features, so they are taken on the surrogate
        result = _evaluate(cfg, surrogate, predict, tf, test, triggered, plan.target_label)
        rows.append(_record(cfg, out, attack, name, result, {"oracle_queries": oracle.queries}))
    return rows


def run_sweep(cfg: ExperimentConfig) -> list[dict]:
    """ShrinkPad over every pad size; trend CSV with one row per size."""
    rows = shrinkpad_rows(cfg, Path(cfg.out), cfg.sweep.pad_sizes)
    trend = [{**r, "pad_size": s} for r, s in zip(rows, cfg.sweep.pad_sizes)]
    root = Path(cfg.out)
    write_csv(root / "sweep.csv", trend, fields=SWEEP_FIELDS)
    _write_md(root / "sweep.md", markdown_table(trend, columns=("attack", "pad_size", "BA", "ASR")), cfg)
    return trend


def run_report(cfg: ExperimentConfig) -> Path:
    """Render metrics.csv into a summary: one line per attack, BA/ASR per defense."""
    root = Path(cfg.out)
    rows = read_csv(_require(root / "metrics.csv", "eval"))
    defenses = sorted({r["defense"] for r in rows}, key=lambda d: (d != "none", d))
    summary = []
    for attack in sorted({r["attack"] for r in rows}):
        line = {"attack": attack}
        for r in rows:
            if r["attack"] == attack:
                line[f"{r['defense']} BA"] = r["BA"]
                line[f"{r['defense']} ASR"] = r["ASR"]
        summary.append(line)
    cols = ("attack",) + tuple(f"{d} {m}" for d in defenses for m in ("BA", "ASR"))
    pct = tuple(c for c in cols if c != "attack")
    write_csv(root / "summary.csv", summary, fields=cols)
    return _write_md(root / "summary.md", markdown_table(summary, columns=cols, percent=pct), cfg)

"""``rasa`` command line: synthesis, training, evaluation, KM analysis,
similarity maps and report cleaning.

Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 degenerate
statistics.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import distill, reportprep, synthgen
from .datamodel import BagFormatError, CohortManifest, ManifestError, load_manifest, read_bag_shape
from .survstats import KmCurve, UndefinedStatisticError, concordance_index, kaplan_meier, log_rank_test
from .tff import CheckpointError, ConfigError, TffConfig, TffParams, forward, load_checkpoint, save_checkpoint

log = logging.getLogger("rasa")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DEGENERATE = 0, 2, 3, 4
STAGES = ("teacher", "student")
N_TRIALS = 5


class UsageError(Exception):
    pass


class DegenerateError(Exception):
    pass


# ------------------------------------------------------------------ run config

_TRAIN_KEYS = ("gamma", "p_aug", "lam", "lr", "epochs", "batch_size", "p_mix_alpha", "convention")
_MODEL_KEYS = ("d_text_in", "d_patch_in", "d_model", "n_heads", "n_qformer_blocks",
               "n_self_blocks", "ff_multiplier")


def _model_defaults() -> dict:
    d = {k: getattr(TffConfig(), k) for k in _MODEL_KEYS}
    d["d_text_in"] = d["d_patch_in"] = None  # taken from the cohort's bags
    return d


def _train_defaults() -> dict:
    return {k: getattr(distill.TrainConfig(), k) for k in _TRAIN_KEYS}


def _synth_defaults() -> dict:
    return {f.name: getattr(synthgen.SynthConfig(), f.name)
            for f in fields(synthgen.SynthConfig) if f.name != "seed"}


_PATH_DEFAULTS = {"manifest": None, "out": "runs"}


@dataclass
class RunConfig:
    """Everything a command needs, as one JSON document.

    ``seed`` drives cohort synthesis, model initialization and training
    order alike.
    """

    seed: int = 0
    synth: dict = field(default_factory=_synth_defaults)
    train: dict = field(default_factory=_train_defaults)
    model: dict = field(default_factory=_model_defaults)
    paths: dict = field(default_factory=lambda: dict(_PATH_DEFAULTS))

    def synth_config(self) -> synthgen.SynthConfig:
        return synthgen.SynthConfig(seed=self.seed, **self.synth)

    def tff_config(self, manifest: Optional[CohortManifest] = None) -> TffConfig:
        m = dict(self.model)
        if manifest is not None and (m["d_text_in"] is None or m["d_patch_in"] is None):
            first = manifest.cases[0]
            if m["d_text_in"] is None:
                m["d_text_in"] = read_bag_shape(manifest.text_path(first))[1]
            if m["d_patch_in"] is None:
                m["d_patch_in"] = read_bag_shape(manifest.patch_path(first))[1]
        if m["d_text_in"] is None or m["d_patch_in"] is None:
            raise UsageError("model input widths are unset and no manifest was given")
        return TffConfig(seed=self.seed, **m)

    def train_config(self, manifest: Optional[CohortManifest] = None) -> distill.TrainConfig:
        return distill.TrainConfig(seed=self.seed, tff=self.tff_config(manifest), **self.train)

    def to_dict(self) -> dict:
        return asdict(self)


def _type_ok(value, default) -> bool:
    if default is None:
        return value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    return True


def _merge(defaults: dict, given, section: str, problems: list) -> dict:
    out = dict(defaults)
    if not isinstance(given, dict):
        problems.append(f"{section}: must be an object")
        return out
    for key, value in given.items():
        if key not in defaults:
            problems.append(f"{section}.{key}: unknown key")
        elif value is not None and not _type_ok(value, defaults[key]) and \
                not (section == "paths" and isinstance(value, str)):
            problems.append(f"{section}.{key}: expected {type(defaults[key]).__name__}, "
                            f"got {value!r}")
        elif value is None and defaults[key] is not None:
            problems.append(f"{section}.{key}: must not be null")
        elif section == "model" and value is not None and \
                not (isinstance(value, int) and not isinstance(value, bool)):
            problems.append(f"{section}.{key}: expected int, got {value!r}")
        else:
            out[key] = value
    return out


def parse_run_config(doc: dict) -> RunConfig:
    """Merge a config document over defaults; every problem is reported at once."""
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise UsageError("config: top level must be an object")
    known = {"seed", "synth", "train", "model", "paths"}
    for key in sorted(set(doc) - known):
        problems.append(f"{key}: unknown key")
    seed = doc.get("seed", 0)
    if not (isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0):
        problems.append(f"seed: expected a non-negative integer, got {seed!r}")
        seed = 0
    cfg = RunConfig(
        seed=seed,
        synth=_merge(_synth_defaults(), doc.get("synth", {}), "synth", problems),
        train=_merge(_train_defaults(), doc.get("train", {}), "train", problems),
        model=_merge(_model_defaults(), doc.get("model", {}), "model", problems),
        paths=_merge(dict(_PATH_DEFAULTS), doc.get("paths", {}), "paths", problems),
    )
    problems.extend(validate_run_config(cfg))
    if problems:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def validate_run_config(cfg: RunConfig) -> list:
    problems = [f"synth.{e}" for e in cfg.synth_config().validate()]
    probe = {k: (v if v is not None else 1) for k, v in cfg.model.items()}
    try:
        TffConfig(seed=cfg.seed, **probe)
    except ConfigError as exc:
        problems.append(f"model: {exc}")
    t = distill.TrainConfig(seed=cfg.seed, **cfg.train)
    problems.extend(f"train.{e}" for e in t.validate())
    return problems


def load_run_config(path: Optional[str], args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    doc: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {p} is not valid JSON: {exc}") from None
    doc = json.loads(json.dumps(doc))  # private copy
    if not isinstance(doc, dict):
        raise UsageError("config: top level must be an object")
    overrides = {
        ("train", "gamma"): getattr(args, "gamma", None),
        ("train", "p_aug"): getattr(args, "p_aug", None),
        ("train", "lam"): getattr(args, "lam", None),
        ("paths", "out"): getattr(args, "out", None),
        ("paths", "manifest"): getattr(args, "manifest", None),
    }
    for (section, key), value in overrides.items():
        if value is not None:
            doc.setdefault(section, {})
            if not isinstance(doc[section], dict):
                raise UsageError(f"{section}: must be an object")
            doc[section][key] = value
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    return parse_run_config(doc)


# ------------------------------------------------------------------ helpers

def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _finite_or_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _require_manifest(cfg: RunConfig) -> CohortManifest:
    path = cfg.paths.get("manifest")
    if not path:
        raise UsageError("a manifest is required (--manifest or paths.manifest)")
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    return load_manifest(path)


def _check_trial(trial: int) -> int:
    if not 0 <= trial < N_TRIALS:
        raise UsageError(f"--trial must lie in 0..{N_TRIALS - 1}, got {trial}")
    return trial


def _load_ckpt(path, expected: Optional[TffConfig] = None) -> TffParams:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return load_checkpoint(p, expected)


def run_name(stage: str, trial: int) -> str:
    return f"{stage}_trial{trial}"


class Scorer:
    """Risk scores for a stage: teacher on full bags, student on teacher-sampled
    bags, or the generator's latent risk for the oracle."""

    def __init__(self, stage: str, model: Optional[TffParams] = None,
                 teacher: Optional[TffParams] = None, gamma: float = 0.5,
                 truth: Optional[synthgen.GroundTruth] = None):
        self.stage, self.model, self.teacher, self.gamma, self.truth = \
            stage, model, teacher, gamma, truth

    def __call__(self, case: distill.CaseData) -> float:
        if self.stage == "oracle":
            return float(self.truth.z[case.id])
        patches = case.patches
        if self.stage == "student":
            patches = patches[distill.sample_case(self.teacher, case, self.gamma).kept]
        return forward(self.model, case.text, patches).score


def _scorer_for_trial(stage: str, trial: int, cfg: RunConfig, manifest: CohortManifest,
                      checkpoint=None, teacher=None, runs=None) -> Scorer:
    runs = Path(runs or cfg.paths["out"])
    if stage == "oracle":
        truth_path = manifest.root / "ground_truth.json"
        if not truth_path.is_file():
            raise UsageError(f"oracle scoring needs {truth_path}")
        return Scorer("oracle", truth=synthgen.GroundTruth.load(truth_path))
    expected = cfg.tff_config(manifest)
    model = _load_ckpt(checkpoint or runs / f"{run_name(stage, trial)}.rasc", expected)
    t = None
    if stage == "student":
        t = _load_ckpt(teacher or runs / f"{run_name('teacher', trial)}.rasc", expected)
    return Scorer(stage, model, t, cfg.train["gamma"])


def median_split(train_scores: Sequence[float], test_scores: Sequence[float]):
    """High-risk mask for the test set, thresholded at the training median."""
    threshold = float(np.median(np.asarray(train_scores, dtype=np.float64)))
    high = np.asarray(test_scores, dtype=np.float64) >= threshold
    return threshold, high


# ------------------------------------------------------------------ synth

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(cfg.paths["out"])
    manifest, truth = synthgen.generate(cfg.synth_config(), out)
    summary = synthgen.describe(manifest, truth)
    print(f"wrote {summary['n_cases']} cases to {out} "
          f"(event rate {summary['event_rate']:.3f}, latent CI "
          f"{summary['latent_ci'] if summary['latent_ci'] is None else round(summary['latent_ci'], 4)})")
    return EXIT_OK


# ------------------------------------------------------------------ train

def cmd_train(args, cfg: RunConfig) -> int:
    if args.stage == "student" and not args.teacher:
        raise UsageError("--stage student needs --teacher CHECKPOINT")
    trial = _check_trial(args.trial)
    manifest = _require_manifest(cfg)
    config = cfg.train_config(manifest).checked()
    out = Path(cfg.paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    name = run_name(args.stage, trial)
    cohort = distill.load_cohort(manifest)
    if args.stage == "teacher":
        result = distill.train_teacher(manifest, trial, config, cohort,
                                       log_path=out / f"{name}.log.jsonl")
    else:
        teacher = _load_ckpt(args.teacher, config.tff)
        result = distill.train_student(manifest, trial, teacher, config, cohort,
                                       log_path=out / f"{name}.log.jsonl")
    save_checkpoint(result.params, out / f"{name}.rasc")
    _write_text(out / f"{name}.json", _dump({
        "stage": args.stage, "trial": trial, "best_epoch": result.best_epoch,
        "best_val_ci": _finite_or_none(result.best_val_ci), "config": cfg.to_dict()}))
    print(f"{args.stage} trial {trial}: best epoch {result.best_epoch}, "
          f"validation CI {result.best_val_ci:.4f} -> {out / (name + '.rasc')}")
    return EXIT_OK


# ------------------------------------------------------------------ evaluate

def format_mean_std(values: Sequence[float]) -> str:
    v = np.asarray(values, dtype=np.float64)
    std = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
    return f"{float(np.mean(v)):.4f} ± {std:.4f}"


@dataclass
class MetricsReport:
    stage: str
    trials: list

    def aggregate(self) -> Optional[dict]:
        cis = [t["test_ci"] for t in self.trials]
        if any(c is None for c in cis):
            return None
        v = np.asarray(cis, dtype=np.float64)
        std = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        return {"n": len(cis), "mean": float(v.mean()), "std": std,
                "formatted": format_mean_std(cis)}

    def to_dict(self) -> dict:
        return {"stage": self.stage, "trials": self.trials, "aggregate": self.aggregate()}

    def to_text(self) -> str:
        lines = [f"stage: {self.stage}", f"{'trial':>5}  {'test CI':>8}  {'KM p':>10}  note"]
        for t in self.trials:
            ci = "undefined" if t["test_ci"] is None else f"{t['test_ci']:.4f}"
            p = "n/a" if t["km_p"] is None else f"{t['km_p']:.3e}"
            lines.append(f"{t['trial']:>5}  {ci:>8}  {p:>10}  {t['note']}".rstrip())
        agg = self.aggregate()
        lines.append("CI: " + ("undefined" if agg is None else agg["formatted"]))
        return "\n".join(lines) + "\n"


def evaluate_trial(scorer: Callable, manifest: CohortManifest, cohort: dict, trial: int) -> dict:
    split = manifest.splits[trial]
    test = [cohort[i] for i in split.test]
    scores = np.array([scorer(c) for c in test])
    times = np.array([c.time for c in test])
    events = np.array([c.event for c in test])
    entry = {"trial": trial, "n_test": len(test), "test_ci": None, "km_p": None, "note": ""}
    if np.all(scores == scores[0]):
        entry["note"] = "undefined CI: identical risk scores for every test case"
        return entry
    try:
        entry["test_ci"] = concordance_index(scores, times, events)
    except UndefinedStatisticError as exc:
        entry["note"] = f"undefined CI: {exc}"
        return entry
    train_scores = [scorer(cohort[i]) for i in split.train]
    _, high = median_split(train_scores, scores)
    if high.all() or not high.any():
        entry["note"] = "KM split left one group empty"
        return entry
    try:
        _, entry["km_p"] = log_rank_test(times[high], events[high], times[~high], events[~high])
    except UndefinedStatisticError as exc:
        entry["note"] = f"log-rank undefined: {exc}"
    return entry


def cmd_evaluate(args, cfg: RunConfig) -> int:
    manifest = _require_manifest(cfg)
    if args.checkpoints is not None and len(args.checkpoints) != N_TRIALS:
        raise UsageError(f"--checkpoints needs {N_TRIALS} paths")
    if args.teachers is not None and len(args.teachers) != N_TRIALS:
        raise UsageError(f"--teachers needs {N_TRIALS} paths")
    scorers = [_scorer_for_trial(args.stage, k, cfg, manifest,
                                 args.checkpoints[k] if args.checkpoints else None,
                                 args.teachers[k] if args.teachers else None, args.runs)
               for k in range(N_TRIALS)]
    cohort = distill.load_cohort(manifest)
    report = MetricsReport(args.stage, [evaluate_trial(s, manifest, cohort, k)
                                        for k, s in enumerate(scorers)])
    out = Path(cfg.paths["out"])
    _write_text(out / f"metrics_{args.stage}.json", _dump(report.to_dict()))
    _write_text(out / f"metrics_{args.stage}.txt", report.to_text())
    sys.stdout.write(report.to_text())
    if report.aggregate() is None:
        raise DegenerateError("at least one trial has an undefined test CI")
    return EXIT_OK


# ------------------------------------------------------------------ km

def km_rows(group: str, curve: KmCurve, n: int) -> list:
    rows = [(group, 0.0, 1.0, n, 0)]
    rows += [(group, float(t), float(s), int(r), int(d))
             for t, s, r, d in zip(curve.times, curve.survival, curve.at_risk, curve.events)]
    return rows


def km_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "time", "survival", "at_risk", "events"])
    for g, t, s, r, d in rows:
        w.writerow([g, repr(t), repr(s), r, d])
    return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def km_svg(curves: dict, t_max: float, p_value: Optional[float]) -> str:
    """Step-function KM plot drawn directly as SVG."""
    w, h, left, right, top, bottom = 640, 420, 70, 20, 30, 60
    pw, ph = w - left - right, h - top - bottom
    t_max = t_max if t_max > 0 else 1.0
    sx = lambda t: left + pw * t / t_max  # noqa: E731
    sy = lambda s: top + ph * (1.0 - s)  # noqa: E731
    colors = {"high": "#d62728", "low": "#2ca02c"}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i in range(6):
        t = t_max * i / 5
        x = _fmt(sx(t))
        out.append(f'<line x1="{x}" y1="{top + ph}" x2="{x}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{top + ph + 18}" text-anchor="middle">{t:.0f}</text>')
    for i in range(5):
        s = i / 4
        y = _fmt(sy(s))
        out.append(f'<line x1="{left - 5}" y1="{y}" x2="{left}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y}" text-anchor="end" '
                   f'dominant-baseline="middle">{s:.2f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{h - 15}" text-anchor="middle">time</text>')
    out.append(f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {top + ph / 2:.1f})">survival probability</text>')
    for k, (group, (curve, last_t)) in enumerate(curves.items()):
        pts = [(0.0, 1.0)]
        s_prev = 1.0
        for t, s in zip(curve.times, curve.survival):
            pts += [(float(t), s_prev), (float(t), float(s))]
            s_prev = float(s)
        pts.append((max(last_t, pts[-1][0]), s_prev))
        path = " ".join(f"{_fmt(sx(t))},{_fmt(sy(s))}" for t, s in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{colors[group]}" '
                   f'stroke-width="2"/>')
        ly = top + 15 + 16 * k
        out.append(f'<line x1="{left + pw - 110}" y1="{ly}" x2="{left + pw - 90}" y2="{ly}" '
                   f'stroke="{colors[group]}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 85}" y="{ly + 4}">{group} risk</text>')
    label = "log-rank p = n/a" if p_value is None else f"log-rank p = {p_value:.3e}"
    out.append(f'<text x="{left + 10}" y="{top + ph - 10}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_km(args, cfg: RunConfig) -> int:
    trial = _check_trial(args.trial)
    manifest = _require_manifest(cfg)
    scorer = _scorer_for_trial(args.stage, trial, cfg, manifest, args.checkpoint, args.teacher,
                               args.runs)
    cohort = distill.load_cohort(manifest)
    split = manifest.splits[trial]
    test = [cohort[i] for i in split.test]
    threshold, high = median_split([scorer(cohort[i]) for i in split.train],
                                   [scorer(c) for c in test])
    if high.all() or not high.any():
        raise DegenerateError(f"median split (threshold {threshold:.6g}) left the "
                              f"{'low' if high.all() else 'high'}-risk group empty")
    times = np.array([c.time for c in test])
    events = np.array([c.event for c in test])
    try:
        chi2, p = log_rank_test(times[high], events[high], times[~high], events[~high])
    except UndefinedStatisticError as exc:
        raise DegenerateError(str(exc)) from None
    curves, rows = {}, []
    for group, mask in (("high", high), ("low", ~high)):
        curve = kaplan_meier(times[mask], events[mask])
        curves[group] = (curve, float(times[mask].max()))
        rows += km_rows(group, curve, int(mask.sum()))
    out = Path(cfg.paths["out"])
    name = f"km_{args.stage}_trial{trial}"
    _write_text(out / f"{name}.csv", km_csv(rows))
    _write_text(out / f"{name}.svg", km_svg(curves, float(times.max()), p))
    _write_text(out / f"{name}.json", _dump({
        "stage": args.stage, "trial": trial, "threshold": threshold,
        "n_high": int(high.sum()), "n_low": int((~high).sum()),
        "chi_square": chi2, "p_value": p}))
    print(f"trial {trial}: high {int(high.sum())} / low {int((~high).sum())}, "
          f"chi-square {chi2:.4f}, p {p:.3e}")
    return EXIT_OK


# ------------------------------------------------------------------ simmap

def _parse_gammas(text: str) -> list:
    try:
        gammas = [float(g.replace("−", "-")) for g in text.split(",") if g.strip()]
    except ValueError:
        raise UsageError(f"--gammas must be comma-separated numbers, got {text!r}") from None
    if not gammas or any(not -1.0 <= g <= 1.0 for g in gammas):
        raise UsageError("--gammas values must lie in [-1, 1]")
    return gammas


def cmd_simmap(args, cfg: RunConfig) -> int:
    manifest = _require_manifest(cfg)
    gammas = _parse_gammas(args.gammas)
    if args.case_id not in manifest.by_id():
        raise UsageError(f"unknown case id {args.case_id!r}")
    if not args.checkpoint:
        raise UsageError("simmap needs --checkpoint (a teacher)")
    teacher = _load_ckpt(args.checkpoint, cfg.tff_config(manifest))
    case = manifest.case(args.case_id)
    text, patches = manifest.load_bags(case)
    data = distill.CaseData(case.id, text.matrix, patches.matrix, list(case.keyword_token_indices),
                            case.label.time, case.label.event, patches.coords)
    records = distill.export_similarity_map(data, teacher, gammas)
    cols = ["case_id", "patch_index", "x", "y", "similarity"] + [f"kept@{g:g}" for g in gammas]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        w.writerow([repr(r[c]) if c == "similarity" else int(r[c]) if isinstance(r[c], bool)
                    else r[c] for c in cols])
    path = Path(cfg.paths["out"]) / f"simmap_{case.id}.csv"
    _write_text(path, buf.getvalue())
    kept = {g: sum(r[f"kept@{g:g}"] for r in records) for g in gammas}
    print(f"{case.id}: {len(records)} patches; kept " +
          ", ".join(f"{n} at {g:g}" for g, n in kept.items()) + f" -> {path}")
    return EXIT_OK


# ------------------------------------------------------------------ clean-reports

def cmd_clean_reports(args, cfg: RunConfig) -> int:
    src = Path(args.input) if args.input else None
    if src is None or not src.is_dir():
        raise UsageError(f"--input must be a directory of .txt reports, got {args.input!r}")
    try:
        prompt = reportprep.CleaningPrompt.from_file(args.prompt) if args.prompt \
            else reportprep.CleaningPrompt()
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad prompt file {args.prompt}: {exc}") from None
    endpoint = reportprep.Endpoint(provider=args.provider)
    if args.provider == "live":
        try:
            endpoint.token()
        except reportprep.MissingTokenError as exc:
            raise UsageError(str(exc)) from None
    cache = reportprep.ReportCache(args.cache) if args.cache else None
    out = Path(cfg.paths["out"])
    files = sorted(src.glob("*.txt"))
    if not files:
        raise UsageError(f"no .txt reports in {src}")
    hits = 0
    for f in files:
        try:
            rec = reportprep.clean_report(f.read_text(encoding="utf-8"), prompt, endpoint,
                                          case_id=f.stem, cache=cache)
        except ValueError as exc:
            raise reportprep.ContentError(f"{f.name}: {exc}") from None
        hits += rec.from_cache
        _write_text(out / f"{f.stem}.txt", rec.cleaned + "\n")
        _write_text(out / "records" / f"{f.stem}.json", rec.to_json() + "\n")
    print(f"cleaned {len(files)} reports with provider {args.provider}; "
          f"{hits}/{len(files)} served from cache")
    return EXIT_OK


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rasa", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if manifest:
            p.add_argument("--manifest", help="cohort manifest.json")
        return p

    common(sub.add_parser("synth", help="generate a synthetic cohort"), manifest=False)

    p = common(sub.add_parser("train", help="train a teacher or student for one trial"))
    p.add_argument("--stage", choices=STAGES, default="teacher")
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--teacher", help="teacher checkpoint (student stage)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--p-aug", dest="p_aug", type=float)
    p.add_argument("--lambda", dest="lam", type=float)

    p = common(sub.add_parser("evaluate", help="test CI over the five trials"))
    p.add_argument("--stage", choices=STAGES + ("oracle",), default="teacher")
    p.add_argument("--checkpoints", nargs="+", help="one checkpoint per trial")
    p.add_argument("--teachers", nargs="+", help="teacher per trial (student stage)")
    p.add_argument("--runs", help="directory holding {stage}_trial{k}.rasc (default: --out)")
    p.add_argument("--gamma", type=float)

    p = common(sub.add_parser("km", help="median-split Kaplan-Meier analysis"))
    p.add_argument("--stage", choices=STAGES + ("oracle",), default="teacher")
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--teacher")
    p.add_argument("--runs", help="directory holding {stage}_trial{k}.rasc (default: --out)")
    p.add_argument("--gamma", type=float)

    p = common(sub.add_parser("simmap", help="text-patch similarity map for one case"))
    p.add_argument("--checkpoint", help="teacher checkpoint")
    p.add_argument("--case-id", dest="case_id", required=True)
    p.add_argument("--gammas", default="-1,0.25,0.5,0.75")

    p = common(sub.add_parser("clean-reports", help="clean raw pathology reports"),
               manifest=False)
    p.add_argument("--input", required=True, help="directory of .txt reports")
    p.add_argument("--prompt", help="prompt JSON (system, task, keywords, exclusions)")
    p.add_argument("--provider", choices=("mock", "live"), default="mock")
    p.add_argument("--cache", help="cache directory")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "km": cmd_km,
            "simmap": cmd_simmap, "clean-reports": cmd_clean_reports}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, distill.TrainConfigError,
            synthgen.SynthConfigError) as exc:
        print(f"rasa {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateError as exc:
        print(f"rasa {args.command}: degenerate statistic: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, ManifestError, BagFormatError, CheckpointError,
            reportprep.TransportError, reportprep.ContentError) as exc:
        print(f"rasa {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

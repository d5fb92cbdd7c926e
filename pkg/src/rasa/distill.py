"""Two-stage teacher/student training with text-guided patch sampling and
risk-aware mixup."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import numcore as nc
from .datamodel import CohortManifest
from .survstats import UndefinedStatisticError, concordance_index, cox_loss, kl_loss
from .tff import TffConfig, TffParams, forward, init_params, project_text

log = logging.getLogger(__name__)

CONVENTIONS = ("label-consistent", "paper-literal")
_STREAM_SHUFFLE = 101
_STREAM_AUG = 202


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.5
    p_aug: float = 0.7
    lam: float = 1e-2
    lr: float = 1e-5
    epochs: int = 60
    batch_size: int = 8
    p_mix_alpha: Optional[float] = None
    convention: str = "label-consistent"
    seed: int = 0
    tff: TffConfig = field(default_factory=TffConfig)

    def validate(self) -> list:
        errs = []
        if not -1.0 <= self.gamma <= 1.0:
            errs.append(f"gamma: must lie in [-1, 1], got {self.gamma}")
        if not 0.0 <= self.p_aug <= 1.0:
            errs.append(f"p_aug: must lie in [0, 1], got {self.p_aug}")
        if self.lam < 0:
            errs.append(f"lam: must be >= 0, got {self.lam}")
        if self.lr < 0:
            errs.append(f"lr: must be >= 0, got {self.lr}")
        if self.epochs < 1:
            errs.append(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errs.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.p_mix_alpha is not None and self.p_mix_alpha <= 0:
            errs.append(f"p_mix_alpha: must be > 0, got {self.p_mix_alpha}")
        if self.convention not in CONVENTIONS:
            errs.append(f"convention: must be one of {CONVENTIONS}, got {self.convention!r}")
        return errs

    def checked(self) -> "TrainConfig":
        errs = self.validate()
        if errs:
            raise TrainConfigError("; ".join(errs))
        return self


# ------------------------------------------------------------------ cohort in memory

@dataclass
class CaseData:
    id: str
    text: np.ndarray
    patches: np.ndarray
    keyword_indices: list
    time: float
    event: float
    coords: Optional[np.ndarray] = None


def load_cohort(manifest: CohortManifest) -> dict:
    out = {}
    for c in manifest.cases:
        text, patches = manifest.load_bags(c)
        out[c.id] = CaseData(c.id, text.matrix, patches.matrix, list(c.keyword_token_indices),
                             c.label.time, c.label.event, patches.coords)
    return out


# ------------------------------------------------------------------ sampling

def key_text_feature(t_proj, keyword_indices: Sequence[int]) -> np.ndarray:
    """Mean of the keyword rows of the projected text (all rows if none)."""
    t = np.asarray(getattr(t_proj, "data", t_proj), dtype=np.float64)
    idx = list(keyword_indices)
    if not idx:
        warnings.warn("no keyword tokens; using the mean of all text tokens", stacklevel=2)
        return t.mean(axis=0)
    return t[idx].mean(axis=0)


def cosine_to_key(patches: np.ndarray, key: np.ndarray) -> np.ndarray:
    key = np.asarray(key, dtype=np.float64).reshape(-1)
    kn = np.linalg.norm(key)
    if kn == 0:
        raise ValueError("key feature has zero norm")
    norms = np.linalg.norm(patches, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm patch rows get similarity 0", stacklevel=2)
    sims = np.zeros(len(patches))
    sims[~zero] = (patches[~zero] @ key) / (norms[~zero] * kn)
    return np.clip(sims, -1.0, 1.0)


@dataclass(frozen=True)
class SampleResult:
    kept: np.ndarray
    similarity: np.ndarray
    valid: np.ndarray


def sample_patches(patches, key, gamma: float) -> SampleResult:
    """Keep patches whose cosine similarity to ``key`` is at least ``gamma``.

    If none pass, the single most similar patch is kept. Zero-norm patches are
    never kept.
    """
    patches = np.asarray(getattr(patches, "matrix", patches), dtype=np.float64)
    if patches.ndim != 2 or len(patches) == 0:
        raise ValueError("sample_patches needs a non-empty bag")
    sims = cosine_to_key(patches, key)
    valid = np.linalg.norm(patches, axis=1) > 0
    if not valid.any():
        raise ValueError("every patch row has zero norm")
    kept = np.flatnonzero(valid & (sims >= gamma))
    if kept.size == 0:
        masked = np.where(valid, sims, -np.inf)
        kept = np.array([int(np.argmax(masked))])
    return SampleResult(kept, sims, valid)


def sampling_view(teacher: TffParams, patches: np.ndarray) -> np.ndarray:
    """Patch rows mapped into the model width by the teacher's input projection.

    The key text feature lives in the projected text space, so patches are
    compared after the matching patch projection rather than in raw form.
    """
    return nc.linear(nc.Tensor(patches), teacher["patch_proj.W"], teacher["patch_proj.b"]).data


def teacher_similarity(teacher: TffParams, case: CaseData) -> tuple[np.ndarray, np.ndarray]:
    """(key text feature, per-patch cosine similarities) from the teacher."""
    t_proj = project_text(teacher, case.text).data
    key = key_text_feature(t_proj, case.keyword_indices)
    return key, cosine_to_key(sampling_view(teacher, case.patches), key)


def sample_case(teacher: TffParams, case: CaseData, gamma: float) -> SampleResult:
    t_proj = project_text(teacher, case.text).data
    key = key_text_feature(t_proj, case.keyword_indices)
    return sample_patches(sampling_view(teacher, case.patches), key, gamma)


def export_similarity_map(case: CaseData, teacher: TffParams, gammas: Sequence[float]) -> list:
    if case.coords is None:
        raise ValueError(f"case {case.id!r} has no patch coordinates")
    t_proj = project_text(teacher, case.text).data
    key = key_text_feature(t_proj, case.keyword_indices)
    view = sampling_view(teacher, case.patches)
    results = [sample_patches(view, key, g) for g in gammas]
    sims = results[0].similarity if results else cosine_to_key(view, key)
    kept_sets = [set(res.kept.tolist()) for res in results]
    records = []
    for j in range(len(case.patches)):
        rec = {"case_id": case.id, "patch_index": j,
               "x": int(case.coords[j, 0]), "y": int(case.coords[j, 1]),
               "similarity": float(sims[j])}
        for g, kept in zip(gammas, kept_sets):
            rec[f"kept@{g:g}"] = j in kept
        records.append(rec)
    return records


# ------------------------------------------------------------------ risk labels

@dataclass(frozen=True)
class RiskLabeling:
    ids: list
    scores: np.ndarray
    threshold: float
    bits: np.ndarray

    def bit(self, case_id: str) -> int:
        return int(self.bits[self.ids.index(case_id)])


def risk_bits(s: np.ndarray) -> tuple[float, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)
    threshold = float(np.median(s))
    return threshold, (s >= threshold).astype(np.int8)


def label_risk(teacher: TffParams, cases: Sequence[CaseData]) -> RiskLabeling:
    if len(cases) < 2:
        raise ValueError("risk labeling needs at least two cases")
    y = np.array([forward(teacher, c.text, c.patches).score for c in cases])
    s = 1.0 / (1.0 + np.exp(-y))
    threshold, bits = risk_bits(s)
    return RiskLabeling([c.id for c in cases], s, threshold, bits)


# ------------------------------------------------------------------ mixup

@dataclass
class SampledCase:
    id: str
    text: np.ndarray
    keyword_indices: list
    patches: np.ndarray
    time: float
    event: float


@dataclass
class MixedSample:
    text: np.ndarray
    keyword_indices: list
    patches: np.ndarray
    time: float
    event: float
    parents: tuple
    p_mix: float
    text_parent: str
    augmented: bool = True


def _take(n_total: int, frac: float) -> int:
    return min(n_total, max(0, math.ceil(frac * n_total - 1e-9)))


def mixup(a: SampledCase, b: SampledCase, r_a: int, r_b: int, p_mix: float,
          convention: str, rng: np.random.Generator) -> MixedSample:
    if not 0.0 <= p_mix <= 1.0:
        raise ValueError(f"p_mix must lie in [0, 1], got {p_mix}")
    if len(a.patches) == 0 or len(b.patches) == 0:
        raise ValueError("mixup needs non-empty sampled bags in both parents")
    if convention == "label-consistent":
        n_a, n_b = _take(len(a.patches), 1.0 - p_mix), _take(len(b.patches), p_mix)
    elif convention == "paper-literal":
        n_a, n_b = _take(len(a.patches), p_mix), _take(len(b.patches), 1.0 - p_mix)
    else:
        raise ValueError(f"unknown mixup convention {convention!r}")
    pick_a = np.sort(rng.choice(len(a.patches), size=n_a, replace=False))
    pick_b = np.sort(rng.choice(len(b.patches), size=n_b, replace=False))
    patches = np.concatenate([a.patches[pick_a], b.patches[pick_b]], axis=0)
    text_src = a if r_a == r_b or r_a > r_b else b
    return MixedSample(
        text=text_src.text, keyword_indices=list(text_src.keyword_indices), patches=patches,
        time=(1.0 - p_mix) * a.time + p_mix * b.time,
        event=(1.0 - p_mix) * a.event + p_mix * b.event,
        parents=(a.id, b.id), p_mix=float(p_mix), text_parent=text_src.id)


# ------------------------------------------------------------------ training

@dataclass
class Slot:
    text: np.ndarray
    patches: np.ndarray
    time: float
    event: float
    teacher_y: Optional[float] = None


@dataclass
class TrainResult:
    params: TffParams
    best_epoch: int
    best_val_ci: float
    history: list

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.history:
                fh.write(json.dumps(_json_safe(rec), sort_keys=True) + "\n")


def _json_safe(rec: dict) -> dict:
    """NaN (undefined CI or loss) is written as null."""
    return {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in rec.items()}


def scores_for(params: TffParams, items: Sequence[tuple]) -> np.ndarray:
    return np.array([forward(params, text, patches).score for text, patches in items])


def _safe_ci(scores, times, events) -> float:
    try:
        return concordance_index(scores, times, events)
    except UndefinedStatisticError:
        return float("nan")


def _has_cox_terms(times: np.ndarray, events: np.ndarray) -> bool:
    at_risk = (times[None, :] >= times[:, None]).sum(axis=1)
    return bool(np.any((events > 0) & (at_risk > 1)))


def _batch_loss(params: TffParams, slots: Sequence[Slot], lam: float):
    times = np.array([s.time for s in slots])
    events = np.array([s.event for s in slots])
    ys = [forward(params, s.text, s.patches).y for s in slots]
    terms = []
    if _has_cox_terms(times, events):
        terms.append(cox_loss(nc.stack_scalars(ys), times, events))
    guided = [(y, s.teacher_y) for y, s in zip(ys, slots) if s.teacher_y is not None]
    if lam > 0 and guided:
        kl = nc.sum_all(nc.stack_scalars([kl_loss(y, t) for y, t in guided]))
        terms.append(nc.scale(kl, lam / len(guided)))
    if not terms:
        return None
    loss = terms[0]
    for t in terms[1:]:
        loss = nc.add(loss, t)
    return loss


def _eval_loss(params: TffParams, slots: Sequence[Slot], batch_size: int) -> float:
    vals = []
    for k in range(0, len(slots), batch_size):
        batch = slots[k:k + batch_size]
        t = np.array([s.time for s in batch])
        e = np.array([s.event for s in batch])
        if not _has_cox_terms(t, e):
            continue
        y = nc.Tensor([forward(params, s.text, s.patches).score for s in batch])
        vals.append(cox_loss(y, t, e).item())
    return float(np.mean(vals)) if vals else float("nan")


def fit(init: TffParams, train_slots: Sequence[Slot], val_items: Sequence[tuple],
        val_times, val_events, config: TrainConfig, stage: str,
        make_slot: Optional[Callable] = None, log_path=None,
        on_epoch: Optional[Callable] = None) -> TrainResult:
    """Mini-batch Adam on the Cox loss (+ KL on guided slots), keeping the
    epoch with the best validation C-index.

    ``make_slot(i, rng)`` may replace training slot ``i`` at batch assembly
    (used for mixup); it receives a per-epoch generator.
    """
    config.checked()
    params = init.copy()
    state = nc.adam_init(params.values())
    shuffle_rng = np.random.default_rng([config.seed, _STREAM_SHUFFLE])
    val_times = np.asarray(val_times, dtype=np.float64)
    val_events = np.asarray(val_events, dtype=np.float64)
    history = [{"stage": stage, "epoch": 0, "train_loss": None,
                "eval_loss": _eval_loss(params, train_slots, config.batch_size),
                "val_ci": _safe_ci(scores_for(params, val_items), val_times, val_events),
                "skipped_batches": 0}]
    best = (-math.inf, 0, params.copy())
    n = len(train_slots)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        aug_rng = np.random.default_rng([config.seed, _STREAM_AUG, epoch])
        losses, skipped = [], 0
        for k in range(0, n, config.batch_size):
            idx = order[k:k + config.batch_size]
            slots = [make_slot(int(i), aug_rng) if make_slot else train_slots[i] for i in idx]
            params.zero_grad()
            with nc.Tape() as tape:
                loss = _batch_loss(params, slots, config.lam)
            if loss is None:
                skipped += 1
                log.debug("epoch %d: batch at %d has no loss terms, skipped", epoch, k)
                continue
            nc.backward(tape, loss)
            nc.adam_step(params.values(), [p.grad for p in params.values()], state, config.lr)
            losses.append(loss.item())
        val_ci = _safe_ci(scores_for(params, val_items), val_times, val_events)
        rec = {"stage": stage, "epoch": epoch,
               "train_loss": float(np.mean(losses)) if losses else None,
               "eval_loss": _eval_loss(params, train_slots, config.batch_size),
               "val_ci": val_ci, "skipped_batches": skipped}
        history.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, params)
        log.info("%s epoch %d loss %s val CI %.4f", stage, epoch, rec["train_loss"], val_ci)
        if not math.isnan(val_ci) and val_ci > best[0]:
            best = (val_ci, epoch, params.copy())
    if best[1] == 0:
        best = (float("nan"), config.epochs, params.copy())
    result = TrainResult(best[2], best[1], best[0], history)
    if log_path is not None:
        result.write_log(log_path)
    return result


def _split_cases(manifest: CohortManifest, cohort: dict, trial: int):
    if not 0 <= trial < len(manifest.splits):
        raise ValueError(f"trial must lie in [0, {len(manifest.splits) - 1}], got {trial}")
    s = manifest.splits[trial]
    return ([cohort[i] for i in s.train], [cohort[i] for i in s.val], [cohort[i] for i in s.test])


def train_teacher(manifest: CohortManifest, trial: int, config: TrainConfig,
                  cohort: Optional[dict] = None, log_path=None,
                  on_epoch: Optional[Callable] = None) -> TrainResult:
    cohort = cohort if cohort is not None else load_cohort(manifest)
    train, val, _ = _split_cases(manifest, cohort, trial)
    slots = [Slot(c.text, c.patches, c.time, c.event) for c in train]
    init = init_params(config.tff)
    return fit(init, slots, [(c.text, c.patches) for c in val],
               [c.time for c in val], [c.event for c in val], config, "teacher",
               log_path=log_path, on_epoch=on_epoch)


class SampledCohort:
    """Teacher-derived sampled patch sets, risk bits and guidance scores."""

    def __init__(self, teacher: TffParams, cohort: dict, train_ids: Sequence[str],
                 gamma: float):
        self.teacher = teacher
        self.gamma = gamma
        self.cases: dict = {}
        for cid, c in cohort.items():
            res = sample_case(teacher, c, gamma)
            self.cases[cid] = SampledCase(cid, c.text, c.keyword_indices,
                                          c.patches[res.kept], c.time, c.event)
        self.risk = label_risk(teacher, [cohort[i] for i in train_ids])
        self._teacher_y: dict = {}

    def teacher_score(self, cid: str) -> float:
        if cid not in self._teacher_y:
            s = self.cases[cid]
            self._teacher_y[cid] = forward(self.teacher, s.text, s.patches).score
        return self._teacher_y[cid]

    def item(self, cid: str) -> tuple:
        s = self.cases[cid]
        return s.text, s.patches


def _draw_p_mix(config: TrainConfig, rng: np.random.Generator) -> float:
    if config.p_mix_alpha is None:
        return float(rng.uniform())
    return float(rng.beta(config.p_mix_alpha, config.p_mix_alpha))


def train_student(manifest: CohortManifest, trial: int, teacher: TffParams,
                  config: TrainConfig, cohort: Optional[dict] = None, log_path=None,
                  sampled: Optional[SampledCohort] = None) -> TrainResult:
    cohort = cohort if cohort is not None else load_cohort(manifest)
    train, val, _ = _split_cases(manifest, cohort, trial)
    train_ids = [c.id for c in train]
    sampled = sampled or SampledCohort(teacher, cohort, train_ids, config.gamma)
    guide = config.lam > 0
    slots = [Slot(*sampled.item(cid), cohort[cid].time, cohort[cid].event,
                  sampled.teacher_score(cid) if guide else None) for cid in train_ids]
    n = len(train_ids)

    def make_slot(i: int, rng: np.random.Generator) -> Slot:
        if n < 2 or not rng.random() < config.p_aug:
            return slots[i]
        j = int(rng.integers(0, n - 1))
        j += j >= i
        a, b = sampled.cases[train_ids[i]], sampled.cases[train_ids[j]]
        mixed = mixup(a, b, sampled.risk.bit(a.id), sampled.risk.bit(b.id),
                      _draw_p_mix(config, rng), config.convention, rng)
        return Slot(mixed.text, mixed.patches, mixed.time, mixed.event, None)

    make = make_slot if config.p_aug > 0 else None
    return fit(teacher, slots, [sampled.item(c.id) for c in val],
               [c.time for c in val], [c.event for c in val], config, "student",
               make_slot=make, log_path=log_path)


def train_plain_sampled(manifest: CohortManifest, trial: int, teacher: TffParams,
                        config: TrainConfig, cohort: Optional[dict] = None) -> TrainResult:
    """Cox-only training on teacher-sampled bags, warm-started from the teacher."""
    cohort = cohort if cohort is not None else load_cohort(manifest)
    train, val, _ = _split_cases(manifest, cohort, trial)
    sampled = SampledCohort(teacher, cohort, [c.id for c in train], config.gamma)
    slots = [Slot(*sampled.item(c.id), c.time, c.event) for c in train]
    return fit(teacher, slots, [sampled.item(c.id) for c in val],
               [c.time for c in val], [c.event for c in val], replace(config, lam=0.0),
               "plain")

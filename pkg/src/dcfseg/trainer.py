"""Competition-driven training loop with an EMA teacher and two students.

Each iteration: both students predict their own perturbed views, the
supervised loss is computed on the labeled items, cross-pseudo supervision
couples the students on unlabeled items, a competition on the labeled batch
picks a winner, the teacher (lazily run on clean unlabeled inputs) mentors
whichever student the tutoring policy designates, both students take one
AdamW step from a single combined backward pass, and the winner's post-step
parameters are blended into the teacher by exponential moving average:

    teacher = alpha * teacher + (1 - alpha) * winner

Two baseline modes share the machinery: a plain mean-teacher (one student,
teacher-consistency on unlabeled data) and supervised-only (one student,
labeled items only).  The teacher is never touched by the optimizer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import segnet
from .autodiff import ParamVector, ShapeError, Tape, Tensor4, collect_grads, slice_batch
from .competition import CompetitionConfig, CompetitionOutcome, compete
from .diagnostics import CsvLogger, TraceRecord, prediction_distance, weight_distance
from .losses import (
    LossReport,
    RampSchedule,
    harden,
    ramp_lambda,
    seg_loss,
    total_loss,
)
from .metrics import MetricReport, dice_score, evaluate_mask
from .synthdata import AugTransform, BatchSampler, Dataset, SegBatch

log = logging.getLogger("dcfseg")

MODES = ("dcf", "mean_teacher", "supervised")
TUTORING_POLICIES = ("no_tutoring", "tutor_both", "alternate", "tutor_winner", "tutor_loser")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    """Raised when a gradient or loss component stops being finite."""


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamVector) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in params.arrays],
                   v=[np.zeros_like(a) for a in params.arrays])


def adamw_step(params: ParamVector, grads: list[np.ndarray], state: AdamState,
               lr: float, weight_decay: float) -> tuple[ParamVector, AdamState]:
    """One decoupled-weight-decay Adam update, in place, with bias correction."""
    if len(grads) != len(params.arrays):
        raise ShapeError("adamw_step: gradient count does not match parameter segments")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for name, p, g, m, v in zip(params.names, params.arrays, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"adamw_step: gradient shape {g.shape} != {p.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in segment {name!r}")
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay:
            update = update + weight_decay * p
        p -= lr * update
    return params, state


def ema_update(theta_teacher: ParamVector, theta_winner: ParamVector, alpha: float) -> ParamVector:
    """teacher <- alpha * teacher + (1 - alpha) * winner, elementwise.

    Returns a fresh vector; the degenerate decays copy exactly (alpha=1 keeps
    the teacher bit-identical, alpha=0 adopts the winner bit-identically).
    """
    if not theta_teacher.same_structure(theta_winner):
        raise ShapeError("ema_update: teacher and winner are structurally different")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return theta_teacher.copy()
    if alpha == 0.0:
        return theta_winner.copy()
    blended = [alpha * t + (1.0 - alpha) * w
               for t, w in zip(theta_teacher.arrays, theta_winner.arrays)]
    return ParamVector(theta_teacher.names, blended)


@dataclass
class TrainerState:
    """Everything one run carries between iterations (sampling randomness
    lives in the BatchSampler)."""

    mode: str
    theta_s1: ParamVector
    adam_s1: AdamState
    theta_t: Optional[ParamVector] = None
    theta_s2: Optional[ParamVector] = None
    adam_s2: Optional[AdamState] = None
    iteration: int = 0
    previous_winner: Optional[int] = None
    alpha: float = 0.99


@dataclass
class StepReport:
    """Losses, competition outcome and diagnostics for one iteration."""

    lam: float
    report_s1: LossReport
    report_s2: Optional[LossReport]
    outcome: Optional[CompetitionOutcome]
    dice_s1: float
    dice_s2: float
    unsup_skipped: bool
    wd_t_s1: float = 0.0
    wd_t_s2: float = 0.0
    pd_t_s1: float = 0.0
    pd_t_s2: float = 0.0
    pd_s1_s2: float = 0.0


@dataclass
class GradBundle:
    """Per-student gradients plus the scalar losses they came from."""

    grads_s1: list[np.ndarray]
    grads_s2: Optional[list[np.ndarray]]
    l_seg_s1: float
    l_seg_s2: float
    l_cps: float
    l_ms_s1: float
    l_ms_s2: float
    lam: float
    outcome: Optional[CompetitionOutcome]
    dice_s1: float
    dice_s2: float
    unsup_skipped: bool
    teacher_probs: Optional[np.ndarray]
    probs_s1_unlabeled: Optional[np.ndarray]
    probs_s2_unlabeled: Optional[np.ndarray]


def _mentoring_recipients(policy: str, outcome: CompetitionOutcome, iteration: int) -> tuple[int, ...]:
    if policy == "no_tutoring":
        return ()
    if policy == "tutor_both":
        return (1, 2)
    if policy == "alternate":
        return ((iteration % 2) + 1,)
    if policy == "tutor_winner":
        return (outcome.winner,)
    if policy == "tutor_loser":
        return (outcome.loser,)
    raise ValueError(f"unknown tutoring policy {policy!r}")


def _mean_dice(probs: np.ndarray, masks: np.ndarray) -> float:
    preds = probs.argmax(axis=1).astype(bool)
    return float(np.mean([dice_score(p, m) for p, m in zip(preds, masks)]))


def _transport_masks(masks: np.ndarray, source: list[AugTransform],
                     target: list[AugTransform]) -> np.ndarray:
    """Move per-item masks from one view's geometry into another's."""
    return np.stack([t.apply_mask(s.invert_mask(m))
                     for m, s, t in zip(masks, source, target)])


def _masks_into_views(masks: np.ndarray, target: list[AugTransform]) -> np.ndarray:
    return np.stack([t.apply_mask(m) for m, t in zip(masks, target)])


def _probs_to_clean(probs: np.ndarray, source: list[AugTransform]) -> np.ndarray:
    return np.stack([s.invert_probs(p) for p, s in zip(probs, source)])


def dcf_gradients(state: TrainerState, batch: SegBatch, cfg, tutoring: Optional[str] = None) -> GradBundle:
    """Forward both students, compete, and backpropagate the combined objective.

    Pure given (parameters, batch, iteration, previous winner): no state is
    mutated, so callers can compare gradient bundles across tutoring policies
    on identical inputs.
    """
    if not batch.labeled:
        raise ValueError("train_step requires at least one labeled item (competition needs ground truth)")
    tutoring = cfg.tutoring if tutoring is None else tutoring
    schedule = RampSchedule(lambda_max=cfg.lambda_max, ramp_iters=cfg.ramp_iters)
    lam = ramp_lambda(state.iteration, schedule)
    n_l, n_u = len(batch.labeled), len(batch.unlabeled)

    tape = Tape()
    leaves1 = state.theta_s1.watch_all(tape)
    leaves2 = state.theta_s2.watch_all(tape)
    probs1 = segnet.forward_leaves(leaves1, Tensor4(batch.stack_views(1)))
    probs2 = segnet.forward_leaves(leaves2, Tensor4(batch.stack_views(2)))
    masks1, masks2 = batch.labeled_masks(1), batch.labeled_masks(2)

    probs1_l = slice_batch(probs1, 0, n_l) if n_u else probs1
    probs2_l = slice_batch(probs2, 0, n_l) if n_u else probs2
    l_seg_s1 = seg_loss(probs1_l, masks1)
    l_seg_s2 = seg_loss(probs2_l, masks2)

    outcome = compete(probs1_l.data, probs2_l.data, masks1, cfg.competition_config,
                      previous_winner=state.previous_winner, truths_s2=masks2)

    combined = l_seg_s1 + l_seg_s2
    l_cps_val = 0.0
    ms_vals = {1: 0.0, 2: 0.0}
    teacher_probs = None
    p1u_clean = p2u_clean = None
    if n_u:
        probs1_u = slice_batch(probs1, n_l, n_l + n_u)
        probs2_u = slice_batch(probs2, n_l, n_l + n_u)
        tf1, tf2 = batch.unlabeled_transforms(1), batch.unlabeled_transforms(2)
        # pseudo-labels are transported into the supervised side's view
        # geometry so the pixelwise comparison happens on a common grid
        l_cps = (seg_loss(probs1_u, _transport_masks(harden(probs2_u), tf2, tf1))
                 + seg_loss(probs2_u, _transport_masks(harden(probs1_u), tf1, tf2)))
        l_cps_val = l_cps.item()
        unsup = l_cps
        recipients = _mentoring_recipients(tutoring, outcome, state.iteration)
        if recipients:
            # teacher runs lazily, on the clean unlabeled inputs, pre-EMA
            teacher = segnet.forward(state.theta_t, Tensor4(batch.clean_unlabeled()))
            teacher_probs = teacher.data
            teacher_hard = harden(teacher)
            for r in recipients:
                student_u = probs1_u if r == 1 else probs2_u
                target = _masks_into_views(teacher_hard, tf1 if r == 1 else tf2)
                term = seg_loss(student_u, target)
                ms_vals[r] = term.item()
                unsup = unsup + term
        combined = combined + lam * unsup
        p1u_clean = _probs_to_clean(probs1_u.data, tf1)
        p2u_clean = _probs_to_clean(probs2_u.data, tf2)

    tape.backward(combined)
    return GradBundle(
        grads_s1=collect_grads(leaves1),
        grads_s2=collect_grads(leaves2),
        l_seg_s1=l_seg_s1.item(),
        l_seg_s2=l_seg_s2.item(),
        l_cps=l_cps_val,
        l_ms_s1=ms_vals[1],
        l_ms_s2=ms_vals[2],
        lam=lam,
        outcome=outcome,
        dice_s1=_mean_dice(probs1_l.data, masks1),
        dice_s2=_mean_dice(probs2_l.data, masks2),
        unsup_skipped=n_u == 0,
        teacher_probs=teacher_probs,
        probs_s1_unlabeled=p1u_clean,
        probs_s2_unlabeled=p2u_clean,
    )


def _single_student_gradients(state: TrainerState, batch: SegBatch, cfg,
                              with_consistency: bool) -> GradBundle:
    if not batch.labeled:
        raise ValueError("train_step requires at least one labeled item")
    schedule = RampSchedule(lambda_max=cfg.lambda_max, ramp_iters=cfg.ramp_iters)
    lam = ramp_lambda(state.iteration, schedule) if with_consistency else 0.0
    n_l, n_u = len(batch.labeled), len(batch.unlabeled)

    tape = Tape()
    leaves = state.theta_s1.watch_all(tape)
    probs = segnet.forward_leaves(leaves, Tensor4(batch.stack_views(1)))
    masks = batch.labeled_masks(1)
    probs_l = slice_batch(probs, 0, n_l) if n_u else probs
    l_seg = seg_loss(probs_l, masks)

    combined = l_seg
    l_cons_val = 0.0
    teacher_probs = None
    p1u = None
    if with_consistency and n_u:
        probs_u = slice_batch(probs, n_l, n_l + n_u)
        tf1 = batch.unlabeled_transforms(1)
        teacher = segnet.forward(state.theta_t, Tensor4(batch.clean_unlabeled()))
        teacher_probs = teacher.data
        l_cons = seg_loss(probs_u, _masks_into_views(harden(teacher), tf1))
        l_cons_val = l_cons.item()
        combined = combined + lam * l_cons
        p1u = _probs_to_clean(probs_u.data, tf1)

    tape.backward(combined)
    return GradBundle(
        grads_s1=collect_grads(leaves),
        grads_s2=None,
        l_seg_s1=l_seg.item(),
        l_seg_s2=0.0,
        l_cps=0.0,
        l_ms_s1=l_cons_val,
        l_ms_s2=0.0,
        lam=lam,
        outcome=None,
        dice_s1=_mean_dice(probs_l.data, masks),
        dice_s2=0.0,
        unsup_skipped=with_consistency and n_u == 0,
        teacher_probs=teacher_probs,
        probs_s1_unlabeled=p1u,
        probs_s2_unlabeled=None,
    )


def train_step(state: TrainerState, batch: SegBatch, cfg) -> tuple[TrainerState, StepReport]:
    """Advance one iteration; mutates and returns the state.

    Student parameters update in place via AdamW; the teacher is replaced by
    a fresh EMA blend (never optimizer-touched), so references captured
    before the call still see the pre-update teacher.
    """
    if state.mode == "dcf":
        bundle = dcf_gradients(state, batch, cfg)
        adamw_step(state.theta_s1, bundle.grads_s1, state.adam_s1, cfg.learning_rate, cfg.weight_decay)
        adamw_step(state.theta_s2, bundle.grads_s2, state.adam_s2, cfg.learning_rate, cfg.weight_decay)
        winner = bundle.outcome.winner
        if state.iteration >= cfg.ema_warmup:
            theta_w = state.theta_s1 if winner == 1 else state.theta_s2
            state.theta_t = ema_update(state.theta_t, theta_w, state.alpha)
        state.previous_winner = winner
    elif state.mode == "mean_teacher":
        bundle = _single_student_gradients(state, batch, cfg, with_consistency=True)
        adamw_step(state.theta_s1, bundle.grads_s1, state.adam_s1, cfg.learning_rate, cfg.weight_decay)
        if state.iteration >= cfg.ema_warmup:
            state.theta_t = ema_update(state.theta_t, state.theta_s1, state.alpha)
    elif state.mode == "supervised":
        bundle = _single_student_gradients(state, batch, cfg, with_consistency=False)
        adamw_step(state.theta_s1, bundle.grads_s1, state.adam_s1, cfg.learning_rate, cfg.weight_decay)
    else:
        raise ValueError(f"unknown mode {state.mode!r}")

    report_s1 = total_loss(bundle.l_seg_s1, bundle.l_cps, bundle.l_ms_s1, bundle.lam)
    report_s2 = (total_loss(bundle.l_seg_s2, bundle.l_cps, bundle.l_ms_s2, bundle.lam)
                 if state.mode == "dcf" else None)

    report = StepReport(
        lam=bundle.lam,
        report_s1=report_s1,
        report_s2=report_s2,
        outcome=bundle.outcome,
        dice_s1=bundle.dice_s1,
        dice_s2=bundle.dice_s2,
        unsup_skipped=bundle.unsup_skipped,
    )
    if state.theta_t is not None:
        report.wd_t_s1 = weight_distance(state.theta_t, state.theta_s1)
        if state.theta_s2 is not None:
            report.wd_t_s2 = weight_distance(state.theta_t, state.theta_s2)
    if bundle.teacher_probs is not None:
        if bundle.probs_s1_unlabeled is not None:
            report.pd_t_s1 = prediction_distance(bundle.teacher_probs, bundle.probs_s1_unlabeled)
        if bundle.probs_s2_unlabeled is not None:
            report.pd_t_s2 = prediction_distance(bundle.teacher_probs, bundle.probs_s2_unlabeled)
    if bundle.probs_s1_unlabeled is not None and bundle.probs_s2_unlabeled is not None:
        report.pd_s1_s2 = prediction_distance(bundle.probs_s1_unlabeled, bundle.probs_s2_unlabeled)

    state.iteration += 1
    return state, report


# ---------------------------------------------------------------------------
# run orchestration


def derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence(entropy=(seed, tag)).generate_state(1)[0])


def init_state(cfg) -> TrainerState:
    """Fresh random networks and optimizer state.

    The two students share their (randomly drawn) initial vector: the
    teacher blends student parameters elementwise, which is only a
    function-space average while both students live in one parameter basin.
    Independently initialized students occupy incompatible bases and their
    blend is not a working network.  The perturbed views and the cross
    supervision separate the twins from the first step on.  The teacher is
    drawn independently so it starts at a healthy distance from both.
    """
    theta_s1 = segnet.init_params(derive_seed(cfg.seed, 1))
    state = TrainerState(mode=cfg.mode, theta_s1=theta_s1,
                         adam_s1=AdamState.zeros_like(theta_s1), alpha=cfg.alpha)
    if cfg.mode == "dcf":
        state.theta_s2 = theta_s1.copy()
        state.adam_s2 = AdamState.zeros_like(state.theta_s2)
        state.theta_t = segnet.init_params(derive_seed(cfg.seed, 3))
    elif cfg.mode == "mean_teacher":
        state.theta_t = segnet.init_params(derive_seed(cfg.seed, 3))
    return state


def final_selection(state: TrainerState, labeled: list[tuple[np.ndarray, np.ndarray]],
                    competition: CompetitionConfig) -> tuple[str, ParamVector]:
    """The network a run is judged by.

    For the competitive mode this reruns the competition once over the whole
    clean labeled training set (the per-iteration winner rides on a tiny
    batch and is too noisy for final model selection); the teacher is a
    diagnostic aggregate of two independently parameterized students, so the
    selected student is the run's model.  The baselines are judged by their
    EMA teacher (mean_teacher) or their only student (supervised).
    """
    if state.mode == "dcf":
        images = np.stack([img for img, _ in labeled])
        truths = np.stack([m for _, m in labeled])
        p1 = segnet.predict_probs(state.theta_s1, images)
        p2 = segnet.predict_probs(state.theta_s2, images)
        outcome = compete(p1, p2, truths, competition, previous_winner=state.previous_winner)
        winner = outcome.winner
        return f"student{winner}", (state.theta_s1 if winner == 1 else state.theta_s2)
    if state.theta_t is not None:
        return "teacher", state.theta_t
    return "student1", state.theta_s1


@dataclass
class EvalResult:
    reports: list[MetricReport]
    mean_dice: float
    mean_jaccard: float
    mean_hd95: Optional[float]
    mean_asd: Optional[float]
    undefined_count: int


def evaluate_params(params: ParamVector, items: list[tuple[np.ndarray, np.ndarray]],
                    chunk: int = 8) -> EvalResult:
    """Per-image metrics of hard predictions against ground truth."""
    reports: list[MetricReport] = []
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        images = np.stack([img for img, _ in part])
        preds = segnet.predict_masks(params, images)
        for pred, (_, truth) in zip(preds, part):
            reports.append(evaluate_mask(pred, truth))
    return summarize_reports(reports)


def oracle_eval(items: list[tuple[np.ndarray, np.ndarray]]) -> EvalResult:
    """Ground truth scored against itself (eval-path sanity check)."""
    return summarize_reports([evaluate_mask(truth, truth) for _, truth in items])


def summarize_reports(reports: list[MetricReport]) -> EvalResult:
    if not reports:
        return EvalResult(reports=[], mean_dice=float("nan"), mean_jaccard=float("nan"),
                          mean_hd95=None, mean_asd=None, undefined_count=0)
    hd = [r.hd95 for r in reports if r.hd95 is not None]
    ad = [r.asd for r in reports if r.asd is not None]
    return EvalResult(
        reports=reports,
        mean_dice=float(np.mean([r.dice for r in reports])),
        mean_jaccard=float(np.mean([r.jaccard for r in reports])),
        mean_hd95=float(np.mean(hd)) if hd else None,
        mean_asd=float(np.mean(ad)) if ad else None,
        undefined_count=len(reports) - len(hd),
    )


def write_eval_csv(result: EvalResult, path) -> None:
    def num(x: Optional[float]) -> str:
        return "nan" if x is None else f"{x:.9g}"

    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("index,dice,jaccard,hd95,asd\n")
        for i, r in enumerate(result.reports):
            f.write(f"{i},{num(r.dice)},{num(r.jaccard)},{num(r.hd95)},{num(r.asd)}\n")
        f.write(f"mean,{num(result.mean_dice)},{num(result.mean_jaccard)},"
                f"{num(result.mean_hd95)},{num(result.mean_asd)}\n")
        f.write(f"undefined_distances,{result.undefined_count},,,\n")


@dataclass
class RunResult:
    state: TrainerState
    final_eval: EvalResult
    eval_network: str
    eval_params: ParamVector
    trace_path: Optional[Path] = None


def _trace_record(state: TrainerState, report: StepReport, iteration: int) -> TraceRecord:
    winner = report.outcome.winner if report.outcome else 1
    r2 = report.report_s2
    return TraceRecord(
        iter=iteration, mode=state.mode, winner=winner, lam=report.lam,
        l_seg_s1=report.report_s1.l_seg, l_seg_s2=r2.l_seg if r2 else 0.0,
        l_cps=report.report_s1.l_cps,
        l_ms=report.report_s1.l_ms + (r2.l_ms if r2 else 0.0),
        l_total_s1=report.report_s1.l_total, l_total_s2=r2.l_total if r2 else 0.0,
        dice_s1=report.dice_s1, dice_s2=report.dice_s2,
        wd_t_s1=report.wd_t_s1, wd_t_s2=report.wd_t_s2,
        pd_t_s1=report.pd_t_s1, pd_t_s2=report.pd_t_s2, pd_s1_s2=report.pd_s1_s2,
    )


def _save_checkpoints(state: TrainerState, out_dir: Path, iteration: int) -> None:
    nets = {"student1": state.theta_s1}
    if state.theta_s2 is not None:
        nets["student2"] = state.theta_s2
    if state.theta_t is not None:
        nets["teacher"] = state.theta_t
    for name, params in nets.items():
        segnet.save_checkpoint(params, out_dir / f"{name}_{iteration}.ckpt")


def train_run(dataset: Dataset, cfg, out_dir=None) -> RunResult:
    """Full training run: iterate train_step, log the trace, checkpoint,
    and evaluate the final model on the test split."""
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    batch_unlabeled = 0 if cfg.mode == "supervised" else cfg.batch_unlabeled
    sampler = BatchSampler(dataset, cfg.batch_labeled, batch_unlabeled, seed=cfg.seed)
    state = init_state(cfg)

    logger = CsvLogger(out_path / "metrics.csv") if out_path is not None else None
    warned_unsup = False
    try:
        for _ in range(cfg.iterations):
            batch = sampler.next_batch()
            state, report = train_step(state, batch, cfg)
            if report.unsup_skipped and state.mode != "supervised" and not warned_unsup:
                log.warning("no unlabeled items in the batch, unsupervised loss skipped")
                warned_unsup = True
            if logger is not None:
                logger.log(_trace_record(state, report, state.iteration - 1))
            if out_path is not None and cfg.checkpoint_every > 0 \
                    and state.iteration % cfg.checkpoint_every == 0 \
                    and state.iteration < cfg.iterations:
                _save_checkpoints(state, out_path, state.iteration)
            if state.iteration % 500 == 0:
                log.info("iter %d/%d l_seg_s1=%.4f dice_s1=%.4f",
                         state.iteration, cfg.iterations, report.report_s1.l_seg, report.dice_s1)
    finally:
        if logger is not None:
            logger.close()

    net_name, params = final_selection(state, dataset.labeled, cfg.competition_config)
    final_eval = (evaluate_params(params, dataset.test)
                  if dataset.test else summarize_reports([]))
    if out_path is not None:
        _save_checkpoints(state, out_path, state.iteration)
        write_eval_csv(final_eval, out_path / "eval_final.csv")
        (out_path / "final_network.txt").write_text(net_name + "\n", encoding="ascii")
    return RunResult(state=state, final_eval=final_eval, eval_network=net_name,
                     eval_params=params,
                     trace_path=(out_path / "metrics.csv") if out_path else None)

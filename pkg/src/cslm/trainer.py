"""Training loop: SGD over BPTT windows with state carry, joint global-norm
clipping, plateau learning-rate decay on dev perplexity, best-dev checkpoint
selection, JSON-lines metrics, and the evaluation/sweep entry points.
"""

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from typing import NamedTuple

from . import model as M
from .autodiff import Tape


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries where and at what learning rate."""

    def __init__(self, epoch, window, lr, loss):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, window {window}, lr {lr}"
        )
        self.epoch = epoch
        self.window = window
        self.lr = lr
        self.loss = loss


@dataclass
class TrainConfig:
    lr0: float = 20.0
    decay: float = 0.75
    clip: float = 0.25
    batch_size: int = 20
    unroll: int = 35
    max_epochs: int = 40
    seed: int = 0

    def validate(self):
        problems = []
        if self.lr0 <= 0:
            problems.append("lr0 must be positive")
        if not 0.0 < self.decay < 1.0:
            problems.append("decay must be in (0, 1)")
        if self.clip <= 0:
            problems.append("clip must be positive")
        if self.batch_size < 1 or self.unroll < 1:
            problems.append("batch_size and unroll must be >= 1")
        if self.max_epochs < 1:
            problems.append("max_epochs must be >= 1")
        if problems:
            raise M.ConfigError("invalid TrainConfig: " + "; ".join(problems))


class PlateauSchedule:
    """lr decays by a fixed factor on every dev evaluation that fails to
    improve (strictly) on the best seen so far; it never increases."""

    def __init__(self, lr0, decay):
        self.lr = float(lr0)
        self.decay = float(decay)
        self.best = math.inf

    def update(self, dev_metric):
        """Feed one dev evaluation; returns (improved, lr after the update)."""
        improved = dev_metric < self.best
        if improved:
            self.best = dev_metric
        else:
            self.lr *= self.decay
        return improved, self.lr


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss_lm: float
    train_loss_pt: "float | None"
    train_loss_total: float
    dev_ppl_lm: float
    dev_ppl_total: float
    wall_time: float


@dataclass
class TrainResult:
    metrics: list
    best_epoch: int
    best_dev_ppl_lm: float
    final_lr: float
    step_grad_norms: "list | None"


class Perplexities(NamedTuple):
    ppl_lm: float
    ppl_total: float


def perplexity(model, plan) -> Perplexities:
    """Dropout-free corpus perplexities over a BatchPlan.

    ppl_lm = exp(mean per-token word NLL) is the headline, comparable across
    modes; ppl_total exponentiates the weighted joint loss and equals ppl_lm
    whenever there is no tag loss.
    """
    if plan.n_windows == 0:
        raise ValueError(
            "plan has no complete windows; shrink unroll/batch_size or add data"
        )
    state = model.init_state(plan.batch_size)
    nll_lm = 0.0
    nll_pt = 0.0
    count = 0
    has_pt = False
    for word_x, tag_x, word_y, tag_y in plan.windows():
        losses, state = model.eval_window(word_x, tag_x, word_y, tag_y, state)
        nll_lm += float(losses.lm_row_nll.sum())
        count += losses.token_count
        if losses.pos_row_nll is not None:
            has_pt = True
            nll_pt += float(losses.pos_row_nll.sum())
    mean_lm = nll_lm / count
    if has_pt:
        p = model.config.loss_weight
        mean_total = p * mean_lm + (1.0 - p) * (nll_pt / count)
    else:
        mean_total = mean_lm
    return Perplexities(math.exp(mean_lm), math.exp(mean_total))


def train(
    model,
    train_plan,
    dev_plan,
    cfg: TrainConfig,
    metrics_path=None,
    ckpt_path=None,
    word_vocab=None,
    tag_vocab=None,
    record_grad_norms=False,
    log=None,
) -> TrainResult:
    """Run the full recipe; the model ends up holding the best-dev weights.

    Per epoch: iterate the train plan's windows with carried (detached)
    state, backprop the joint loss, clip all gradients to a joint L2 norm,
    apply SGD; then evaluate dev perplexity, decay lr on non-improvement,
    and keep the best-dev parameter snapshot. Raises TrainingDiverged on a
    non-finite loss. Deterministic for a fixed (model seed, config, data).
    """
    cfg.validate()
    from . import nn  # local import keeps module load light

    opt = nn.SgdOptimizer(cfg.lr0, cfg.clip)
    sched = PlateauSchedule(cfg.lr0, cfg.decay)
    params = model.parameters()
    metrics = []
    norms = [] if record_grad_norms else None
    best_epoch = 0
    best_ppl = math.inf
    best_snapshot = model.snapshot()
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            state = model.init_state(train_plan.batch_size)
            sum_lm = sum_pt = sum_total = 0.0
            n_windows = 0
            has_pt = False
            for w_idx, (word_x, tag_x, word_y, tag_y) in enumerate(train_plan.windows()):
                with Tape() as tape:
                    losses, state = model.forward_window(
                        word_x, tag_x, word_y, tag_y, state, train=True
                    )
                total = losses.loss_total.item()
                if not math.isfinite(total):
                    raise TrainingDiverged(epoch, w_idx, opt.lr, total)
                tape.backward(losses.loss_total)
                pre, post = opt.step(params, measure_post_norm=record_grad_norms)
                if norms is not None:
                    norms.append((pre, post))
                sum_lm += losses.loss_lm.item()
                sum_total += total
                if losses.loss_pt is not None:
                    has_pt = True
                    sum_pt += losses.loss_pt.item()
                n_windows += 1
            dev = perplexity(model, dev_plan)
            improved, lr = sched.update(dev.ppl_lm)
            opt.lr = lr
            if improved:
                best_epoch = epoch
                best_ppl = dev.ppl_lm
                best_snapshot = model.snapshot()
            record = MetricsRecord(
                epoch=epoch,
                lr=lr,
                train_loss_lm=sum_lm / n_windows,
                train_loss_pt=sum_pt / n_windows if has_pt else None,
                train_loss_total=sum_total / n_windows,
                dev_ppl_lm=dev.ppl_lm,
                dev_ppl_total=dev.ppl_total,
                wall_time=time.perf_counter() - t0,
            )
            metrics.append(record)
            if sink:
                sink.write(json.dumps(dataclasses.asdict(record)) + "\n")
                sink.flush()
            if log:
                log(
                    f"epoch {epoch}: dev ppl_lm {dev.ppl_lm:.3f} "
                    f"(best {best_ppl:.3f} @ {best_epoch}), lr {lr:g}"
                )
    finally:
        if sink:
            sink.close()
    model.restore(best_snapshot)
    if ckpt_path:
        model.save(ckpt_path, word_vocab=word_vocab, tag_vocab=tag_vocab)
    return TrainResult(
        metrics=metrics,
        best_epoch=best_epoch,
        best_dev_ppl_lm=best_ppl,
        final_lr=sched.lr,
        step_grad_norms=norms,
    )


SWEEP_FIELDS = ("hidden_size", "p", "ppl_dev", "ppl_test", "mode", "seed", "status")


def sweep(cells, train_plan, dev_plan, test_plan, n_words, n_tags, train_cfg, log=None):
    """Train one model per cell; cells run independently.

    Each cell is a dict of ModelConfig overrides plus an optional "seed".
    A failing cell is recorded with its error and the sweep continues.
    Returns rows keyed by SWEEP_FIELDS.
    """
    rows = []
    for cell in cells:
        cell = dict(cell)
        seed = int(cell.pop("seed", train_cfg.seed))
        config = M.ModelConfig(**cell)
        row = {
            "hidden_size": config.hidden_size,
            "p": config.loss_weight,
            "mode": config.mode,
            "seed": seed,
        }
        if log:
            log(f"sweep cell: mode={config.mode} h={config.hidden_size} "
                f"p={config.loss_weight} seed={seed}")
        try:
            mdl = M.MultiTaskLm(config, n_words, n_tags, seed=seed)
            result = train(mdl, train_plan, dev_plan, train_cfg, log=log)
            test = perplexity(mdl, test_plan)
            row.update(
                ppl_dev=result.best_dev_ppl_lm, ppl_test=test.ppl_lm, status="ok"
            )
        except (TrainingDiverged, M.ConfigError, ValueError) as e:
            row.update(ppl_dev=None, ppl_test=None, status=f"failed: {e}")
        rows.append(row)
    return rows

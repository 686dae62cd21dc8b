"""The multi-task code-switching language model.

Per time step, the word tower consumes the word embedding concatenated with
the bilingual-POS embedding and the tag tower consumes the POS embedding
alone; the two top hidden states are summed before the tied word softmax,
while the tag softmax reads the tag tower alone. The training loss is the
convex combination loss_weight * word-LM loss + (1 - loss_weight) * tag loss.

Three modes share this file: "multitask" is the full model, and two
baselines strip it down — "lm_plus_syntactic" keeps the concatenated tag
input but drops the tag tower and tag loss, "lm_only" sees words alone.

By default (stop_gradient_into_pos_tower) the copies of the tag embedding
and of the tag tower's output that feed the word path are gradient-blocked:
the word loss cannot reshape the tag tower, so the tag task learns only
from its own loss.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .corpus import EOS_ID

MODES = ("multitask", "lm_plus_syntactic", "lm_only")


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


@dataclass
class ModelConfig:
    mode: str = "multitask"
    hidden_size: int = 200
    num_layers: int = 2
    dropout_word: float = 0.2
    dropout_pos: float = 0.2
    loss_weight: float = 0.25
    stop_gradient_into_pos_tower: bool = True
    tie_pos_head: bool = True

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.hidden_size < 1 or self.num_layers < 1:
            raise ConfigError("hidden_size and num_layers must be >= 1")
        if not 0.0 < self.loss_weight <= 1.0:
            raise ConfigError(
                f"loss_weight must be in (0, 1], got {self.loss_weight}"
            )
        for name in ("dropout_word", "dropout_pos"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")


@dataclass
class StepLosses:
    """Losses of one window: per-token means plus the raw per-row terms.

    Row arrays are step-major, row index t * B + b; loss_total is
    loss_weight * loss_lm + (1 - loss_weight) * loss_pt when a tag loss
    exists and is loss_lm itself otherwise.
    """

    loss_lm: Tensor
    loss_pt: "Tensor | None"
    loss_total: Tensor
    lm_row_nll: np.ndarray
    pos_row_nll: "np.ndarray | None"
    token_count: int


@dataclass
class UtteranceScore:
    """Teacher-forced diagnostics for one utterance (zero initial state).

    logp_next[t] is log p(target at position t): the next word for t < n-1
    and EOS at the last position. pos_next_probs[t] is the tag head's
    distribution over the next tag (None outside multitask mode).
    """

    logp_next: np.ndarray
    pos_next_probs: "np.ndarray | None"


def flatten_steps(ids) -> np.ndarray:
    """(B, T) id matrix -> step-major row vector matching forward's logits."""
    return np.ascontiguousarray(np.asarray(ids, dtype=np.int64).T).reshape(-1)


def compute_losses(
    word_logits, word_targets, pos_logits=None, pos_targets=None, loss_weight=1.0
) -> StepLosses:
    """Mean per-token cross-entropies and their convex combination."""
    rows_w, _ = ad.cross_entropy_rows(word_logits, word_targets)
    n = rows_w.data.shape[0]
    loss_lm = ad.scale(ad.sum_all(rows_w), 1.0 / n)
    if pos_logits is None:
        return StepLosses(loss_lm, None, loss_lm, rows_w.data, None, n)
    rows_p, _ = ad.cross_entropy_rows(pos_logits, pos_targets)
    loss_pt = ad.scale(ad.sum_all(rows_p), 1.0 / n)
    loss_total = ad.add(
        ad.scale(loss_lm, loss_weight), ad.scale(loss_pt, 1.0 - loss_weight)
    )
    return StepLosses(loss_lm, loss_pt, loss_total, rows_w.data, rows_p.data, n)


class MultiTaskLm:
    """Two-tower LSTM language model over code-switched text (see module doc)."""

    def __init__(self, config: ModelConfig, n_words, n_tags, seed=0):
        config.validate()
        if n_words < 2:
            raise ConfigError("n_words must cover at least EOS and UNK")
        if config.mode != "lm_only" and n_tags < 2:
            raise ConfigError("n_tags must cover at least EOS and UNK")
        self.config = config
        self.n_words = int(n_words)
        self.n_tags = int(n_tags)
        self.seed = int(seed)
        d = h = config.hidden_size
        rng = np.random.default_rng(seed)

        self.word_emb = nn.Embedding(n_words, d, rng)
        self.uses_tags = config.mode in ("multitask", "lm_plus_syntactic")
        self.tag_emb = nn.Embedding(n_tags, d, rng) if self.uses_tags else None
        lm_input = 2 * d if self.uses_tags else d
        self.lstm_lm = nn.LstmStack(
            lm_input, h, config.num_layers, config.dropout_word, rng
        )
        if config.mode == "multitask":
            self.lstm_pt = nn.LstmStack(
                d, h, config.num_layers, config.dropout_pos, rng
            )
            self.pos_head = nn.TiedProjection(
                self.tag_emb.table, rng=rng, tied=config.tie_pos_head
            )
        else:
            self.lstm_pt = None
            self.pos_head = None
        self.word_head = nn.TiedProjection(self.word_emb.table, tied=True)
        # Mask sampling continues the init stream; training stays a pure
        # function of (config, vocab sizes, seed, data).
        self._rng = rng

    # ---------------------------------------------------------------- state

    def init_state(self, batch_size):
        state = {"lm": self.lstm_lm.init_state(batch_size)}
        if self.lstm_pt is not None:
            state["pt"] = self.lstm_pt.init_state(batch_size)
        return state

    @staticmethod
    def _enter_window(stack_state):
        return [(Tensor(h), Tensor(c)) for h, c in stack_state]

    @staticmethod
    def _leave_window(tensor_state):
        # Detach at the truncation boundary: values carry, gradients stop.
        return [(h.data, c.data) for h, c in tensor_state]

    # -------------------------------------------------------------- forward

    def forward(self, word_x, tag_x, state, train=False):
        """Run one unrolled window.

        word_x/tag_x are (B, T) id matrices (tag_x is ignored in lm_only
        mode and may be None there). Returns (word_logits, pos_logits,
        new_state): logits are (T*B, V) step-major Tensors, pos_logits None
        outside multitask mode, and new_state is detached.
        """
        word_x = np.asarray(word_x, dtype=np.int64)
        B, T = word_x.shape
        if self.uses_tags:
            tag_x = np.asarray(tag_x, dtype=np.int64)
            if tag_x.shape != word_x.shape:
                raise ad.ShapeError(
                    f"forward: word ids {word_x.shape} vs tag ids {tag_x.shape}"
                )

        cfg = self.config
        if train:
            mask_w = nn.DropoutMask(cfg.dropout_word, (B, cfg.hidden_size))
            mask_w.resample(self._rng)
            lm_masks = self.lstm_lm.sample_masks(self._rng, B)
            if self.uses_tags:
                mask_p = nn.DropoutMask(cfg.dropout_pos, (B, cfg.hidden_size))
                mask_p.resample(self._rng)
            if self.lstm_pt is not None:
                pt_masks = self.lstm_pt.sample_masks(self._rng, B)
        else:
            mask_w = mask_p = None
            lm_masks = pt_masks = None

        lm_state = self._enter_window(state["lm"])
        pt_state = self._enter_window(state["pt"]) if self.lstm_pt else None
        zs = []
        vs = []
        for t in range(T):
            xw = self.word_emb.lookup(word_x[:, t])
            if mask_w is not None:
                xw = mask_w.apply(xw)
            if self.uses_tags:
                xp = self.tag_emb.lookup(tag_x[:, t])
                if mask_p is not None:
                    xp = mask_p.apply(xp)
            if cfg.mode == "multitask":
                v, pt_state = self.lstm_pt.step(xp, pt_state, pt_masks)
                xp_lm = ad.block_gradient(xp) if cfg.stop_gradient_into_pos_tower else xp
                v_lm = ad.block_gradient(v) if cfg.stop_gradient_into_pos_tower else v
                u, lm_state = self.lstm_lm.step(
                    ad.concat(xw, xp_lm, axis=1), lm_state, lm_masks
                )
                zs.append(ad.add(u, v_lm))
                vs.append(v)
            elif cfg.mode == "lm_plus_syntactic":
                u, lm_state = self.lstm_lm.step(
                    ad.concat(xw, xp, axis=1), lm_state, lm_masks
                )
                zs.append(u)
            else:
                u, lm_state = self.lstm_lm.step(xw, lm_state, lm_masks)
                zs.append(u)

        word_logits = self.word_head.logits(ad.concat_rows(zs))
        pos_logits = (
            self.pos_head.logits(ad.concat_rows(vs)) if cfg.mode == "multitask" else None
        )
        new_state = {"lm": self._leave_window(lm_state)}
        if pt_state is not None:
            new_state["pt"] = self._leave_window(pt_state)
        return word_logits, pos_logits, new_state

    def forward_window(self, word_x, tag_x, word_y, tag_y, state, train=False):
        """forward() plus the window's losses; the trainer's unit of work."""
        word_logits, pos_logits, new_state = self.forward(word_x, tag_x, state, train)
        losses = compute_losses(
            word_logits,
            flatten_steps(word_y),
            pos_logits,
            flatten_steps(tag_y) if pos_logits is not None else None,
            self.config.loss_weight,
        )
        return losses, new_state

    def eval_window(self, word_x, tag_x, word_y, tag_y, state):
        """Dropout-free, tape-free scoring window (for perplexity loops)."""
        return self.forward_window(word_x, tag_x, word_y, tag_y, state, train=False)

    def score_utterance(self, word_ids, tag_ids=None) -> UtteranceScore:
        """Teacher-forced pass over one utterance from a zero state.

        Targets are the input shifted left with EOS appended, so position t
        scores the model's prediction of token t+1 (EOS at the end).
        """
        word_ids = np.asarray(word_ids, dtype=np.int64)
        n = word_ids.shape[0]
        word_x = word_ids.reshape(1, n)
        word_y = np.append(word_ids[1:], EOS_ID).reshape(1, n)
        if self.uses_tags:
            tag_ids = np.asarray(tag_ids, dtype=np.int64)
            tag_x = tag_ids.reshape(1, n)
            tag_y = np.append(tag_ids[1:], EOS_ID).reshape(1, n)
        else:
            tag_x = tag_y = None
        word_logits, pos_logits, _ = self.forward(
            word_x, tag_x, self.init_state(1), train=False
        )
        rows_w, _ = ad.cross_entropy_rows(word_logits, flatten_steps(word_y))
        pos_probs = ad.softmax(pos_logits.data) if pos_logits is not None else None
        return UtteranceScore(-rows_w.data, pos_probs)

    # ----------------------------------------------------------- parameters

    def named_parameters(self):
        """Unique (name, Tensor) pairs in a stable order; no alias entries."""
        out = [("word_emb.table", self.word_emb.table)]
        if self.tag_emb is not None:
            out.append(("tag_emb.table", self.tag_emb.table))
        out += [(f"lstm_lm.{n}", t) for n, t in self.lstm_lm.parameters()]
        if self.lstm_pt is not None:
            out += [(f"lstm_pt.{n}", t) for n, t in self.lstm_pt.parameters()]
        out.append(("word_head.bias", self.word_head.bias))
        if self.pos_head is not None:
            if not self.pos_head.tied:
                out.append(("pos_head.weight", self.pos_head.weight))
            out.append(("pos_head.bias", self.pos_head.bias))
        return out

    def checkpoint_entries(self):
        """named_parameters() plus alias names for tied storage."""
        out = list(self.named_parameters())
        out.append(("word_head.weight", self.word_head.weight))
        if self.pos_head is not None and self.pos_head.tied:
            out.append(("pos_head.weight", self.pos_head.weight))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def num_params(self):
        return sum(t.data.size for t in self.parameters())

    def snapshot(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def restore(self, arrays):
        for name, t in self.named_parameters():
            src = arrays[name]
            if tuple(src.shape) != t.data.shape:
                raise ConfigError(
                    f"parameter {name}: stored shape {tuple(src.shape)} != "
                    f"model shape {t.data.shape}"
                )
            t.data[...] = src

    # ----------------------------------------------------------- checkpoint

    def save(self, path, word_vocab=None, tag_vocab=None):
        extra = {
            "model_config": dataclasses.asdict(self.config),
            "n_words": self.n_words,
            "n_tags": self.n_tags,
            "seed": self.seed,
        }
        if word_vocab is not None:
            extra["word_vocab"] = list(word_vocab.id_to_token)
        if tag_vocab is not None:
            extra["tag_vocab"] = list(tag_vocab.id_to_token)
        nn.save_checkpoint(path, self.checkpoint_entries(), extra)

    @classmethod
    def load(cls, path):
        """Rebuild a model from a checkpoint; returns (model, manifest)."""
        manifest, arrays = nn.load_checkpoint(path)
        config = ModelConfig(**manifest["model_config"])
        model = cls(config, manifest["n_words"], manifest["n_tags"], manifest["seed"])
        model.restore(arrays)
        return model, manifest

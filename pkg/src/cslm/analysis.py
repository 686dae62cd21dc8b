"""Model diagnostics: per-token log-probability deltas between two models,
next-tag-language probability under the multitask tag head, and trigger-tag
frequency tables — all emitted as plot-ready long-form rows.

Every analysis scores utterances independently with a zero initial state
(teacher forcing), so results do not depend on any training-time stream
layout. Checkpoints are frozen inputs; nothing here mutates a model.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import synthgen
from .corpus import Vocab


class CompatibilityError(ValueError):
    """The two checkpoints under comparison disagree on vocabulary."""


class UnsupportedModeError(ValueError):
    """The requested diagnostic needs a head this checkpoint doesn't have."""


@dataclass
class LoadedModel:
    """A model plus the vocabularies it was trained with."""

    model: object
    word_vocab: Vocab
    tag_vocab: "Vocab | None"
    manifest: dict


def load_model(path) -> LoadedModel:
    from .model import MultiTaskLm

    model, manifest = MultiTaskLm.load(path)
    if "word_vocab" not in manifest:
        raise CompatibilityError(f"checkpoint {path} carries no word vocabulary")
    word_vocab = Vocab(manifest["word_vocab"][2:])
    tag_vocab = Vocab(manifest["tag_vocab"][2:]) if "tag_vocab" in manifest else None
    return LoadedModel(model, word_vocab, tag_vocab, manifest)


def _encode(loaded: LoadedModel, utterance):
    word_ids = loaded.word_vocab.encode_all(utterance.words)
    if loaded.model.uses_tags:
        if loaded.tag_vocab is None:
            raise CompatibilityError("checkpoint needs tags but has no tag vocabulary")
        tag_ids = loaded.tag_vocab.encode_all(t.surface() for t in utterance.tags)
    else:
        tag_ids = None
    return word_ids, tag_ids


def switch_flags(utterance):
    """is_switch[t]: does position t's target (token t+1) change language?

    The last position targets EOS and is never a switch point.
    """
    langs = utterance.langs
    return [a != b for a, b in zip(langs, langs[1:])] + [False]


def zh_tag_mass(tag_vocab: Vocab):
    """Boolean row over the tag vocabulary marking zh-suffixed tags."""
    return np.array([t.endswith("_zh") for t in tag_vocab.id_to_token])


@dataclass
class TokenDiagnostics:
    """Per-token comparison rows for one utterance (arrays over positions)."""

    utterance_id: int
    tokens: tuple
    logp_a: np.ndarray
    logp_b: np.ndarray
    delta: np.ndarray
    p_next_zh: "np.ndarray | None"
    is_switch: list


def compare_models(a: LoadedModel, b: LoadedModel, utterances):
    """Per-token log p deltas (A minus B); positive means A is better.

    When model A is a multitask model, its tag head's next-language
    probability rides along in p_next_zh.
    """
    if a.word_vocab.id_to_token != b.word_vocab.id_to_token:
        raise CompatibilityError(
            "word vocabularies differ between the two checkpoints"
        )
    zh_mask = zh_tag_mass(a.tag_vocab) if a.model.config.mode == "multitask" else None
    out = []
    for idx, u in enumerate(utterances):
        ids_a = _encode(a, u)
        ids_b = _encode(b, u)
        score_a = a.model.score_utterance(*ids_a)
        score_b = b.model.score_utterance(*ids_b)
        p_next_zh = (
            score_a.pos_next_probs[:, zh_mask].sum(axis=1)
            if zh_mask is not None
            else None
        )
        out.append(
            TokenDiagnostics(
                utterance_id=idx,
                tokens=u.words,
                logp_a=score_a.logp_next,
                logp_b=score_b.logp_next,
                delta=score_a.logp_next - score_b.logp_next,
                p_next_zh=p_next_zh,
                is_switch=switch_flags(u),
            )
        )
    return out


def next_lang_probability(loaded: LoadedModel, utterances):
    """P(next tag is Chinese) per position, per utterance.

    Returns (utterance_id, tokens, p_next_zh array, is_switch) tuples.
    Requires a multitask checkpoint (no tag head otherwise).
    """
    if loaded.model.config.mode != "multitask":
        raise UnsupportedModeError(
            f"next-language probability needs a multitask checkpoint, "
            f"got mode {loaded.model.config.mode!r}"
        )
    zh_mask = zh_tag_mass(loaded.tag_vocab)
    out = []
    for idx, u in enumerate(utterances):
        score = loaded.model.score_utterance(*_encode(loaded, u))
        p_zh = score.pos_next_probs[:, zh_mask].sum(axis=1)
        out.append((idx, u.words, p_zh, switch_flags(u)))
    return out


def trigger_table(utterances):
    """(tag, count, relative frequency) rows over switch-preceding tags."""
    profile = synthgen.trigger_profile(utterances)
    total = sum(count for _, count in profile)
    return [(tag, count, count / total) for tag, count in profile]


# --------------------------------------------------------------------------
# Long-form CSV emission.

COMPARE_COLUMNS = (
    "utterance_id", "position", "token", "delta", "p_next_zh", "is_switch_point",
)


def write_compare_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(COMPARE_COLUMNS)
        for d in rows:
            for t, token in enumerate(d.tokens):
                w.writerow(
                    [
                        d.utterance_id,
                        t,
                        token,
                        repr(float(d.delta[t])),
                        "" if d.p_next_zh is None else repr(float(d.p_next_zh[t])),
                        int(d.is_switch[t]),
                    ]
                )


def write_nextlang_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(("utterance_id", "position", "token", "p_next_zh", "is_switch_point"))
        for idx, tokens, p_zh, flags in rows:
            for t, token in enumerate(tokens):
                w.writerow([idx, t, token, repr(float(p_zh[t])), int(flags[t])])


def write_triggers_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(("tag", "count", "relative_frequency"))
        for tag, count, rel in rows:
            w.writerow([tag.surface(), count, repr(float(rel))])

"""Synthetic code-switched corpus generator with exact ground-truth tags.

Utterances start from weighted POS-tag templates in the matrix language.
Walking the template left to right, each boundary leaving a matrix-language
token may open an embedded-language island: entry probability is
switch_prob scaled by the current tag's trigger weight, island length is
geometric with the configured mean, and the token after an island is always
matrix-language again. Island tags keep the template's grammatical slot but
are mapped into the embedded language's inventory; every word is drawn
uniformly from the synthetic lexicon of its (tag, language) cell and spells
out its own cell, e.g. ``en_VB_17``.

The trigger weights are the deliberately embedded, learnable signal: which
tag precedes a switch genuinely changes the switch odds, so a model that
reads POS context can predict switch points and a words-only model cannot.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import corpus as C
from .corpus import BilingualTag, TaggedUtterance

# Grammatical-slot correspondence between the two inventories, used to
# realize an island token for a template slot authored in the other
# language. Coverage is total in both directions (surjective, not 1:1).
ZH_TO_EN = {
    "AD": "RB", "AS": "RP", "BA": "IN", "CC": "CC", "CD": "CD", "CS": "IN",
    "DEC": "IN", "DEG": "POS", "DER": "RP", "DEV": "RB", "DT": "DT",
    "ETC": "CC", "FW": "FW", "IJ": "UH", "JJ": "JJ", "LB": "IN", "LC": "IN",
    "M": "NN", "MSP": "TO", "NN": "NN", "NR": "NNP", "NT": "NN", "OD": "JJ",
    "ON": "RB", "P": "IN", "PN": "PRP", "PU": "FW", "SB": "IN", "SP": "UH",
    "VA": "JJ", "VC": "VB", "VE": "VB", "VV": "VB", "NOI": "FW",
}
EN_TO_ZH = {
    "CC": "CC", "CD": "CD", "DT": "DT", "EX": "PN", "FW": "FW", "IN": "P",
    "JJ": "JJ", "JJR": "JJ", "JJS": "JJ", "MD": "VV", "NN": "NN",
    "NNS": "NN", "NNP": "NR", "NNPS": "NR", "PDT": "DT", "POS": "DEG",
    "PRP": "PN", "PRP$": "PN", "RB": "AD", "RBR": "AD", "RBS": "AD",
    "RP": "AS", "TO": "MSP", "UH": "SP", "VB": "VV", "VBD": "VV",
    "VBG": "VV", "VBN": "VV", "VBP": "VV", "VBZ": "VV", "WDT": "DT",
}
CROSS_LANG_BASE = {"zh": ZH_TO_EN, "en": EN_TO_ZH}

# Default templates, authored over zh bases (mapped when matrix_lang="en").
# Varied lengths and distinct tag bigrams give the towers something to model
# beyond unigram frequencies.
DEFAULT_TEMPLATES = [
    (3.0, ["PN", "VV", "NN"]),
    (2.0, ["PN", "VV", "VV", "NN"]),
    (2.0, ["NN", "DEG", "NN", "VV", "AD", "VA"]),
    (1.5, ["PN", "AD", "VV", "NN", "CD", "M", "NN"]),
    (1.5, ["P", "NN", "VV", "NN"]),
    (1.0, ["PN", "VV", "P", "NN", "NN"]),
    (1.0, ["NN", "VV", "DEC", "NN", "VA"]),
    (1.0, ["AD", "PN", "VV", "CD", "M", "NN"]),
    (1.0, ["PN", "VV", "NN", "CC", "NN"]),
    (1.0, ["NN", "P", "NN", "VV", "AD"]),
]

# Trigger propensities by (zh-base) tag: verbs and prepositions invite
# switches, pronouns and particles suppress them. Unlisted bases weigh 1.
DEFAULT_TRIGGER_WEIGHTS = {
    "VV": 2.6,
    "P": 2.0,
    "NN": 1.1,
    "CD": 0.6,
    "M": 0.4,
    "AD": 0.7,
    "PN": 0.2,
    "DEG": 0.15,
    "DEC": 0.15,
    "CC": 1.6,
    "VA": 0.5,
}


class SynthConfigError(ValueError):
    """Invalid generator configuration; message lists the offending fields."""


@dataclass
class SynthConfig:
    seed: int = 0
    n_train: int = 20000
    n_dev: int = 2000
    n_test: int = 2000
    vocab_per_pos: int = 50
    switch_prob: float = 0.15
    island_len: float = 2.0
    matrix_lang: str = "zh"
    templates: list = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    trigger_weights: dict = field(default_factory=lambda: dict(DEFAULT_TRIGGER_WEIGHTS))

    def validate(self):
        problems = []
        for name in ("n_train", "n_dev", "n_test", "vocab_per_pos"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not 0.0 <= self.switch_prob <= 1.0:
            problems.append("switch_prob must be in [0, 1]")
        if self.island_len < 1.0:
            problems.append("island_len must be >= 1 (geometric mean length)")
        if self.matrix_lang not in C.LANGS:
            problems.append(f"matrix_lang must be one of {C.LANGS}")
        if not self.templates:
            problems.append("templates must be non-empty")
        else:
            inventory = C.TAG_BASES.get(self.matrix_lang, frozenset())
            for i, (weight, bases) in enumerate(self.templates):
                if weight <= 0:
                    problems.append(f"templates[{i}] weight must be positive")
                if not bases:
                    problems.append(f"templates[{i}] is empty")
                for b in bases:
                    if b not in inventory:
                        problems.append(
                            f"templates[{i}] base {b!r} not in the "
                            f"{self.matrix_lang} inventory"
                        )
        for base, w in (self.trigger_weights or {}).items():
            if w < 0:
                problems.append(f"trigger_weights[{base!r}] must be >= 0")
        if problems:
            raise SynthConfigError("invalid SynthConfig: " + "; ".join(problems))

    def resolved_templates(self):
        """Templates in the matrix language's own inventory.

        The defaults are authored over zh bases; when the matrix language is
        English and a template base is not already a valid en base, it is
        mapped across. User-supplied templates must already be in-inventory
        (validate() enforces that), so this only rewrites the defaults.
        """
        if self.matrix_lang == "zh":
            return self.templates
        out = []
        for weight, bases in self.templates:
            out.append(
                (weight, [b if b in C.EN_TAG_BASES else ZH_TO_EN[b] for b in bases])
            )
        return out

    def trigger_weight(self, base):
        w = self.trigger_weights.get(base)
        if w is None and self.matrix_lang == "en":
            # defaults are keyed by zh bases; look up via the zh slot
            w = self.trigger_weights.get(EN_TO_ZH.get(base, ""))
        return 1.0 if w is None else float(w)


@dataclass
class SynthCorpus:
    train: list
    dev: list
    test: list
    manifest: dict

    def split(self, name):
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


def _generate_utterance(cfg, templates, weights_cum, rng):
    pick = int(np.searchsorted(weights_cum, rng.random() * weights_cum[-1], "right"))
    bases = templates[min(pick, len(templates) - 1)][1]
    n = len(bases)
    matrix = cfg.matrix_lang
    embedded = "en" if matrix == "zh" else "zh"
    langs = [matrix] * n

    # Island walk: decisions only from matrix-language tokens; an island
    # spans a geometric number of following tokens and the walk resumes at
    # the first token after it (which therefore stays matrix-language).
    t = 0
    while t < n - 1:
        p_enter = min(1.0, cfg.switch_prob * cfg.trigger_weight(bases[t]))
        if rng.random() < p_enter:
            length = int(rng.geometric(1.0 / cfg.island_len))
            end = min(n - 1, t + length)
            for j in range(t + 1, end + 1):
                langs[j] = embedded
            t = end + 1
        else:
            t += 1

    cross = CROSS_LANG_BASE[matrix]
    words = []
    tags = []
    for base, lang in zip(bases, langs):
        slot = base if lang == matrix else cross[base]
        k = int(rng.integers(cfg.vocab_per_pos))
        words.append(f"{lang}_{slot}_{k}")
        tags.append(BilingualTag(slot, lang))
    return TaggedUtterance(tuple(words), tuple(tags))


def generate(cfg: SynthConfig) -> SynthCorpus:
    """Generate train/dev/test splits, reproducible bitwise from cfg.seed.

    Splits use independent sub-seeds, so they are independently drawn from
    the same process (no shared utterance objects).
    """
    cfg.validate()
    templates = cfg.resolved_templates()
    weights_cum = np.cumsum([w for w, _ in templates])
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    splits = {}
    for name, count, seed in (
        ("train", cfg.n_train, seeds[0]),
        ("dev", cfg.n_dev, seeds[1]),
        ("test", cfg.n_test, seeds[2]),
    ):
        rng = np.random.default_rng(seed)
        splits[name] = [
            _generate_utterance(cfg, templates, weights_cum, rng) for _ in range(count)
        ]
    manifest = {
        "generator_config": dataclasses.asdict(cfg),
        "realized_stats": {
            name: C.compute_stats(utts).to_dict() for name, utts in splits.items()
        },
    }
    return SynthCorpus(splits["train"], splits["dev"], splits["test"], manifest)


def trigger_profile(utterances):
    """Count, per tag, how often it immediately precedes a language switch.

    Returns (BilingualTag, count) rows sorted by descending count, ties by
    tag surface.
    """
    counts = {}
    for u in utterances:
        for tag, nxt in zip(u.tags, u.tags[1:]):
            if tag.lang != nxt.lang:
                counts[tag] = counts.get(tag, 0) + 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0].surface()))

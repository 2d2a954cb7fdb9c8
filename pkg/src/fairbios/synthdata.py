"""Synthetic biased biography corpora.

Words are synthetic and purely alphabetic so they survive text normalization:
profession words look like ``profadwah`` (profession ``ad``, word ``ah``),
gender-correlated words like ``genfwac`` / ``genmwac`` and filler like
``fillwaab``.
"""

from __future__ import annotations

import csv
import json
import string
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import LabelMap, RawRecord, Record
from .errors import BadConfig

GENDERS = ("female", "male")


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``gender_skew`` is P(male). ``profession_gender_bias`` is the probability
    that a record's profession is drawn from the professions whose majority
    gender matches the record's gender. The remaining fields beyond
    ``bio_length`` control signal strength: ``signal_word_rate`` is the share of
    tokens taken from the profession vocabulary, ``gender_word_fidelity`` the
    probability that a gendered token comes from the record's own gender list,
    and ``profession_skew`` the Zipf exponent of profession frequencies.
    """

    n: int = 20_000
    num_professions: int = 8
    gender_skew: float = 0.62
    profession_gender_bias: float = 0.9
    signal_words_per_profession: int = 20
    gendered_word_rate: float = 0.2
    bio_length: int = 40
    seed: int = 0
    signal_word_rate: float = 0.06
    gender_word_fidelity: float = 0.7
    gendered_vocab_size: int = 30
    filler_vocab_size: int = 300
    profession_skew: float = 1.0

    def __post_init__(self):
        if self.num_professions < 1 or self.n < self.num_professions * 10:
            raise BadConfig("need num_professions >= 1 and n >= 10 * num_professions")
        if not 0 < self.gender_skew < 1:
            raise BadConfig("gender_skew must lie in (0, 1)")
        for name in ("profession_gender_bias", "gendered_word_rate", "signal_word_rate", "gender_word_fidelity"):
            if not 0 <= getattr(self, name) <= 1:
                raise BadConfig(f"{name} must lie in [0, 1]")
        if self.gendered_word_rate + self.signal_word_rate > 1:
            raise BadConfig("gendered_word_rate + signal_word_rate must not exceed 1")
        if min(self.bio_length, self.signal_words_per_profession, self.gendered_vocab_size,
               self.filler_vocab_size) < 1:
            raise BadConfig("lengths and vocabulary sizes must be positive")
        if self.profession_skew < 0:
            raise BadConfig("profession_skew must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise BadConfig(f"unknown synth config keys {sorted(unknown)}")
        return cls(**d)


def _letters(i: int, width: int) -> str:
    out = []
    for _ in range(width):
        i, r = divmod(i, 26)
        out.append(string.ascii_lowercase[r])
    return "".join(reversed(out))


def profession_name(p: int) -> str:
    return "prof" + _letters(p, 2)


@dataclass
class SynthCorpus:
    records: list[Record]
    raw: list[RawRecord]
    gender_map: LabelMap
    profession_map: LabelMap
    params: dict

    def write(self, csv_path, sidecar_path=None) -> None:
        """Write the corpus as ``bio,gender,profession`` CSV plus a JSON sidecar
        of generation parameters (default: ``<csv stem>.params.json``)."""
        csv_path = Path(csv_path)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bio", "gender", "profession"])
            for r in self.raw:
                w.writerow([r.bio, r.gender, r.profession])
        sidecar_path = sidecar_path or csv_path.with_suffix(".params.json")
        Path(sidecar_path).write_text(json.dumps(self.params, indent=2, sort_keys=True) + "\n")


def generate(cfg: SynthConfig) -> SynthCorpus:
    rng = np.random.default_rng(cfg.seed)
    P = cfg.num_professions
    weights = 1.0 / np.arange(1, P + 1) ** cfg.profession_skew
    majority = np.array([1 if p % 2 == 0 else 0 for p in range(P)])  # even -> male

    n = cfg.n
    gender = (rng.random(n) < cfg.gender_skew).astype(np.int64)
    honor = rng.random(n) < cfg.profession_gender_bias
    pick = rng.random(n)
    profession = np.empty(n, dtype=np.int64)
    cdfs = {}
    for g in (0, 1):
        for same in (True, False):
            pool = np.flatnonzero((majority == g) == same)
            if len(pool) == 0:
                pool = np.arange(P)
            w = weights[pool]
            cdfs[(g, same)] = (pool, np.cumsum(w) / w.sum())
    for (g, same), (pool, cdf) in cdfs.items():
        m = (gender == g) & (honor == same)
        j = np.minimum(np.searchsorted(cdf, pick[m], side="right"), len(pool) - 1)
        profession[m] = pool[j]

    L = cfg.bio_length
    kind = rng.random((n, L))
    own_gender = rng.random((n, L)) < cfg.gender_word_fidelity
    word_idx = rng.random((n, L))

    gw = cfg.gendered_vocab_size
    sw = cfg.signal_words_per_profession
    fw = cfg.filler_vocab_size
    gender_vocab = np.array([[f"gen{c}w{_letters(j, 2)}" for j in range(gw)] for c in ("f", "m")])
    prof_vocab = np.array([[f"{profession_name(p)}w{_letters(j, 2)}" for j in range(sw)] for p in range(P)])
    filler_vocab = np.array([f"fillw{_letters(j, 3)}" for j in range(fw)])

    tok_gender = np.where(own_gender, gender[:, None], 1 - gender[:, None])
    is_gendered = kind < cfg.gendered_word_rate
    is_signal = ~is_gendered & (kind < cfg.gendered_word_rate + cfg.signal_word_rate)
    tokens = filler_vocab[(word_idx * fw).astype(np.int64)]
    tokens = np.where(is_gendered, gender_vocab[tok_gender, (word_idx * gw).astype(np.int64)], tokens)
    tokens = np.where(is_signal, prof_vocab[profession[:, None], (word_idx * sw).astype(np.int64)], tokens)

    gender_map = LabelMap.from_names(GENDERS)
    profession_map = LabelMap.from_names(profession_name(p) for p in range(P))
    bios = [" ".join(row) for row in tokens.tolist()]
    raw = [RawRecord(b, GENDERS[g], profession_name(p))
           for b, g, p in zip(bios, gender.tolist(), profession.tolist())]
    records = [Record(b, int(g), profession_map.encode(profession_name(p)))
               for b, g, p in zip(bios, gender.tolist(), profession.tolist())]
    params = {
        "config": asdict(cfg),
        "profession_weights": (weights / weights.sum()).tolist(),
        "profession_majority_gender": {profession_name(p): GENDERS[majority[p]] for p in range(P)},
        "genders": list(GENDERS),
    }
    return SynthCorpus(records, raw, gender_map, profession_map, params)

"""Synthetic code-switching ASR data, Mixed Error Rate, and the forgetting check.

Toy languages own disjoint slices of the text-token space. Char-like
languages score one unit per token; word-like languages group consecutive
tokens into words of ``tokens_per_unit`` tokens. Every token "sounds" like a
fixed codebook row (shared across datasets built with the same
``codebook_seed``) emitted for ``frames_per_token`` frames plus Gaussian noise.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHAR = "char-like"
WORD = "word-like"


@dataclass(frozen=True)
class ToyLanguageSpec:
    name: str
    unit_granularity: str
    token_id_range: tuple[int, int]
    tokens_per_unit: int = 1

    def __post_init__(self):
        lo, hi = self.token_id_range
        if not 0 <= lo < hi:
            raise ValueError(f"language {self.name}: empty token range {self.token_id_range}")
        if self.unit_granularity not in (CHAR, WORD):
            raise ValueError(f"language {self.name}: granularity must be {CHAR!r} or {WORD!r}")
        if self.unit_granularity == CHAR and self.tokens_per_unit != 1:
            raise ValueError(f"language {self.name}: char-like units are single tokens")
        if self.tokens_per_unit < 1:
            raise ValueError(f"language {self.name}: tokens_per_unit must be >= 1")

    def owns(self, token: int) -> bool:
        return self.token_id_range[0] <= token < self.token_id_range[1]


DEFAULT_LANGUAGES = {
    "A": ToyLanguageSpec("A", CHAR, (0, 20)),
    "B": ToyLanguageSpec("B", WORD, (20, 40), 2),
    "C": ToyLanguageSpec("C", WORD, (40, 56), 2),
}


def check_disjoint(specs: Sequence[ToyLanguageSpec]) -> None:
    ranges = sorted((s.token_id_range, s.name) for s in specs)
    for (a, na), (b, nb) in zip(ranges, ranges[1:]):
        if b[0] < a[1]:
            raise ValueError(f"token ranges of {na} {a} and {nb} {b} overlap")


@dataclass
class Utterance:
    id: str
    tokens: list[int]
    token_langs: list[str]
    features: np.ndarray
    lang: str  # language written into the decoder prefix

    def __post_init__(self):
        if len(self.tokens) != len(self.token_langs):
            raise ValueError(f"utterance {self.id}: tokens and token_langs differ in length")


@dataclass
class DatasetConfig:
    languages: tuple[str, ...] = ("A", "B")
    mix_ratio: tuple[float, ...] = (0.83, 0.17)
    switch_prob: float = 0.3
    size: int = 400
    min_units: int = 2
    max_units: int = 5
    frames_per_token: int = 2
    noise_std: float = 0.1
    d_feat: int = 16
    codebook_seed: int = 1234
    n_text_tokens: int = 56
    prefix_lang: str | None = None  # None: the language with the largest mix ratio

    def __post_init__(self):
        self.languages = tuple(self.languages)
        self.mix_ratio = tuple(float(r) for r in self.mix_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["languages"] = list(self.languages)
        d["mix_ratio"] = list(self.mix_ratio)
        return d


@dataclass
class DatasetManifest:
    split: str
    seed: int
    config: DatasetConfig
    utterances: list[Utterance] = field(default_factory=list)

    @property
    def mix_ratio(self):
        return self.config.mix_ratio

    @property
    def switch_prob(self):
        return self.config.switch_prob

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)


def codebook(n_text_tokens: int, d_feat: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, 1.0, size=(n_text_tokens, d_feat))


def synth_features(tokens: Sequence[int], seed: int, book: np.ndarray, frames_per_token: int = 2,
                   noise_std: float = 0.1) -> np.ndarray:
    """``frames_per_token`` noisy copies of each token's codebook row."""
    if len(tokens) == 0:
        raise ValueError("synth_features: empty token sequence")
    clean = np.repeat(book[np.asarray(tokens)], frames_per_token, axis=0)
    if noise_std == 0:
        return clean
    noise = np.random.default_rng(seed).normal(0.0, noise_std, size=clean.shape)
    return clean + noise


def gen_dataset(config: DatasetConfig, seed: int, split: str = "train",
                languages: dict[str, ToyLanguageSpec] | None = None) -> DatasetManifest:
    """Generate code-switched utterances.

    Each utterance is a run of units. The first unit's language is drawn from
    the unit-level mix; after every unit, with probability ``switch_prob``,
    the next language is redrawn from the same distribution. Unit-level
    weights are ``ratio / tokens_per_unit`` so the token-level mix matches
    ``mix_ratio``.
    """
    languages = DEFAULT_LANGUAGES if languages is None else languages
    specs = [languages[name] for name in config.languages]
    check_disjoint(specs)
    ratio = np.asarray(config.mix_ratio, dtype=float)
    if len(ratio) != len(specs) or abs(ratio.sum() - 1.0) > 1e-9 or (ratio < 0).any():
        raise ValueError(f"mix_ratio {config.mix_ratio} must be {len(specs)} weights summing to 1")
    if config.size < 1:
        raise ValueError("dataset size must be >= 1")
    if not 1 <= config.min_units <= config.max_units:
        raise ValueError("need 1 <= min_units <= max_units")
    for s in specs:
        if s.token_id_range[1] > config.n_text_tokens:
            raise ValueError(f"language {s.name} exceeds the text-token space")
    unit_w = ratio / np.array([s.tokens_per_unit for s in specs])
    unit_w = unit_w / unit_w.sum()
    prefix_lang = config.prefix_lang or specs[int(np.argmax(ratio))].name
    book = codebook(config.n_text_tokens, config.d_feat, config.codebook_seed)
    utts = []
    for i in range(config.size):
        rng = np.random.default_rng([seed, i])
        n_units = int(rng.integers(config.min_units, config.max_units + 1))
        cur = int(rng.choice(len(specs), p=unit_w))
        tokens, langs = [], []
        for u in range(n_units):
            if u and rng.random() < config.switch_prob:
                cur = int(rng.choice(len(specs), p=unit_w))
            s = specs[cur]
            lo, hi = s.token_id_range
            tokens += [int(t) for t in rng.integers(lo, hi, size=s.tokens_per_unit)]
            langs += [s.name] * s.tokens_per_unit
        noise_seed = int(rng.integers(2**31))
        feats = synth_features(tokens, noise_seed, book, config.frames_per_token,
                               config.noise_std)
        utts.append(Utterance(f"{split}-{i:05d}", tokens, langs, feats, prefix_lang))
    return DatasetManifest(split, seed, config, utts)


# ---------------------------------------------------------------- manifest IO

def write_features(path: Path, X: np.ndarray) -> None:
    X = np.ascontiguousarray(X, dtype="<f8")
    rows, cols = X.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", rows, cols))
        fh.write(X.tobytes())


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    rows, cols = struct.unpack("<II", raw[:8])
    return np.frombuffer(raw[8:], dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_manifest(manifest: DatasetManifest, directory) -> Path:
    """Write ``manifest.json`` plus one binary feature file per utterance."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for u in manifest.utterances:
        rel = f"features/{u.id}.f64"
        write_features(directory / rel, u.features)
        entries.append({"id": u.id, "tokens": u.tokens, "token_langs": u.token_langs,
                        "lang": u.lang, "feature_file": rel})
    doc = {"split": manifest.split, "seed": manifest.seed, "config": manifest.config.to_dict(),
           "utterances": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    cfg = DatasetConfig(**doc["config"])
    root = path.parent
    utts = []
    for e in doc["utterances"]:
        lang = e.get("lang") or cfg.prefix_lang or cfg.languages[int(np.argmax(cfg.mix_ratio))]
        utts.append(Utterance(e["id"], list(e["tokens"]), list(e["token_langs"]),
                              read_features(root / e["feature_file"]), lang))
    return DatasetManifest(doc["split"], doc["seed"], cfg, utts)


# ---------------------------------------------------------------- MER

UNKNOWN = "?"


def _lang_of(token: int, specs: Sequence[ToyLanguageSpec]) -> ToyLanguageSpec | None:
    for s in specs:
        if s.owns(token):
            return s
    return None


def _group(tokens, langs, specs_by_name) -> list[tuple[str, tuple[int, ...]]]:
    units, i = [], 0
    while i < len(tokens):
        lang = langs[i]
        spec = specs_by_name.get(lang)
        width = 1 if spec is None else spec.tokens_per_unit
        j = i + 1
        while j < len(tokens) and j - i < width and langs[j] == lang:
            j += 1
        units.append((lang, tuple(tokens[i:j])))
        i = j
    return units


def ref_units(tokens, token_langs, languages=None) -> list[tuple[str, tuple[int, ...]]]:
    languages = DEFAULT_LANGUAGES if languages is None else languages
    return _group(list(tokens), list(token_langs), languages)


def hyp_units(tokens, languages=None) -> list[tuple[str, tuple[int, ...]]]:
    """Group hypothesis tokens into units using token-id ranges."""
    languages = DEFAULT_LANGUAGES if languages is None else languages
    specs = list(languages.values())
    langs = []
    for t in tokens:
        s = _lang_of(t, specs)
        langs.append(UNKNOWN if s is None else s.name)
    return _group(list(tokens), langs, languages)


def align(ref: Sequence, hyp: Sequence) -> list[tuple[str, int | None, int | None]]:
    """Minimum-cost alignment (unit costs); ops are ``=``, ``S``, ``D``, ``I``.

    Ties prefer match/substitution, then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        r = ref[i - 1]
        prev, row = d[-1], [i]
        for j in range(1, m + 1):
            row.append(min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1))
        d.append(row)
    ops = []
    i, j = n, m
    while i or j:
        if i and j and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("=" if ref[i - 1] == hyp[j - 1] else "S", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and d[i][j] == d[i - 1][j] + 1:
            ops.append(("D", i - 1, None))
            i -= 1
        else:
            ops.append(("I", None, j - 1))
            j -= 1
    return ops[::-1]


@dataclass
class MerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_ref: int = 0
    per_language: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def mer(self) -> float:
        return self.errors / self.n_ref

    def __add__(self, other: "MerReport") -> "MerReport":
        per = {k: dict(v) for k, v in self.per_language.items()}
        for lang, counts in other.per_language.items():
            tgt = per.setdefault(lang, {"S": 0, "D": 0, "I": 0, "N": 0})
            for k, v in counts.items():
                tgt[k] += v
        return MerReport(self.substitutions + other.substitutions,
                         self.deletions + other.deletions,
                         self.insertions + other.insertions,
                         self.n_ref + other.n_ref, per)

    def to_dict(self) -> dict:
        return {"S": self.substitutions, "D": self.deletions, "I": self.insertions,
                "N": self.n_ref, "MER": self.mer, "per_language": self.per_language}


def unit_mer(ref: Sequence, hyp: Sequence, ref_langs=None, hyp_langs=None) -> MerReport:
    if len(ref) == 0:
        raise ValueError("MER is undefined for an empty reference")
    ref_langs = ref_langs or [UNKNOWN] * len(ref)
    hyp_langs = hyp_langs or [UNKNOWN] * len(hyp)
    rep = MerReport(n_ref=len(ref))
    per = rep.per_language

    def slot(lang):
        return per.setdefault(lang, {"S": 0, "D": 0, "I": 0, "N": 0})

    for lang in ref_langs:
        slot(lang)["N"] += 1
    for op, i, j in align(ref, hyp):
        if op == "S":
            rep.substitutions += 1
            slot(ref_langs[i])["S"] += 1
        elif op == "D":
            rep.deletions += 1
            slot(ref_langs[i])["D"] += 1
        elif op == "I":
            rep.insertions += 1
            slot(hyp_langs[j])["I"] += 1
    return rep


def mer(ref: Utterance, hyp: Sequence[int], languages=None) -> MerReport:
    """Mixed Error Rate of a hypothesis token sequence against a reference utterance."""
    r = ref_units(ref.tokens, ref.token_langs, languages)
    h = hyp_units(hyp, languages)
    return unit_mer(r, h, [u[0] for u in r], [u[0] for u in h])


def corpus_mer(refs: Sequence[Utterance], hyps: Sequence[Sequence[int]], languages=None) -> MerReport:
    total = MerReport()
    for r, h in zip(refs, hyps, strict=True):
        total = total + mer(r, h, languages)
    return total

"""Deterministic synthetic bilingual speech corpus.

Three toy languages share one IPA label set:

* ``src`` -- source language of the parallel corpus,
* ``tgt`` -- the "unwritten" target language (its phonemes are never used
  for training, only for evaluation references),
* ``wrt`` -- a "written" language with phoneme labels; it reuses a
  configurable fraction of the target inventory.

Every IPA symbol is rendered as a fixed two-tone chord whose dominant
frequency sits on the center of its own mel bin, so the same symbol sounds
identical in every language.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .quantizer import default_labels, write_labels
from .signal import SignalConfig, Waveform, mel_center_frequencies, save_wav

LANGS = ("src", "tgt", "wrt")
SPLITS = ("train", "dev", "test")


@dataclasses.dataclass
class ToySpec:
    seed: int = 1234
    inventory_size: int = 20
    lexicon_size: int = 12
    min_word_len: int = 2
    max_word_len: int = 4
    min_sentence_len: int = 2
    max_sentence_len: int = 5
    train_size: int = 500
    dev_size: int = 50
    test_size: int = 50
    unit_ms: float = 100.0
    crossfade_ms: float = 10.0
    overlap: float = 1.0
    min_word_count: int = 5
    sample_rate: int = 16000

    def validate(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if not 2 <= self.min_word_len <= self.max_word_len:
            raise ValueError("need 2 <= min_word_len <= max_word_len")
        if not 1 <= self.min_sentence_len <= self.max_sentence_len:
            raise ValueError("need 1 <= min_sentence_len <= max_sentence_len")
        if self.inventory_size < 2 or self.lexicon_size < 2:
            raise ValueError("inventory and lexicon need at least two entries")
        if self.lexicon_size * self.max_word_len < self.inventory_size:
            raise ValueError("lexicon too small to cover the phoneme inventory")
        return self

    @property
    def unit_samples(self) -> int:
        return int(round(self.sample_rate * self.unit_ms / 1000.0))

    @property
    def crossfade_samples(self) -> int:
        return int(round(self.sample_rate * self.crossfade_ms / 1000.0))


@dataclasses.dataclass
class Language:
    name: str
    inventory: list[str]
    lexicon: dict[str, list[str]]  # word -> phonemes


@dataclasses.dataclass
class ToyWorld:
    """Everything a seed determines except the sentences."""

    spec: ToySpec
    languages: dict[str, Language]
    translation: dict[str, str]  # src word -> tgt word
    formants: dict[str, tuple[float, float]]

    def to_json(self) -> dict:
        return {"spec": dataclasses.asdict(self.spec),
                "languages": {k: dataclasses.asdict(v) for k, v in self.languages.items()},
                "translation": self.translation,
                "formants": {k: list(v) for k, v in self.formants.items()}}

    @classmethod
    def from_json(cls, data) -> "ToyWorld":
        return cls(ToySpec(**data["spec"]),
                   {k: Language(**v) for k, v in data["languages"].items()},
                   dict(data["translation"]),
                   {k: tuple(v) for k, v in data["formants"].items()})

    @classmethod
    def load(cls, root) -> "ToyWorld":
        return cls.from_json(json.loads((Path(root) / "lexicon.json").read_text(encoding="utf-8")))


def assign_formants(symbols, spec: ToySpec) -> dict[str, tuple[float, float]]:
    """Dominant and secondary frequency per symbol, each on a mel-bin center."""
    centers = mel_center_frequencies(SignalConfig(sample_rate=spec.sample_rate))
    lo, hi = 6, len(centers) - 4
    n = len(symbols)
    if n > hi - lo + 1:
        raise ValueError(f"{n} phonemes do not fit into {hi - lo + 1} distinct mel bins")
    out = {}
    for j, sym in enumerate(symbols):
        b1 = lo + (j * (hi - lo)) // max(n - 1, 1)
        b2 = lo + (b1 - lo + 12 + (7 * j) % 29) % (hi - lo + 1)
        out[sym] = (float(centers[b1]), float(centers[b2]))
    return out


def _make_lexicon(name, inventory, spec, rng) -> dict[str, list[str]]:
    while True:
        lengths = rng.integers(spec.min_word_len, spec.max_word_len + 1, size=spec.lexicon_size)
        if lengths.sum() < len(inventory):
            continue
        slots = list(rng.permutation(inventory))
        slots += list(rng.choice(inventory, size=int(lengths.sum()) - len(inventory)))
        slots = [str(s) for s in rng.permutation(slots)]
        words, pos = [], 0
        for n in lengths:
            words.append(slots[pos:pos + n])
            pos += n
        distinct = len({tuple(w) for w in words}) == len(words)
        no_repeats = all(a != b for w in words for a, b in zip(w, w[1:]))
        if distinct and no_repeats:
            return {f"{name}{i:02d}": w for i, w in enumerate(words)}


def build_world(spec: ToySpec, labels=None) -> ToyWorld:
    spec.validate()
    labels = default_labels() if labels is None else list(labels)
    rng = np.random.default_rng(spec.seed)
    p = spec.inventory_size
    if 3 * p > len(labels):
        raise ValueError("label set too small for three disjoint inventories")
    picked = [labels[i] for i in rng.choice(len(labels), size=3 * p, replace=False)]
    tgt_inv, src_inv, pool = picked[:p], picked[p:2 * p], picked[2 * p:]
    shared = int(round(spec.overlap * p))
    wrt_inv = tgt_inv[:shared] + pool[:p - shared]
    langs = {}
    for name, inv in (("src", src_inv), ("tgt", tgt_inv), ("wrt", wrt_inv)):
        langs[name] = Language(name, list(inv), _make_lexicon(name, inv, spec, rng))
    src_words = list(langs["src"].lexicon)
    tgt_words = list(langs["tgt"].lexicon)
    perm = rng.permutation(len(tgt_words))
    translation = {s: tgt_words[int(j)] for s, j in zip(src_words, perm)}
    union = sorted({s for lang in langs.values() for s in lang.inventory}, key=labels.index)
    return ToyWorld(spec, langs, translation, assign_formants(union, spec))


def synth_utterance(phonemes, world: ToyWorld) -> Waveform:
    """Concatenate one two-tone chord per phoneme with linear cross-fades.

    Phoneme ``i`` starts at ``i * unit`` samples and lasts ``unit + crossfade``
    samples, so an ``n``-phoneme utterance has ``n * unit + crossfade`` samples.
    """
    spec = world.spec
    unit, fade = spec.unit_samples, spec.crossfade_samples
    seg = unit + fade
    out = np.zeros(len(phonemes) * unit + fade)
    t = np.arange(seg) / spec.sample_rate
    env = np.ones(seg)
    if fade:
        ramp = np.arange(1, fade + 1) / fade
        env[:fade] = ramp
        env[-fade:] = ramp[::-1]
    for i, ph in enumerate(phonemes):
        if ph not in world.formants:
            raise ValueError(f"unknown phoneme {ph!r}")
        f1, f2 = world.formants[ph]
        tone = 0.3 * np.sin(2 * np.pi * f1 * t) + 0.15 * np.sin(2 * np.pi * f2 * t)
        out[i * unit:i * unit + seg] += env * tone
    return Waveform(out, spec.sample_rate)


def _sample_sentences(lexicon_words, spec, rng, count):
    seen, out = set(), []
    while len(out) < count:
        n = int(rng.integers(spec.min_sentence_len, spec.max_sentence_len + 1))
        sent = tuple(str(w) for w in rng.choice(lexicon_words, size=n))
        if sent not in seen:
            seen.add(sent)
            out.append(sent)
    return out


def _split_sentences(words, spec, rng):
    sizes = (spec.train_size, spec.dev_size, spec.test_size)
    for _ in range(1000):
        sents = _sample_sentences(words, spec, rng, sum(sizes))
        train = sents[:sizes[0]]
        counts = {w: 0 for w in words}
        for s in train:
            for w in s:
                counts[w] += 1
        if min(counts.values()) >= spec.min_word_count:
            return {"train": train, "dev": sents[sizes[0]:sizes[0] + sizes[1]],
                    "test": sents[sizes[0] + sizes[1]:]}
    raise RuntimeError("could not satisfy the word coverage constraint; enlarge train_size")


def generate_sentences(world: ToyWorld) -> dict:
    """``{lang: {split: [word tuple, ...]}}``; src/tgt are parallel by index."""
    rng = np.random.default_rng([world.spec.seed, 1])
    src = _split_sentences(list(world.languages["src"].lexicon), world.spec, rng)
    wrt = _split_sentences(list(world.languages["wrt"].lexicon), world.spec, rng)
    tgt = {split: [tuple(world.translation[w] for w in s) for s in sents]
           for split, sents in src.items()}
    return {"src": src, "tgt": tgt, "wrt": wrt}


def sentence_phonemes(words, lang: Language) -> list[str]:
    return [p for w in words for p in lang.lexicon[w]]


def utterance_id(lang, split, i) -> str:
    return f"{split}-{i:04d}-{lang}"


def gen_toy_corpus(spec: ToySpec, root, labels=None) -> Path:
    """Write WAVs, ``manifest.jsonl``, ``lexicon.json``, ``labels.txt`` and
    per-split text files under ``root``; returns the manifest path."""
    root = Path(root)
    labels = default_labels() if labels is None else list(labels)
    world = build_world(spec, labels)
    sentences = generate_sentences(world)
    root.mkdir(parents=True, exist_ok=True)
    (root / "lexicon.json").write_text(json.dumps(world.to_json(), indent=1, ensure_ascii=False,
                                                  sort_keys=True) + "\n", encoding="utf-8")
    write_labels(root / "labels.txt", labels)
    records = []
    for lang in LANGS:
        language = world.languages[lang]
        for split in SPLITS:
            phn_lines, txt_lines = [], []
            for i, words in enumerate(sentences[lang][split]):
                uid = utterance_id(lang, split, i)
                phones = sentence_phonemes(words, language)
                rel = f"wav/{lang}/{uid}.wav"
                save_wav(root / rel, synth_utterance(phones, world))
                records.append({"id": uid, "audio": rel, "phonemes": " ".join(phones),
                                "transcript": " ".join(words), "lang": lang, "split": split})
                phn_lines.append(" ".join(phones))
                txt_lines.append(" ".join(words))
            (root / "text").mkdir(exist_ok=True)
            (root / "text" / f"{lang}.{split}.phn").write_text("\n".join(phn_lines) + "\n", encoding="utf-8")
            (root / "text" / f"{lang}.{split}.txt").write_text("\n".join(txt_lines) + "\n", encoding="utf-8")
    manifest = root / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- reference maps


def reference_tokens(phonemes, world: ToyWorld, signal: SignalConfig, ratio: int) -> list[str]:
    """Ideal IPA token per converter position: the phoneme sounding at the
    temporal center of the frames that position summarises."""
    spec = world.spec
    n_samples = len(phonemes) * spec.unit_samples + spec.crossfade_samples
    m = -(-signal.num_frames(n_samples) // ratio)
    out = []
    for j in range(m):
        center = (ratio * j + (ratio - 1) / 2) * signal.hop_len + signal.frame_len / 2
        k = min(max(int(center // spec.unit_samples), 0), len(phonemes) - 1)
        out.append(phonemes[k])
    return out


def tokens_to_words(symbols, lang: Language) -> list[str]:
    """Segment a token stream into lexicon words.

    Adjacent duplicate tokens are merged first; the segmentation then
    maximises the number of phonemes covered by exact word matches
    (unmatched symbols are dropped).
    """
    seq = []
    for s in symbols:
        if not seq or seq[-1] != s:
            seq.append(s)
    n = len(seq)
    words = sorted(lang.lexicon.items())
    cost = [0] + [math.inf] * n
    back: list[tuple[int, str | None]] = [(0, None)] * (n + 1)
    for i in range(1, n + 1):
        cost[i], back[i] = cost[i - 1] + 1, (i - 1, None)
        for w, phones in words:
            k = len(phones)
            if k <= i and seq[i - k:i] == phones and cost[i - k] < cost[i]:
                cost[i], back[i] = cost[i - k], (i - k, w)
    out, i = [], n
    while i > 0:
        j, w = back[i]
        if w is not None:
            out.append(w)
        i = j
    return out[::-1]

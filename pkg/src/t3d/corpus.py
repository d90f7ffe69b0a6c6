"""Loading a generated corpus (manifest + volumes + vocabulary) into memory.

Volumes at desk scale are small enough to hold eagerly; each sample keeps
its Volume, tokenized report, and manifest record together.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .formats import Manifest, SampleRecord, read_manifest, read_vocab, resolve_volume_path, read_volume
from .text import TokenSequence, Vocabulary, tokenize
from .volume import Volume


@dataclass
class CorpusSample:
    record: SampleRecord
    volume: Volume
    tokens: TokenSequence


@dataclass
class Corpus:
    manifest_path: Path
    vocab: Vocabulary
    samples: list[CorpusSample]

    def split(self, name: str) -> list[CorpusSample]:
        return [s for s in self.samples if s.record.split == name]

    def label_names(self) -> list[str]:
        names: set[str] = set()
        for s in self.samples:
            names.update(s.record.labels)
        return sorted(names)

    def labels_array(self, samples: list[CorpusSample], attrs: list[str]) -> np.ndarray:
        return np.array([[s.record.labels.get(a, 0) for a in attrs] for s in samples],
                        dtype=np.int64)


def load_corpus(manifest_path, max_tokens: int = 32) -> Corpus:
    """Read manifest, vocabulary, every volume, and tokenize every report."""
    manifest_path = Path(manifest_path)
    manifest: Manifest = read_manifest(manifest_path)
    vocab_path = manifest_path.parent / "vocab.txt"
    if not vocab_path.exists():
        raise ConfigError(f"vocab.txt not found next to manifest at {vocab_path}")
    vocab = Vocabulary(read_vocab(vocab_path))
    samples = []
    for record in manifest.records:
        vol = read_volume(resolve_volume_path(manifest_path, record))
        seq = tokenize(record.report_text, vocab, max_len=max_tokens)
        samples.append(CorpusSample(record=record, volume=vol, tokens=seq))
    return Corpus(manifest_path=manifest_path, vocab=vocab, samples=samples)

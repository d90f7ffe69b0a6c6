"""Synthetic phantom corpus: procedurally planted shapes with matching reports.

Each phantom renders a few geometric primitives (sphere / box / ellipsoid)
onto a noisy background. Shapes live in a 3x3x2 grid of location bins, carry
one of three intensity bands, and every rendered shape is named by a
deterministic report phrase, so the text <-> volume correspondence that the
alignment losses must recover is known exactly. Labels are presence
indicators: an attribute is 1 iff its phrase appears in the report.

Shapes are confined to distinct bins with a margin, so a simple intensity
threshold plus connected-component count recovers the number of planted
primitives.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PhantomSpecError
from .formats import (
    RESERVED_TOKENS,
    Manifest,
    SampleRecord,
    write_manifest,
    write_vocab,
    write_volume,
)
from .text import Vocabulary
from .volume import Volume

KINDS = ("sphere", "box", "ellipsoid")
BANDS = {"dim": 0.4, "moderate": 0.65, "bright": 0.9}
X_WORDS = ("left", "center", "right")
Y_WORDS = ("front", "middle", "back")
Z_WORDS = ("lower", "upper")
BIN_GRID = (3, 3, 2)

BACKGROUND_MAX = 0.15
COMPONENT_THRESHOLD = 0.3  # above background, below the dimmest band


@dataclass
class PhantomSpec:
    """Recipe for one phantom corpus.

    shape_catalog entries are (kind, band, bin) triples where bin is an
    (ix, iy, iz) index into the 3x3x2 location grid. Each generated sample
    draws n_shapes catalog entries with pairwise-distinct bins.
    """

    grid_dims: tuple[int, int, int] = (32, 32, 16)
    n_shapes: int = 2
    shape_catalog: list[tuple[str, str, tuple[int, int, int]]] = field(default_factory=list)
    vocab: list[str] = field(default_factory=list)
    rng_seed: int = 0

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        if len(self.grid_dims) != 3 or any(d < 8 for d in self.grid_dims):
            raise PhantomSpecError(f"grid_dims must be 3 values each >= 8, got {self.grid_dims}")
        if self.n_shapes < 0:
            raise PhantomSpecError(f"n_shapes must be >= 0, got {self.n_shapes}")
        if self.n_shapes > 0 and not self.shape_catalog:
            raise PhantomSpecError("empty catalog with n_shapes > 0")
        catalog = []
        for entry in self.shape_catalog:
            kind, band, bin_idx = entry[0], entry[1], tuple(int(b) for b in entry[2])
            if kind not in KINDS:
                raise PhantomSpecError(f"unknown shape kind {kind!r}")
            if band not in BANDS:
                raise PhantomSpecError(f"unknown intensity band {band!r}")
            if len(bin_idx) != 3 or not all(0 <= b < g for b, g in zip(bin_idx, BIN_GRID)):
                raise PhantomSpecError(f"location bin {bin_idx} outside the {BIN_GRID} grid")
            catalog.append((kind, band, bin_idx))
        self.shape_catalog = catalog
        distinct_bins = {e[2] for e in catalog}
        if self.n_shapes > len(distinct_bins):
            raise PhantomSpecError(
                f"catalog offers {len(distinct_bins)} distinct bins, cannot place {self.n_shapes} shapes"
            )
        if not self.vocab:
            self.vocab = corpus_vocab()
        self.vocab = list(self.vocab)
        # every catalog entry must map to a phrase the vocabulary can express
        vocab_set = set(self.vocab)
        for entry in self.shape_catalog:
            missing = [w for w in entry_phrase(entry).split() if w not in vocab_set]
            if missing:
                raise PhantomSpecError(f"catalog entry {entry} uses words missing from vocab: {missing}")

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)

    def to_json(self) -> dict:
        return {
            "grid_dims": list(self.grid_dims),
            "n_shapes": self.n_shapes,
            "shape_catalog": [[k, b, list(bn)] for k, b, bn in self.shape_catalog],
            "vocab": self.vocab,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        known = {"grid_dims", "n_shapes", "shape_catalog", "vocab", "rng_seed"}
        unknown = set(obj) - known
        if unknown:
            raise PhantomSpecError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**obj)


def entry_phrase(entry) -> str:
    kind, band, (ix, iy, iz) = entry
    return f"{band} {kind} in the {X_WORDS[ix]} {Y_WORDS[iy]} {Z_WORDS[iz]} region"


def bin_phrase(bin_idx) -> str:
    ix, iy, iz = bin_idx
    return f"{X_WORDS[ix]} {Y_WORDS[iy]} {Z_WORDS[iz]}"


def corpus_vocab() -> list[str]:
    """All words any phantom report can contain, in a fixed order."""
    words = ["no", "findings"]
    words += list(BANDS)
    words += list(KINDS)
    words += ["in", "the", "region"]
    words += list(X_WORDS) + list(Y_WORDS) + list(Z_WORDS)
    return list(RESERVED_TOKENS) + words


def default_phantom_spec(grid_dims=(32, 32, 16), n_shapes: int = 2, rng_seed: int = 0) -> PhantomSpec:
    """Catalog with every (kind, band) combination twice, all 18 bins used once."""
    bins = [(ix, iy, iz) for ix in range(3) for iy in range(3) for iz in range(2)]
    catalog = []
    for k in range(18):
        kind = KINDS[k % 3]
        band = list(BANDS)[(k // 3) % 3]
        catalog.append((kind, band, bins[(k * 7) % 18]))  # 7 is coprime with 18
    return PhantomSpec(grid_dims=grid_dims, n_shapes=n_shapes,
                       shape_catalog=catalog, vocab=corpus_vocab(), rng_seed=rng_seed)


def attribute_phrases(spec: PhantomSpec) -> dict[str, str]:
    """Label attribute -> the report phrase whose presence defines it."""
    attrs: dict[str, str] = {}
    for kind, band, bin_idx in spec.shape_catalog:
        attrs[kind] = kind
        attrs[band] = band
        attrs["loc_" + "_".join(bin_phrase(bin_idx).split())] = bin_phrase(bin_idx)
    return dict(sorted(attrs.items()))


def _bin_bounds(grid: int, n_bins: int, idx: int) -> tuple[int, int]:
    edges = np.linspace(0, grid, n_bins + 1).astype(int)
    return int(edges[idx]), int(edges[idx + 1])


def _shape_extents(kind: str, avail: np.ndarray) -> np.ndarray:
    """Half-extent per axis, scaled to the room available inside the bin."""
    if kind == "sphere":
        r = 0.8 * float(avail.min())
        return np.array([r, r, r])
    if kind == "box":
        return 0.75 * avail
    return np.array([1.0 * avail[0], 0.55 * avail[1], 0.45 * avail[2]])  # ellipsoid


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator):
    """Render one (volume, report_text, labels) triple.

    The same generator state yields bit-identical output. Shapes occupy
    pairwise-distinct location bins with at least one voxel of margin to the
    bin border, so thresholding at COMPONENT_THRESHOLD separates them.
    """
    dims = spec.grid_dims
    voxels = rng.uniform(0.0, BACKGROUND_MAX, size=dims).astype(np.float32)

    chosen: list[tuple[str, str, tuple[int, int, int]]] = []
    if spec.n_shapes > 0:
        seen_bins = set()
        for idx in rng.permutation(len(spec.shape_catalog)):
            entry = spec.shape_catalog[int(idx)]
            if entry[2] not in seen_bins:
                seen_bins.add(entry[2])
                chosen.append(entry)
            if len(chosen) == spec.n_shapes:
                break
        if len(chosen) < spec.n_shapes:
            raise PhantomSpecError("could not draw n_shapes entries with distinct bins")
        chosen.sort(key=spec.shape_catalog.index)

    for kind, band, bin_idx in chosen:
        bounds = [_bin_bounds(g, nb, b) for g, nb, b in zip(dims, BIN_GRID, bin_idx)]
        sizes = np.array([hi - lo for lo, hi in bounds], dtype=np.float64)
        avail = np.maximum((sizes - 2.0) / 2.0, 0.5)  # one-voxel margin to the bin border
        ext = _shape_extents(kind, avail)
        center = np.empty(3)
        for a, (lo, hi) in enumerate(bounds):
            c_lo = lo + ext[a] + 1.0
            c_hi = hi - 1.0 - ext[a]
            mid = 0.5 * (lo + hi - 1)
            center[a] = mid if c_hi <= c_lo else c_lo + rng.uniform(0.0, 1.0) * (c_hi - c_lo)
        grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
        d = [(g - c) for g, c in zip(grids, center)]
        if kind == "box":
            mask = (np.abs(d[0]) <= ext[0]) & (np.abs(d[1]) <= ext[1]) & (np.abs(d[2]) <= ext[2])
        else:
            mask = (d[0] / ext[0]) ** 2 + (d[1] / ext[1]) ** 2 + (d[2] / ext[2]) ** 2 <= 1.0
        voxels[mask] = np.float32(BANDS[band])
        # tiny bins can leave the analytic mask empty; always paint the center voxel
        voxels[tuple(int(round(c)) for c in center)] = np.float32(BANDS[band])

    report = ". ".join(entry_phrase(e) for e in chosen) if chosen else "no findings"
    phrases = attribute_phrases(spec)
    labels = {attr: int(phrase in report) for attr, phrase in phrases.items()}
    vol = Volume(voxels, spacing=(1.0, 1.0, 1.0), unit_range=True)
    return vol, report, labels


def split_of_rank(rank: int, n: int) -> str:
    """Deterministic 80/10/10 split by rank among n samples (test gets the tail)."""
    n_test = int(n / 10 + 0.5)
    n_val = int(n / 10 + 0.5)
    if rank >= n - n_test:
        return "test"
    if rank >= n - n_test - n_val:
        return "val"
    return "train"


def _id_hash(sample_id: str) -> str:
    return hashlib.sha256(sample_id.encode("utf-8")).hexdigest()


def assign_splits(ids: list[str]) -> dict[str, str]:
    """Rank ids by hash and cut exact 80/10/10 train/val/test splits."""
    ranked = sorted(ids, key=_id_hash)
    return {sid: split_of_rank(rank, len(ids)) for rank, sid in enumerate(ranked)}


def synth_corpus(spec: PhantomSpec, n: int, seed: int, out_dir) -> Path:
    """Write an n-sample corpus: volumes/, manifest.jsonl, vocab.txt, prompts.json.

    Sample i derives its generator from (seed, spec.rng_seed, i), so the
    corpus is reproducible sample-by-sample and byte-identical across runs.
    Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    ids = [f"ph{idx:05d}" for idx in range(n)]
    splits = assign_splits(ids)
    records = []
    for idx, sid in enumerate(ids):
        rng = np.random.default_rng(np.random.SeedSequence([seed, spec.rng_seed, idx]))
        vol, report, labels = generate_phantom(spec, rng)
        rel = f"volumes/{sid}.t3dv"
        write_volume(vol, out / rel)
        records.append(SampleRecord(id=sid, volume_path=rel, report_text=report,
                                    labels=labels, split=splits[sid]))
    manifest_path = out / "manifest.jsonl"
    write_manifest(Manifest(records), manifest_path)
    write_vocab(spec.vocab, out / "vocab.txt")
    prompts = {
        attr: {"positive": phrase, "negative": f"no {phrase}"}
        for attr, phrase in attribute_phrases(spec).items()
    }
    (out / "prompts.json").write_text(json.dumps(prompts, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    (out / "phantom_spec.json").write_text(json.dumps(spec.to_json(), indent=2) + "\n",
                                           encoding="utf-8")
    return manifest_path


def load_corpus_vocab(manifest_path) -> Vocabulary:
    from .formats import read_vocab

    return Vocabulary(read_vocab(Path(manifest_path).parent / "vocab.txt"))

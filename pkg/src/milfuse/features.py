"""Feature-bag files, paired-sample manifests, stratified splits and the synthetic generator.

Bag file layout (little-endian, no padding)::

    b"MILF" | u32 version=1 | u32 K | u32 D | K*D float32, row-major

Manifest files are UTF-8 TSV with the header ``slide_id  label  he_path  ihc_path``;
paths are resolved against a feature root given at load time. Fused manifests
written by the fusion stage use ``slide_id  label  fused_path``.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, FormatError, StratificationError, ValidationError
from .numerics import DTYPE, make_rng

log = logging.getLogger(__name__)

BAG_MAGIC = b"MILF"
BAG_VERSION = 1
_BAG_HEADER = struct.Struct("<4sIII")

MANIFEST_HEADER = ("slide_id", "label", "he_path", "ihc_path")
FUSED_MANIFEST_HEADER = ("slide_id", "label", "fused_path")


class Modality(str, enum.Enum):
    HE = "HE"
    IHC = "IHC"
    FUSED = "FUSED"

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValidationError(f"unknown modality {value!r}; expected one of he, ihc, fused") from None


@dataclass
class FeatureBag:
    slide_id: str
    modality: Modality
    features: np.ndarray  # K x D

    def __post_init__(self):
        self.modality = Modality.parse(self.modality)
        self.features = np.asarray(self.features, dtype=DTYPE)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValidationError(f"bag {self.slide_id}: features must be K x D with K, D >= 1, "
                                  f"got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValidationError(f"bag {self.slide_id}: non-finite feature values")

    @property
    def K(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]


@dataclass
class PairedSample:
    slide_id: str
    label: int
    he: FeatureBag
    ihc: FeatureBag

    def __post_init__(self):
        if self.he.modality is not Modality.HE or self.ihc.modality is not Modality.IHC:
            raise ValidationError(f"sample {self.slide_id}: expected an HE bag and an IHC bag, "
                                  f"got {self.he.modality.value} and {self.ihc.modality.value}")

    def bag(self, modality) -> FeatureBag:
        modality = Modality.parse(modality)
        if modality is Modality.HE:
            return self.he
        if modality is Modality.IHC:
            return self.ihc
        raise ValidationError("paired samples hold HE and IHC bags only")


@dataclass
class ManifestEntry:
    slide_id: str
    label: int
    he_path: str
    ihc_path: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    num_classes: int

    def __post_init__(self):
        _check_ids_and_labels([(e.slide_id, e.label) for e in self.entries], self.num_classes)

    def validate(self):
        """Full invariant check, including that every class occurs."""
        present = {e.label for e in self.entries}
        missing = sorted(set(range(self.num_classes)) - present)
        if missing:
            raise ValidationError(f"manifest has no samples for classes {missing}")

    @property
    def labels(self) -> dict[str, int]:
        return {e.slide_id: e.label for e in self.entries}

    @classmethod
    def from_samples(cls, samples, num_classes: int) -> "Manifest":
        return cls([ManifestEntry(s.slide_id, s.label, "", "") for s in samples], num_classes)


@dataclass
class SplitSpec:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int = 0

    def __post_init__(self):
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        if sum(map(len, sets)) != len(self.train_ids) + len(self.val_ids) + len(self.test_ids):
            raise ValidationError("split lists contain duplicate slide ids")
        if (sets[0] & sets[1]) or (sets[0] & sets[2]) or (sets[1] & sets[2]):
            raise ValidationError("split subsets overlap")

    def all_ids(self) -> set[str]:
        return set(self.train_ids) | set(self.val_ids) | set(self.test_ids)

    def subset(self, name: str) -> list[str]:
        try:
            return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[name]
        except KeyError:
            raise ValidationError(f"unknown split subset {name!r}") from None


def _check_ids_and_labels(pairs, num_classes: int):
    if num_classes < 2:
        raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
    seen = set()
    for slide_id, label in pairs:
        if slide_id in seen:
            raise ValidationError(f"duplicate slide_id {slide_id!r}")
        seen.add(slide_id)
        if not 0 <= label < num_classes:
            raise ValidationError(f"slide {slide_id!r}: label {label} outside [0, {num_classes})")


# ---------------------------------------------------------------------------
# bag files


def encode_bag(features: np.ndarray) -> bytes:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValidationError(f"bag features must be 2-D, got shape {arr.shape}")
    k, d = arr.shape
    return _BAG_HEADER.pack(BAG_MAGIC, BAG_VERSION, k, d) + arr.astype("<f4").tobytes(order="C")


def decode_bag(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError("truncated magic", len(buf), path)
    if buf[:4] != BAG_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {BAG_MAGIC!r}", 0, path)
    if len(buf) < _BAG_HEADER.size:
        raise FormatError("truncated header", len(buf), path)
    _, version, k, d = _BAG_HEADER.unpack_from(buf, 0)
    if version != BAG_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    if k < 1 or d < 1:
        raise FormatError(f"empty bag shape {k}x{d}", 8, path)
    want = _BAG_HEADER.size + 4 * k * d
    if len(buf) < want:
        raise FormatError(f"truncated payload: need {want} bytes for {k}x{d}, file has {len(buf)}",
                          len(buf), path)
    if len(buf) > want:
        raise FormatError(f"{len(buf) - want} trailing bytes after payload", want, path)
    data = np.frombuffer(buf, dtype="<f4", count=k * d, offset=_BAG_HEADER.size)
    return data.reshape(k, d)


def write_bag(bag: FeatureBag, path) -> None:
    Path(path).write_bytes(encode_bag(bag.features))


def read_bag(path, modality=Modality.HE, slide_id: str | None = None) -> FeatureBag:
    """Load a bag file; features are promoted to float64.

    The file carries neither id nor modality, so both come from the caller
    (``slide_id`` defaults to the file stem).
    """
    path = Path(path)
    raw = decode_bag(path.read_bytes(), path)
    return FeatureBag(slide_id or path.stem, modality, raw.astype(DTYPE))


# ---------------------------------------------------------------------------
# manifests


def _read_tsv(path, header: tuple[str, ...]) -> list[list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].rstrip("\r").split("\t")) != header:
        raise ValidationError(f"{path}: expected header {chr(9).join(header)!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.rstrip("\r").split("\t")
        if len(cols) != len(header):
            raise ValidationError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cols)}")
        rows.append(cols)
    return rows


def _parse_label(text: str, where: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ValidationError(f"{where}: label {text!r} is not an integer") from None


def read_manifest(path, num_classes: int = 4) -> Manifest:
    entries = []
    for i, (sid, label, he, ihc) in enumerate(_read_tsv(path, MANIFEST_HEADER), start=2):
        entries.append(ManifestEntry(sid, _parse_label(label, f"{path}:{i}"), he, ihc))
    return Manifest(entries, num_classes)


def write_manifest(manifest: Manifest, path) -> None:
    lines = ["\t".join(MANIFEST_HEADER)]
    lines += [f"{e.slide_id}\t{e.label}\t{e.he_path}\t{e.ihc_path}" for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, feature_root, num_classes: int = 4) -> list[PairedSample]:
    """Read a manifest and load every pair whose two bag files both load.

    Rows with a missing or unreadable file are dropped with a warning.
    """
    manifest = read_manifest(path, num_classes)
    root = Path(feature_root)
    samples = []
    for e in manifest.entries:
        try:
            he = read_bag(root / e.he_path, Modality.HE, e.slide_id)
            ihc = read_bag(root / e.ihc_path, Modality.IHC, e.slide_id)
        except (OSError, FormatError, ValidationError) as exc:
            log.warning("dropping pair %s: %s", e.slide_id, exc)
            continue
        samples.append(PairedSample(e.slide_id, e.label, he, ihc))
    if not samples:
        raise EmptyDatasetError(f"{path}: no usable H&E/IHC pairs")
    if len(samples) < len(manifest.entries):
        log.warning("kept %d of %d manifest rows", len(samples), len(manifest.entries))
    return samples


def write_fused_manifest(rows, path) -> None:
    """``rows``: iterable of (slide_id, label, fused_path)."""
    lines = ["\t".join(FUSED_MANIFEST_HEADER)] + [f"{s}\t{y}\t{p}" for s, y, p in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_fused_manifest(path, feature_root, num_classes: int = 4) -> list[tuple[FeatureBag, int]]:
    rows = _read_tsv(path, FUSED_MANIFEST_HEADER)
    parsed = [(sid, _parse_label(y, f"{path}:{i}"), p) for i, (sid, y, p) in enumerate(rows, start=2)]
    _check_ids_and_labels([(s, y) for s, y, _ in parsed], num_classes)
    root = Path(feature_root)
    out = [(read_bag(root / p, Modality.FUSED, sid), y) for sid, y, p in parsed]
    if not out:
        raise EmptyDatasetError(f"{path}: no fused bags")
    return out


# ---------------------------------------------------------------------------
# splits


def stratified_split(manifest: Manifest, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitSpec:
    """Per-class shuffled split into train/val/test.

    Per class with n samples: n_val = n_test = max(1, round(n * f)) and train
    takes the rest, so each class keeps at least one sample in every subset.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValidationError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    manifest.validate()
    by_class: dict[int, list[str]] = {}
    for e in manifest.entries:
        by_class.setdefault(e.label, []).append(e.slide_id)
    rng = make_rng(seed, 0x5EED)
    train, val, test = [], [], []
    for cls in sorted(by_class):
        ids = by_class[cls]
        n = len(ids)
        if n < 3:
            raise StratificationError(f"class {cls} has {n} samples; stratified splitting needs at least 3")
        n_val = max(1, int(round(n * fractions[1])))
        n_test = max(1, int(round(n * fractions[2])))
        order = rng.permutation(n)
        shuffled = [ids[i] for i in order]
        val += shuffled[:n_val]
        test += shuffled[n_val:n_val + n_test]
        train += shuffled[n_val + n_test:]
    return SplitSpec(sorted(train), sorted(val), sorted(test), seed)


def write_split(split: SplitSpec, path) -> None:
    lines = [f"seed={split.seed}"]
    for name in ("train", "val", "test"):
        lines.append(f"[{name}]")
        lines += split.subset(name)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split(path) -> SplitSpec:
    sections: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    seed = 0
    current = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("seed="):
            seed = int(line[5:])
        elif line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in sections:
                raise ValidationError(f"{path}:{lineno}: unknown section {line}")
        elif current is None:
            raise ValidationError(f"{path}:{lineno}: slide id outside any section")
        else:
            sections[current].append(line)
    return SplitSpec(sections["train"], sections["val"], sections["test"], seed)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Paired-modality toy data where each modality resolves half of the label.

    Label ``y`` in 0..3 is decomposed as ``coarse = y // 2`` and ``parity = y % 2``.
    HE bags carry a prototype chosen by ``coarse``; IHC bags one chosen by
    ``parity``. A fraction of instances in every bag get the prototype added,
    the rest are pure isotropic noise.
    """

    num_classes: int = 4
    samples_per_class: int = 50
    dim: int = 1024
    min_bag: int = 8
    max_bag: int = 32
    signal_fraction: float = 0.25
    signal_scale: float = 0.5
    noise_scale: float = 1.0

    def validate(self):
        if self.num_classes != 4:
            raise ValidationError("the coarse/parity cue design needs exactly 4 classes, "
                                  f"got {self.num_classes}")
        if self.samples_per_class < 10:
            raise ValidationError(f"samples_per_class must be >= 10, got {self.samples_per_class}")
        if self.dim < 1:
            raise ValidationError(f"dim must be positive, got {self.dim}")
        if not 1 <= self.min_bag <= self.max_bag:
            raise ValidationError(f"need 1 <= min_bag <= max_bag, got {self.min_bag}, {self.max_bag}")
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise ValidationError(f"signal_fraction must lie in [0, 1], got {self.signal_fraction}")
        if self.signal_scale < 0 or self.noise_scale <= 0:
            raise ValidationError("signal_scale must be >= 0 and noise_scale > 0")


@dataclass
class SyntheticDataset:
    manifest: Manifest
    samples: list[PairedSample]
    manifest_path: Path | None = None
    class_counts: dict[int, int] = field(default_factory=dict)


def _synth_bag(rng, cfg: SynthConfig, prototype: np.ndarray) -> np.ndarray:
    k = int(rng.integers(cfg.min_bag, cfg.max_bag + 1))
    x = rng.standard_normal((k, cfg.dim)) * cfg.noise_scale
    n_signal = int(round(cfg.signal_fraction * k))
    if cfg.signal_fraction > 0:
        n_signal = max(1, n_signal)
    if n_signal:
        rows = rng.choice(k, size=n_signal, replace=False)
        x[rows] += prototype
    # pass through float32 so in-memory samples equal what read_bag returns
    return x.astype(np.float32).astype(DTYPE)


def generate_synthetic_dataset(cfg: SynthConfig, seed: int, out_dir=None) -> SyntheticDataset:
    """Build the toy dataset; writes ``manifest.tsv`` and ``bags/*.milf`` when ``out_dir`` is given."""
    cfg.validate()
    proto_rng = make_rng(seed, 1)
    he_protos = proto_rng.standard_normal((2, cfg.dim)) * cfg.signal_scale
    ihc_protos = proto_rng.standard_normal((2, cfg.dim)) * cfg.signal_scale
    bag_rng = make_rng(seed, 2)

    entries, samples = [], []
    width = len(str(cfg.num_classes * cfg.samples_per_class - 1))
    idx = 0
    for label in range(cfg.num_classes):
        for _ in range(cfg.samples_per_class):
            sid = f"syn{idx:0{width}d}"
            idx += 1
            he = FeatureBag(sid, Modality.HE, _synth_bag(bag_rng, cfg, he_protos[label // 2]))
            ihc = FeatureBag(sid, Modality.IHC, _synth_bag(bag_rng, cfg, ihc_protos[label % 2]))
            samples.append(PairedSample(sid, label, he, ihc))
            entries.append(ManifestEntry(sid, label, f"bags/{sid}_he.milf", f"bags/{sid}_ihc.milf"))
    manifest = Manifest(entries, cfg.num_classes)
    result = SyntheticDataset(manifest, samples,
                              class_counts={c: cfg.samples_per_class for c in range(cfg.num_classes)})
    if out_dir is not None:
        out = Path(out_dir)
        (out / "bags").mkdir(parents=True, exist_ok=True)
        for e, s in zip(entries, samples):
            write_bag(s.he, out / e.he_path)
            write_bag(s.ihc, out / e.ihc_path)
        result.manifest_path = out / "manifest.tsv"
        write_manifest(manifest, result.manifest_path)
    return result

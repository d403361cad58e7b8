"""Datasets as feature manifests.

A manifest is the unit of data exchange: named modalities with fixed
feature dims, a class count, a split tag, and per-sample records holding
dense float64 vectors for whichever modalities the sample has. Raw media
never enters the package; features are precomputed elsewhere.

Constraints the rest of the package relies on:
  - every sample carries at least one modality,
  - present vectors match the declared dim exactly and are finite,
  - labels lie in [0, class_count),
  - save_manifest(load_manifest(p)) reproduces p byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng

SPLITS = ("train", "test")


@dataclass(frozen=True)
class ModalityDescriptor:
    name: str
    dim: int


@dataclass
class Sample:
    """One record: features keyed by modality name, present keys only."""

    id: str
    label: int
    features: dict[str, np.ndarray]

    def presence(self, modalities: tuple[ModalityDescriptor, ...]) -> tuple[bool, ...]:
        return tuple(m.name in self.features for m in modalities)


@dataclass
class DatasetManifest:
    modalities: tuple[ModalityDescriptor, ...]
    class_count: int
    split: str
    samples: list[Sample] = field(default_factory=list)

    _id_index: dict[str, int] | None = field(default=None, repr=False, compare=False)

    def index_of(self, sample_id: str) -> int:
        if self._id_index is None or len(self._id_index) != len(self.samples):
            self._id_index = {s.id: i for i, s in enumerate(self.samples)}
        try:
            return self._id_index[sample_id]
        except KeyError:
            raise ValueError(f"unknown sample id {sample_id!r}") from None

    def by_id(self, sample_id: str) -> Sample:
        return self.samples[self.index_of(sample_id)]


def validate_manifest(manifest: DatasetManifest) -> None:
    """Raise ValueError naming the offending sample on any format violation."""
    names = [m.name for m in manifest.modalities]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate modality names: {names}")
    if not manifest.modalities:
        raise ValueError("manifest declares no modalities")
    if manifest.class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {manifest.class_count}")
    if manifest.split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {manifest.split!r}")
    dims = {m.name: m.dim for m in manifest.modalities}
    seen: set[str] = set()
    for s in manifest.samples:
        if s.id in seen:
            raise ValueError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)
        if not s.features:
            raise ValueError(f"sample {s.id!r} has no modalities")
        if not (0 <= s.label < manifest.class_count):
            raise ValueError(f"sample {s.id!r} label {s.label} outside [0, {manifest.class_count})")
        for name, vec in s.features.items():
            if name not in dims:
                raise ValueError(f"sample {s.id!r} carries undeclared modality {name!r}")
            if vec.shape != (dims[name],):
                raise ValueError(
                    f"sample {s.id!r} modality {name!r} has shape {vec.shape}, expected ({dims[name]},)"
                )
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"sample {s.id!r} modality {name!r} has non-finite entries")


def _header_obj(manifest: DatasetManifest) -> dict:
    return {
        "modalities": [{"name": m.name, "dim": m.dim} for m in manifest.modalities],
        "class_count": manifest.class_count,
        "split": manifest.split,
    }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write header line plus one record line per sample, UTF-8 JSONL."""
    validate_manifest(manifest)
    order = [m.name for m in manifest.modalities]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_header_obj(manifest), ensure_ascii=False) + "\n")
        for s in manifest.samples:
            feats = {name: s.features[name].tolist() for name in order if name in s.features}
            rec = {"id": s.id, "label": s.label, "features": feats}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest file")
    head = json.loads(lines[0])
    modalities = tuple(ModalityDescriptor(m["name"], int(m["dim"])) for m in head["modalities"])
    samples = []
    for ln in lines[1:]:
        if not ln:
            continue
        rec = json.loads(ln)
        feats = {k: np.asarray(v, dtype=np.float64) for k, v in rec["features"].items()}
        samples.append(Sample(id=rec["id"], label=int(rec["label"]), features=feats))
    manifest = DatasetManifest(
        modalities=modalities,
        class_count=int(head["class_count"]),
        split=head["split"],
        samples=samples,
    )
    validate_manifest(manifest)
    return manifest


@dataclass(frozen=True)
class SynthConfig:
    """Gaussian mixture generator settings.

    Per class and modality a centroid is drawn componentwise from
    Normal(0, centroid_scale^2); each sample adds Normal(0, noise_scale^2)
    noise. Centroids depend on (seed,) only, noise on (seed, split), so
    train and test splits share centroids.
    """

    class_count: int = 4
    modalities: tuple[str, ...] = ("image", "text")
    dims: tuple[int, ...] = (16, 16)
    samples_per_class: int = 50
    centroid_scale: float = 3.0
    noise_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if len(self.modalities) != len(self.dims):
            raise ValueError("modalities and dims must have equal length")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modality names: {self.modalities}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.centroid_scale < 0 or self.noise_scale < 0:
            raise ValueError("scales must be nonnegative")


def synth_centroids(cfg: SynthConfig) -> dict[tuple[int, str], np.ndarray]:
    """Class/modality centroids as the generator draws them."""
    cfg.validate()
    gen = rng.substream(cfg.seed, "synth", "centroids")
    out: dict[tuple[int, str], np.ndarray] = {}
    for c in range(cfg.class_count):
        for name, dim in zip(cfg.modalities, cfg.dims):
            out[(c, name)] = rng.normal(gen, dim, scale=cfg.centroid_scale)
    return out


def synth_generate(cfg: SynthConfig, split: str = "train", samples_per_class: int | None = None) -> DatasetManifest:
    """Fully aligned synthetic manifest; same cfg and split give identical output."""
    cfg.validate()
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    per_class = cfg.samples_per_class if samples_per_class is None else samples_per_class
    centroids = synth_centroids(cfg)
    noise = rng.substream(cfg.seed, "synth", "noise", split)
    samples = []
    for c in range(cfg.class_count):
        for j in range(per_class):
            feats = {}
            for name, dim in zip(cfg.modalities, cfg.dims):
                feats[name] = centroids[(c, name)] + rng.normal(noise, dim, scale=cfg.noise_scale)
            samples.append(Sample(id=f"{split}-{c:02d}-{j:05d}", label=c, features=feats))
    manifest = DatasetManifest(
        modalities=tuple(ModalityDescriptor(n, d) for n, d in zip(cfg.modalities, cfg.dims)),
        class_count=cfg.class_count,
        split=split,
        samples=samples,
    )
    validate_manifest(manifest)
    return manifest


def pattern_labels(modalities: tuple[ModalityDescriptor, ...]) -> list[str]:
    """The 2^M - 1 nonempty presence patterns, ordered by ascending bitmask."""
    m = len(modalities)
    labels = []
    for bits in range(1, 2**m):
        present = [modalities[i].name for i in range(m) if bits >> i & 1]
        labels.append("+".join(present))
    return labels


def _pattern_of(mask: tuple[bool, ...], modalities: tuple[ModalityDescriptor, ...]) -> str:
    return "+".join(m.name for m, keep in zip(modalities, mask) if keep)


@dataclass
class CountTable:
    """Dense per-(client, class, pattern) sample counts."""

    patterns: list[str]
    class_count: int
    client_count: int
    counts: dict[tuple[int, int, str], int]

    def rows(self) -> list[tuple[int, int, str, int]]:
        out = []
        for k in range(self.client_count):
            for c in range(self.class_count):
                for p in self.patterns:
                    out.append((k, c, p, self.counts.get((k, c, p), 0)))
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["client", "class", "pattern", "count"])
            writer.writerows(self.rows())

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["client", "class", "pattern", "count"])
        writer.writerows(self.rows())
        return buf.getvalue()


def modality_stats(partition, manifest: DatasetManifest) -> CountTable:
    """Count partition samples by client, label, and effective presence pattern.

    Raises ValueError on a partition sample id missing from the manifest.
    """
    patterns = pattern_labels(manifest.modalities)
    counts: dict[tuple[int, int, str], int] = {}
    for k, slot in enumerate(partition.clients):
        for sid, mask in zip(slot.sample_ids, slot.masks):
            sample = manifest.by_id(sid)
            label = _pattern_of(mask, manifest.modalities)
            if not label:
                raise ValueError(f"sample {sid!r} has an all-false mask")
            key = (k, sample.label, label)
            counts[key] = counts.get(key, 0) + 1
    return CountTable(
        patterns=patterns,
        class_count=manifest.class_count,
        client_count=len(partition.clients),
        counts=counts,
    )


def nearest_centroid_accuracy(train: DatasetManifest, test: DatasetManifest) -> float:
    """Accuracy of classifying test samples by nearest train class mean.

    Uses concatenated per-modality features; both manifests must be fully
    aligned. A reference point for how separable a synthetic draw is.
    """
    def stacked(man: DatasetManifest) -> np.ndarray:
        rows = []
        for s in man.samples:
            rows.append(np.concatenate([s.features[m.name] for m in man.modalities]))
        return np.stack(rows)

    x_train = stacked(train)
    y_train = np.array([s.label for s in train.samples])
    x_test = stacked(test)
    y_test = np.array([s.label for s in test.samples])
    means = np.stack([x_train[y_train == c].mean(axis=0) for c in range(train.class_count)])
    d2 = ((x_test[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == y_test).mean())

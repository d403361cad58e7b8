"""Client partitions and modality-heterogeneity scenario constructors.

A partition assigns every manifest sample to exactly one of K clients and
records an effective presence mask per assignment (a subset of what the
manifest sample actually carries, never empty). Four constructors:

  aligned   Dirichlet(alpha) label skew, all modalities kept everywhere.
  missing   per-sample independent modality drops with probability beta;
            a sample losing everything keeps one modality chosen uniformly.
  cross     a seeded subset of clients keeps only modality 0 on all their
            samples, the rest keep only modality 1 (two modalities only).
  hybrid    per-client coin flips: each modality is kept client-wide with
            probability keep_prob; a client dropping everything retains
            one modality chosen uniformly.

The non-aligned constructors start from an aligned partition, so label
skew and modality damage compose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .data import DatasetManifest

SCENARIO_KINDS = ("aligned", "missing", "cross", "hybrid")
CLIENT_KINDS = ("aligned", "partial_missing", "single_modality")


@dataclass(frozen=True)
class ScenarioSpec:
    """Which constructor to run and with what knobs.

    alpha always applies (label skew comes first); exactly one of beta,
    image_only_clients, keep_prob may be set, matching kind.
    """

    kind: str
    clients: int
    alpha: float
    seed: int
    beta: float | None = None
    image_only_clients: int | None = None
    keep_prob: float | None = None

    def validate(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"kind must be one of {SCENARIO_KINDS}, got {self.kind!r}")
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        extras = {
            "aligned": None,
            "missing": "beta",
            "cross": "image_only_clients",
            "hybrid": "keep_prob",
        }
        needed = extras[self.kind]
        for name in ("beta", "image_only_clients", "keep_prob"):
            value = getattr(self, name)
            if name == needed and value is None:
                raise ValueError(f"scenario {self.kind!r} requires {name}")
            if name != needed and value is not None:
                raise ValueError(f"scenario {self.kind!r} does not take {name}")
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.image_only_clients is not None and not 0 <= self.image_only_clients <= self.clients:
            raise ValueError(
                f"image_only_clients must lie in [0, {self.clients}], got {self.image_only_clients}"
            )
        if self.keep_prob is not None and not 0.0 <= self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in [0, 1], got {self.keep_prob}")

    def level(self) -> float | int:
        """The kind's own heterogeneity knob, for sweep/report labeling."""
        return {
            "aligned": self.alpha,
            "missing": self.beta,
            "cross": self.image_only_clients,
            "hybrid": self.keep_prob,
        }[self.kind]

    def to_json_obj(self) -> dict:
        obj = {"kind": self.kind, "clients": self.clients, "alpha": self.alpha, "seed": self.seed}
        for name in ("beta", "image_only_clients", "keep_prob"):
            value = getattr(self, name)
            if value is not None:
                obj[name] = value
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ScenarioSpec":
        spec = cls(
            kind=obj["kind"],
            clients=int(obj["clients"]),
            alpha=float(obj["alpha"]),
            seed=int(obj["seed"]),
            beta=obj.get("beta"),
            image_only_clients=obj.get("image_only_clients"),
            keep_prob=obj.get("keep_prob"),
        )
        spec.validate()
        return spec


@dataclass
class ClientSlot:
    """One client's assignment: sample ids plus effective masks, aligned."""

    sample_ids: list[str] = field(default_factory=list)
    masks: list[tuple[bool, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass
class ClientPartition:
    clients: list[ClientSlot]

    def sizes(self) -> list[int]:
        return [len(slot) for slot in self.clients]

    def total(self) -> int:
        return sum(self.sizes())


def _check_assignment(manifest: DatasetManifest, partition: ClientPartition) -> None:
    seen: set[str] = set()
    for k, slot in enumerate(partition.clients):
        if len(slot.sample_ids) != len(slot.masks):
            raise ValueError(f"client {k}: ids and masks out of step")
        for sid, mask in zip(slot.sample_ids, slot.masks):
            if sid in seen:
                raise ValueError(f"sample {sid!r} assigned to more than one client")
            seen.add(sid)
            sample = manifest.by_id(sid)
            present = sample.presence(manifest.modalities)
            if not any(mask):
                raise ValueError(f"sample {sid!r} on client {k} has an empty mask")
            if any(m and not p for m, p in zip(mask, present)):
                raise ValueError(f"sample {sid!r} on client {k} masks in an absent modality")
    if len(seen) != len(manifest.samples):
        raise ValueError(f"partition covers {len(seen)} of {len(manifest.samples)} samples")


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to total, proportional up to rounding.

    Floor everything, then hand the leftover units to the largest
    fractional remainders (ties broken by lower index).
    """
    raw = np.asarray(proportions, dtype=np.float64) * total
    base = np.floor(raw).astype(np.int64)
    leftover = int(total - base.sum())
    if leftover:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:leftover]] += 1
    return base


def dirichlet_partition(manifest: DatasetManifest, clients: int, alpha: float, seed: int) -> ClientPartition:
    """Label-skewed split: per class, client shares ~ Dirichlet(alpha * 1_K)."""
    if clients < 1:
        raise ValueError(f"clients must be >= 1, got {clients}")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    gen = rng.substream(seed, "dirichlet")
    slots = [ClientSlot() for _ in range(clients)]
    by_class: dict[int, list[int]] = {c: [] for c in range(manifest.class_count)}
    for i, sample in enumerate(manifest.samples):
        by_class[sample.label].append(i)
    for c in range(manifest.class_count):
        idx = np.array(by_class[c], dtype=np.int64)
        if idx.size == 0:
            continue
        idx = idx[gen.permutation(idx.size)]
        shares = gen.dirichlet(np.full(clients, alpha))
        counts = largest_remainder(shares, idx.size)
        start = 0
        for k in range(clients):
            for i in idx[start : start + counts[k]]:
                sample = manifest.samples[int(i)]
                slots[k].sample_ids.append(sample.id)
                slots[k].masks.append(sample.presence(manifest.modalities))
            start += counts[k]
    partition = ClientPartition(clients=slots)
    _check_assignment(manifest, partition)
    return partition


def _require_aligned(partition: ClientPartition, op: str) -> int:
    width = None
    for k, slot in enumerate(partition.clients):
        for sid, mask in zip(slot.sample_ids, slot.masks):
            if width is None:
                width = len(mask)
            if not all(mask):
                raise ValueError(f"{op} needs a fully aligned input; sample {sid!r} is already masked")
    if width is None:
        raise ValueError(f"{op} got a partition with no samples")
    return width


def apply_missing(partition: ClientPartition, beta: float, seed: int) -> ClientPartition:
    """Drop each modality of each sample independently with probability beta.

    A sample that would lose every modality keeps one chosen uniformly, so
    masks stay nonempty even at beta = 1.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    width = _require_aligned(partition, "apply_missing")
    gen = rng.substream(seed, "missing")
    out = []
    for slot in partition.clients:
        masks = []
        for _ in slot.sample_ids:
            keep = gen.random(width) >= beta
            if not keep.any():
                keep[int(gen.integers(width))] = True
            masks.append(tuple(bool(b) for b in keep))
        out.append(ClientSlot(sample_ids=list(slot.sample_ids), masks=masks))
    return ClientPartition(clients=out)


def apply_cross(partition: ClientPartition, image_only_clients: int, seed: int) -> ClientPartition:
    """Split clients by modality: a seeded subset keeps only modality 0."""
    width = _require_aligned(partition, "apply_cross")
    if width != 2:
        raise ValueError(f"apply_cross needs exactly 2 modalities, got {width}")
    k = len(partition.clients)
    if not 0 <= image_only_clients <= k:
        raise ValueError(f"image_only_clients must lie in [0, {k}], got {image_only_clients}")
    gen = rng.substream(seed, "cross")
    chosen = set(int(i) for i in gen.choice(k, size=image_only_clients, replace=False))
    out = []
    for idx, slot in enumerate(partition.clients):
        mask = (True, False) if idx in chosen else (False, True)
        out.append(ClientSlot(sample_ids=list(slot.sample_ids), masks=[mask] * len(slot)))
    return ClientPartition(clients=out)


def apply_hybrid(partition: ClientPartition, keep_prob: float, seed: int) -> ClientPartition:
    """Client-wide modality coin flips: keep each with probability keep_prob.

    A client flipping everything away retains one modality chosen
    uniformly. Every sample of a client shares the client's mask.
    """
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in [0, 1], got {keep_prob}")
    width = _require_aligned(partition, "apply_hybrid")
    gen = rng.substream(seed, "hybrid")
    out = []
    for slot in partition.clients:
        keep = gen.random(width) < keep_prob
        if not keep.any():
            keep[int(gen.integers(width))] = True
        mask = tuple(bool(b) for b in keep)
        out.append(ClientSlot(sample_ids=list(slot.sample_ids), masks=[mask] * len(slot)))
    return ClientPartition(clients=out)


def build_scenario(manifest: DatasetManifest, spec: ScenarioSpec) -> ClientPartition:
    """Aligned Dirichlet split, then the scenario's modality treatment."""
    spec.validate()
    base = dirichlet_partition(manifest, spec.clients, spec.alpha, rng.seed_for(spec.seed, "labels"))
    if spec.kind == "aligned":
        return base
    if spec.kind == "missing":
        return apply_missing(base, spec.beta, rng.seed_for(spec.seed, "modality"))
    if spec.kind == "cross":
        return apply_cross(base, spec.image_only_clients, rng.seed_for(spec.seed, "modality"))
    return apply_hybrid(base, spec.keep_prob, rng.seed_for(spec.seed, "modality"))


def client_missing_rate(slot: ClientSlot, modality_count: int) -> float:
    """Fraction of (sample, modality) slots absent on this client."""
    if len(slot) == 0:
        raise ValueError("client has no samples")
    absent = sum(modality_count - sum(mask) for mask in slot.masks)
    return absent / (len(slot) * modality_count)


def classify_client(slot: ClientSlot) -> str:
    """aligned, partial_missing, or single_modality from effective masks."""
    if len(slot) == 0:
        raise ValueError("client has no samples")
    width = len(slot.masks[0])
    present_counts = [0] * width
    full = 0
    for mask in slot.masks:
        for i, b in enumerate(mask):
            present_counts[i] += int(b)
        full += int(all(mask))
    if any(c == 0 for c in present_counts):
        return "single_modality"
    if full == len(slot):
        return "aligned"
    return "partial_missing"


def save_partition(partition: ClientPartition, spec: ScenarioSpec, path: str | Path) -> None:
    obj = {
        "spec": spec.to_json_obj(),
        "clients": [
            {
                "id": k,
                "samples": [
                    {"sid": sid, "mask": list(mask)}
                    for sid, mask in zip(slot.sample_ids, slot.masks)
                ],
            }
            for k, slot in enumerate(partition.clients)
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, ensure_ascii=False, indent=1) + "\n")


def load_partition(path: str | Path) -> tuple[ScenarioSpec, ClientPartition]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    spec = ScenarioSpec.from_json_obj(obj["spec"])
    slots = []
    for entry in sorted(obj["clients"], key=lambda e: e["id"]):
        ids = [s["sid"] for s in entry["samples"]]
        masks = [tuple(bool(b) for b in s["mask"]) for s in entry["samples"]]
        slots.append(ClientSlot(sample_ids=ids, masks=masks))
    return spec, ClientPartition(clients=slots)

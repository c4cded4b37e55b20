"""Island-partitioned MAP-Elites archive over (complexity bin, score bin) cells."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .core import CandidateProgram, EvalResult, InvalidArgumentError, Stage

INSERT_NEW_CELL = "new_cell"
INSERT_REPLACED = "replaced"
INSERT_REJECTED = "rejected"


class EmptyIslandError(LookupError):
    """Sampling was requested from an island with no occupied cells."""


@dataclass(frozen=True)
class CellKey:
    island: int
    complexity_bin: int
    score_bin: int

    def to_record(self) -> dict:
        return {
            "island": self.island,
            "complexity_bin": self.complexity_bin,
            "score_bin": self.score_bin,
        }

    @classmethod
    def from_record(cls, record: dict) -> "CellKey":
        return cls(int(record["island"]), int(record["complexity_bin"]), int(record["score_bin"]))


@dataclass(frozen=True)
class ArchiveConfig:
    island_count: int = 4
    complexity_bins: int = 10
    score_bins: int = 10
    score_range: tuple = (0.0, 10.0)
    migration_interval: int = 10
    migration_size: int = 1
    top_k: int = 3
    diverse_k: int = 2
    rng_seed: int = 0
    complexity_ceiling: int = 65536
    parent_temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.island_count < 1:
            raise InvalidArgumentError("island_count must be >= 1")
        if self.complexity_bins < 1 or self.score_bins < 1:
            raise InvalidArgumentError("bin counts must be >= 1")
        if self.top_k + self.diverse_k < 1:
            raise InvalidArgumentError("top_k + diverse_k must be >= 1")
        lo, hi = self.score_range
        if not hi > lo:
            raise InvalidArgumentError("score_range must be an increasing pair")
        if self.migration_interval < 1 or self.migration_size < 0:
            raise InvalidArgumentError("bad migration settings")
        if self.complexity_ceiling < 1:
            raise InvalidArgumentError("complexity_ceiling must be >= 1")
        if self.parent_temperature <= 0:
            raise InvalidArgumentError("parent_temperature must be > 0")

    def to_record(self) -> dict:
        return {
            "island_count": self.island_count,
            "complexity_bins": self.complexity_bins,
            "score_bins": self.score_bins,
            "score_range": list(self.score_range),
            "migration_interval": self.migration_interval,
            "migration_size": self.migration_size,
            "top_k": self.top_k,
            "diverse_k": self.diverse_k,
            "rng_seed": self.rng_seed,
            "complexity_ceiling": self.complexity_ceiling,
            "parent_temperature": self.parent_temperature,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ArchiveConfig":
        return cls(
            island_count=int(record["island_count"]),
            complexity_bins=int(record["complexity_bins"]),
            score_bins=int(record["score_bins"]),
            score_range=tuple(record["score_range"]),
            migration_interval=int(record["migration_interval"]),
            migration_size=int(record["migration_size"]),
            top_k=int(record["top_k"]),
            diverse_k=int(record["diverse_k"]),
            rng_seed=int(record["rng_seed"]),
            complexity_ceiling=int(record.get("complexity_ceiling", 65536)),
            parent_temperature=float(record.get("parent_temperature", 1.0)),
        )


@dataclass(frozen=True)
class ArchiveEntry:
    key: CellKey
    candidate_id: str
    score: float
    speedup: Optional[float]
    stage: Stage
    inserted_at_iteration: int
    sequence: int  # global insertion counter, breaks score ties deterministically

    def to_record(self) -> dict:
        return {
            "key": self.key.to_record(),
            "candidate_id": self.candidate_id,
            "score": self.score,
            "speedup": self.speedup,
            "stage": self.stage.value,
            "inserted_at_iteration": self.inserted_at_iteration,
            "sequence": self.sequence,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ArchiveEntry":
        return cls(
            key=CellKey.from_record(record["key"]),
            candidate_id=record["candidate_id"],
            score=float(record["score"]),
            speedup=record.get("speedup"),
            stage=Stage(record["stage"]),
            inserted_at_iteration=int(record["inserted_at_iteration"]),
            sequence=int(record["sequence"]),
        )


@dataclass(frozen=True)
class InsertOutcome:
    kind: str  # new_cell | replaced | rejected
    old_candidate_id: Optional[str] = None


def complexity_feature(source: str, config: ArchiveConfig) -> int:
    """Log-binned non-whitespace character count, clamped into the grid."""
    if not source:
        raise InvalidArgumentError("source must be non-empty")
    n = sum(1 for ch in source if not ch.isspace())
    raw = math.floor(
        config.complexity_bins * math.log1p(n) / math.log1p(config.complexity_ceiling)
    )
    return max(0, min(config.complexity_bins - 1, raw))


def score_bin(score: float, config: ArchiveConfig) -> int:
    lo, hi = config.score_range
    raw = math.floor((score - lo) / (hi - lo) * config.score_bins)
    return max(0, min(config.score_bins - 1, raw))


class MapElitesArchive:
    """Keeps the best candidate per cell, per island, with seeded sampling.

    Owned by a single controller; sampling draws from one internal RNG so that
    identical seeds and call sequences replay identically.
    """

    def __init__(self, config: ArchiveConfig):
        self.config = config
        self._cells: dict[CellKey, ArchiveEntry] = {}
        self._candidates: dict[str, CandidateProgram] = {}
        self._rng = random.Random(config.rng_seed)
        self._sequence = 0

    # -- mutation ---------------------------------------------------------

    def insert(
        self,
        candidate: CandidateProgram,
        evaluation: EvalResult,
        iteration: int = 0,
        island: Optional[int] = None,
    ) -> InsertOutcome:
        """Store the candidate iff it strictly beats the incumbent of its cell."""
        if candidate.candidate_id != evaluation.candidate_id:
            raise InvalidArgumentError("candidate/eval id mismatch")
        target_island = candidate.island if island is None else island
        if not 0 <= target_island < self.config.island_count:
            raise InvalidArgumentError(f"island {target_island} out of range")

        key = CellKey(
            island=target_island,
            complexity_bin=complexity_feature(candidate.full_source, self.config),
            score_bin=score_bin(evaluation.score, self.config),
        )
        incumbent = self._cells.get(key)
        if incumbent is not None and evaluation.score <= incumbent.score:
            return InsertOutcome(INSERT_REJECTED)

        entry = ArchiveEntry(
            key=key,
            candidate_id=candidate.candidate_id,
            score=evaluation.score,
            speedup=evaluation.speedup,
            stage=evaluation.stage,
            inserted_at_iteration=iteration,
            sequence=self._sequence,
        )
        self._sequence += 1
        self._cells[key] = entry
        self._candidates[candidate.candidate_id] = candidate
        if incumbent is None:
            return InsertOutcome(INSERT_NEW_CELL)
        return InsertOutcome(INSERT_REPLACED, old_candidate_id=incumbent.candidate_id)

    def migrate(self, iteration: int) -> int:
        """Ring migration of each island's best entries; returns migrants accepted."""
        if iteration % self.config.migration_interval != 0:
            return 0
        islands = self.config.island_count
        if islands < 2 or self.config.migration_size == 0:
            return 0

        plans = []
        for src in range(islands):
            best = sorted(
                self.island_entries(src), key=lambda e: (-e.score, e.sequence)
            )[: self.config.migration_size]
            plans.append((src, (src + 1) % islands, best))

        moved = 0
        for _, dst, migrants in plans:
            for entry in migrants:
                candidate = self._candidates[entry.candidate_id]
                key = CellKey(dst, entry.key.complexity_bin, entry.key.score_bin)
                incumbent = self._cells.get(key)
                if incumbent is not None and entry.score <= incumbent.score:
                    continue
                self._cells[key] = ArchiveEntry(
                    key=key,
                    candidate_id=entry.candidate_id,
                    score=entry.score,
                    speedup=entry.speedup,
                    stage=entry.stage,
                    inserted_at_iteration=iteration,
                    sequence=self._sequence,
                )
                self._sequence += 1
                self._candidates[candidate.candidate_id] = candidate
                moved += 1
        return moved

    # -- queries ----------------------------------------------------------

    def entries(self) -> list:
        return sorted(self._cells.values(), key=lambda e: e.sequence)

    def island_entries(self, island: int) -> list:
        return [e for e in self.entries() if e.key.island == island]

    def candidate(self, candidate_id: str) -> CandidateProgram:
        return self._candidates[candidate_id]

    def best_entry(self) -> Optional[ArchiveEntry]:
        entries = self.entries()
        if not entries:
            return None
        return min(entries, key=lambda e: (-e.score, e.sequence))

    def occupancy(self) -> int:
        return len(self._cells)

    # -- sampling ---------------------------------------------------------

    def sample_parent(self, island: int) -> CandidateProgram:
        """Softmax draw over the island's cell scores."""
        entries = self.island_entries(island)
        if not entries:
            raise EmptyIslandError(f"island {island} is empty")
        if len(entries) == 1:
            return self._candidates[entries[0].candidate_id]

        temperature = self.config.parent_temperature
        peak = max(e.score for e in entries)
        weights = [math.exp((e.score - peak) / temperature) for e in entries]
        chosen = self._rng.choices(entries, weights=weights, k=1)[0]
        return self._candidates[chosen.candidate_id]

    def sample_inspirations(
        self,
        island: int,
        top_k: Optional[int] = None,
        diverse_k: Optional[int] = None,
    ) -> list:
        """Global elites first, then uniform draws from cells not yet represented."""
        top_k = self.config.top_k if top_k is None else top_k
        diverse_k = self.config.diverse_k if diverse_k is None else diverse_k
        if top_k + diverse_k < 1:
            raise InvalidArgumentError("top_k + diverse_k must be >= 1")

        ranked = sorted(self.entries(), key=lambda e: (-e.score, e.sequence))
        elites: list = []
        chosen_keys: set = set()
        chosen_ids: set = set()
        for entry in ranked:
            if len(elites) >= top_k:
                break
            if entry.candidate_id in chosen_ids:
                continue
            elites.append(entry)
            chosen_keys.add(entry.key)
            chosen_ids.add(entry.candidate_id)

        pool = [
            e
            for e in self.entries()
            if e.key not in chosen_keys and e.candidate_id not in chosen_ids
        ]
        diverse: list = []
        for _ in range(min(diverse_k, len(pool))):
            pick = self._rng.choice(pool)
            diverse.append(pick)
            chosen_keys.add(pick.key)
            chosen_ids.add(pick.candidate_id)
            pool = [
                e for e in pool if e.key not in chosen_keys and e.candidate_id not in chosen_ids
            ]
            if not pool:
                break
        return elites + diverse

    # -- persistence ------------------------------------------------------

    def to_checkpoint(self) -> dict:
        return {
            "config": self.config.to_record(),
            "sequence": self._sequence,
            "rng_state": _encode_rng_state(self._rng.getstate()),
            "entries": [e.to_record() for e in self.entries()],
            "candidates": [c.to_record() for c in self._candidates.values()],
        }

    @classmethod
    def from_checkpoint(cls, checkpoint: dict) -> "MapElitesArchive":
        archive = cls(ArchiveConfig.from_record(checkpoint["config"]))
        archive._sequence = int(checkpoint["sequence"])
        archive._rng.setstate(_decode_rng_state(checkpoint["rng_state"]))
        for record in checkpoint["candidates"]:
            candidate = CandidateProgram.from_record(record)
            archive._candidates[candidate.candidate_id] = candidate
        for record in checkpoint["entries"]:
            entry = ArchiveEntry.from_record(record)
            archive._cells[entry.key] = entry
        return archive

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_checkpoint(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Path) -> "MapElitesArchive":
        return cls.from_checkpoint(json.loads(Path(path).read_text()))


def _encode_rng_state(state: tuple) -> list:
    version, internal, gauss = state
    return [version, list(internal), gauss]


def _decode_rng_state(encoded: list) -> tuple:
    version, internal, gauss = encoded
    return (version, tuple(internal), gauss)

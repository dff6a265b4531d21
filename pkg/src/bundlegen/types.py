"""Shared data types and domain errors.

Object ids are 1-based within each vocabulary; id 0 is the reserved pad/null
object (used only to fill short click histories, and masked out of attention).
User ids are 0-based and have no pad.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PAD_ID = 0

TYPE_USER = 0
TYPE_ITEM = 1
TYPE_SLOGAN = 2
TYPE_TEMPLATE = 3

N_OBJECT_TYPES = 4


class VocabularyError(ValueError):
    """An object id falls outside its vocabulary."""


class DataError(ValueError):
    """A record, file, or target set violates the data contract."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


@dataclass(frozen=True)
class BundleCreative:
    """One displayable unit: a fixed number of items and slogans plus one template."""

    items: tuple[int, ...]
    slogans: tuple[int, ...]
    template: int

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(i) for i in self.items))
        object.__setattr__(self, "slogans", tuple(int(s) for s in self.slogans))
        object.__setattr__(self, "template", int(self.template))

    def objects(self) -> tuple[tuple[int, int], ...]:
        """All (type, id) pairs, used to compare creatives object-by-object."""
        return (
            tuple((TYPE_ITEM, i) for i in self.items)
            + tuple((TYPE_SLOGAN, s) for s in self.slogans)
            + ((TYPE_TEMPLATE, self.template),)
        )


@dataclass(frozen=True)
class CandidateContext:
    """Conditioning input for one generation: user, click history, candidate pools."""

    user: int
    history: tuple[int, ...]
    candidate_slogans: tuple[int, ...]
    candidate_templates: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(int(i) for i in self.history))
        object.__setattr__(
            self, "candidate_slogans", tuple(int(s) for s in self.candidate_slogans)
        )
        object.__setattr__(
            self, "candidate_templates", tuple(int(t) for t in self.candidate_templates)
        )
        if not self.candidate_slogans or not self.candidate_templates:
            raise DataError("candidate slogan/template lists must be non-empty")


@dataclass(frozen=True)
class InteractionRecord:
    """One logged exposure: context, the clicked creative, and non-clicked negatives."""

    user: int
    history: tuple[int, ...]
    candidate_slogans: tuple[int, ...]
    candidate_templates: tuple[int, ...]
    positive: BundleCreative
    negatives: tuple[BundleCreative, ...] = field(default_factory=tuple)
    timestamp: int = 0

    def context(self) -> CandidateContext:
        return CandidateContext(
            user=self.user,
            history=self.history,
            candidate_slogans=self.candidate_slogans,
            candidate_templates=self.candidate_templates,
        )


def pad_history(history, k: int) -> tuple[int, ...]:
    """Right-pad a click history with the null item to length ``k``."""
    history = tuple(int(i) for i in history)
    if len(history) > k:
        raise DataError(f"history length {len(history)} exceeds configured K={k}")
    return history + (PAD_ID,) * (k - len(history))

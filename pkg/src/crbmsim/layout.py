"""Visible-layer layout: ordered blocks of units and the index tables the
sampler needs to treat every unit family in one vectorized pass."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

UNIT_TYPES = ("continuous", "binary", "onehot")
SECTIONS = ("static", "t", "t+1")


@dataclass(frozen=True)
class Block:
    name: str
    unit_type: str
    width: int
    start: int
    section: str = ""

    @property
    def stop(self) -> int:
        return self.start + self.width

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


class VisibleLayout:
    """Ordered visible blocks.

    Schema-derived layouts are ``[static | time t | time t+1]``; the two time
    sections have identical structure.  Toy layouts may leave ``section``
    empty.
    """

    def __init__(self, blocks: Sequence[tuple[str, str, int] | tuple[str, str, int, str]]):
        out, start = [], 0
        for spec in blocks:
            name, unit_type, width = spec[:3]
            section = spec[3] if len(spec) > 3 else ""
            if unit_type not in UNIT_TYPES:
                raise ValueError(f"unknown unit type {unit_type!r}")
            if unit_type != "onehot" and width != 1:
                raise ValueError(f"{name}: {unit_type} blocks have width 1")
            if unit_type == "onehot" and width < 2:
                raise ValueError(f"{name}: one-hot blocks need width >= 2")
            out.append(Block(name, unit_type, int(width), start, section))
            start += int(width)
        self.blocks: list[Block] = out
        self.n_visible = start
        self._build_tables()

    def _build_tables(self):
        utype = np.empty(self.n_visible, dtype=object)
        for b in self.blocks:
            utype[b.slice] = b.unit_type
        self.unit_type = utype
        self.continuous = np.flatnonzero(utype == "continuous")
        self.binary = np.flatnonzero(utype == "binary")
        self.is_continuous = utype == "continuous"
        onehots = [b for b in self.blocks if b.unit_type == "onehot"]
        self.n_onehot = len(onehots)
        self.max_width = max((b.width for b in onehots), default=0)
        gather = np.zeros((self.n_onehot, self.max_width), dtype=np.intp)
        valid = np.zeros((self.n_onehot, self.max_width), dtype=bool)
        for i, b in enumerate(onehots):
            gather[i, :b.width] = np.arange(b.start, b.stop)
            valid[i, :b.width] = True
        self.onehot_gather = gather
        self.onehot_valid = valid
        self.onehot_units = gather[valid]
        self.onehot_block_of_unit = np.full(self.n_visible, -1)
        for i, b in enumerate(onehots):
            self.onehot_block_of_unit[b.slice] = i

    def __repr__(self):
        return f"VisibleLayout({len(self.blocks)} blocks, {self.n_visible} units)"

    def section(self, name: str) -> slice:
        idx = [b for b in self.blocks if b.section == name]
        if not idx:
            raise KeyError(name)
        return slice(idx[0].start, idx[-1].stop)

    def block(self, name: str, section: str = "") -> Block:
        for b in self.blocks:
            if b.name == name and b.section == section:
                return b
        raise KeyError((name, section))

    def descriptor(self) -> list[list]:
        return [[b.name, b.unit_type, b.width, b.section] for b in self.blocks]

    @classmethod
    def from_descriptor(cls, desc) -> "VisibleLayout":
        return cls([tuple(d) for d in desc])

    @classmethod
    def for_schema(cls, schema) -> "VisibleLayout":
        blocks = [(v.name, v.kind.unit_type, v.width, "static") for v in schema.static]
        for section in ("t", "t+1"):
            blocks += [(v.name, v.kind.unit_type, v.width, section) for v in schema.temporal]
        return cls(blocks)

    def n_discrete_states(self) -> int:
        """Number of joint visible configurations if no unit is continuous."""
        if self.continuous.size:
            return -1
        n = 1
        for b in self.blocks:
            n *= 2 if b.unit_type == "binary" else b.width
        return n

    def enumerate_states(self) -> np.ndarray:
        """All visible configurations of a fully discrete layout, one per row."""
        if self.continuous.size:
            raise ValueError("cannot enumerate continuous units")
        choices = []
        for b in self.blocks:
            if b.unit_type == "binary":
                choices.append(np.array([[0.0], [1.0]]))
            else:
                choices.append(np.eye(b.width))
        states = np.zeros((1, 0))
        for c in choices:
            states = np.concatenate([np.repeat(states, len(c), axis=0),
                                     np.tile(c, (len(states), 1))], axis=1)
        return states

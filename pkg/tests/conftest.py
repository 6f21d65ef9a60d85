from __future__ import annotations

import random
from pathlib import Path

import pytest

from sasleak import ir
from sasleak.cli import corpus_dir, corpus_index
from sasleak.domain import (
    HEADER,
    PUBLIC,
    STACK,
    TOP,
    AbsOp,
    AbstractValue,
    Const,
    Secret,
    canon,
    reduce,
)

DATA = Path(__file__).parent / "data"
CORPUS_NAMES = [entry["name"] for entry in corpus_index()]


def fixture_text(name: str) -> str:
    path = corpus_dir() / f"{name}.sir"
    if not path.exists():
        path = DATA / f"{name}.sir"
    return path.read_text(encoding="utf-8")


def load(name: str, width: int = 32) -> ir.Program:
    return ir.parse_program(fixture_text(name), width=width)


@pytest.fixture(params=CORPUS_NAMES)
def corpus_name(request) -> str:
    return request.param


# -- random abstract values ------------------------------------------------

ATOMS = [Secret(1), Secret(2), PUBLIC, HEADER, STACK, TOP]


def random_value(rng: random.Random, width: int = 32, depth: int = 3) -> AbstractValue:
    """A value built through ``reduce``, so it satisfies every invariant."""
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.4:
            return Const(rng.choice([0, 1, 4, 8, 63, 64, rng.randrange(1 << width)]))
        return rng.choice(ATOMS)
    op = rng.choice(list(AbsOp))
    return reduce(op, random_value(rng, width, depth - 1), random_value(rng, width, depth - 1), width)


def random_valueset(rng: random.Random, bound: int, width: int = 32) -> frozenset:
    size = rng.choice([0, 1, 2, 3, bound, bound + 1, bound + 3])
    return canon((random_value(rng, width) for _ in range(size)), bound)

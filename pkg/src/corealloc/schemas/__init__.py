"""Versioned JSON schemas for every input file; unknown fields are rejected."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema


class SchemaError(ValueError):
    """Input document does not match its schema."""


@lru_cache(maxsize=None)
def load_schema(kind: str) -> dict:
    text = resources.files(__package__).joinpath(f"{kind}.json").read_text()
    return json.loads(text)


def validate(doc: object, kind: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(kind))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{kind} file: field {where}: {exc.message}") from None

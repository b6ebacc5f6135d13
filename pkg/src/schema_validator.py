#!/usr/bin/env python3
# -----------------------------------------------------------
"""
JSON schema validation for run configs, round records and assertion files.

Schemas are loaded from the repository's ``schema/`` directory and cached.
Every violation is reported with the dotted path of the offending field.
"""

import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Tuple

import jsonschema

from errors import ConfigError
from logger_setup import LoggerSetup

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schema"

CONFIG_SCHEMA = "config.schema.json"
ROUND_RECORD_SCHEMA = "round_record.schema.json"
ASSERTIONS_SCHEMA = "assertions.schema.json"


@lru_cache(maxsize=None)
def load_schema(name: str) -> Dict[str, Any]:
    with open(SCHEMA_DIR / name, "r", encoding="utf-8") as sf:
        return json.load(sf)


def _field_path(error: jsonschema.exceptions.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "additionalProperties":
        # the unknown key is only named in the message
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        parts.extend(extra[:1])
    if error.validator == "required":
        parts.append(error.message.split("'")[1])
    return ".".join(parts) or "<root>"


class JSONSchemaValidator:
    """
    Validates documents against one of the bundled schemas.
    """

    def __init__(self):
        self.logger = LoggerSetup.setup_logger(self.__class__.__name__)

    def problems(self, data: Any, schema_name: str) -> List[Tuple[str, str]]:
        schema = load_schema(schema_name)
        validator = jsonschema.Draft7Validator(schema)
        errors = sorted(validator.iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path])
        return [(_field_path(e), e.message) for e in errors]

    def validate(self, data: Any, schema_name: str) -> None:
        found = self.problems(data, schema_name)
        if found:
            for path, message in found:
                self.logger.error("%s: %s", path, message)
            raise ConfigError(found)
        self.logger.debug("Document is valid according to '%s'.", schema_name)

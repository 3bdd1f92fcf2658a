"""Versioned named-tensor checkpoints.

A checkpoint is one JSON document: schema version, kind, rng state,
metadata, and named sections each holding flat float arrays with explicit
shapes. Float values round-trip exactly through JSON (repr-based), so
save/load is bit-faithful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


@dataclass
class PolicyCheckpoint:
    kind: str                       # "tracker" or "student"
    sections: dict = field(default_factory=dict)   # name -> {pname: ndarray}
    metadata: dict = field(default_factory=dict)
    rng_state: dict | None = None
    envelopes: dict | None = None   # clip name -> envelope JSON block

    def set_section(self, name: str, tensors: dict):
        self.sections[name] = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def section(self, name: str) -> dict:
        if name not in self.sections:
            raise CheckpointFormatError(f"checkpoint has no section {name!r}")
        return {k: v.copy() for k, v in self.sections[name].items()}

    def to_json(self) -> dict:
        return {
            "schema_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "metadata": self.metadata,
            "rng_state": self.rng_state,
            "envelopes": self.envelopes,
            "sections": {
                name: {
                    pname: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                    for pname, arr in tensors.items()
                }
                for name, tensors in self.sections.items()
            },
        }

    @staticmethod
    def from_json(doc: dict) -> "PolicyCheckpoint":
        version = doc.get("schema_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version!r}")
        try:
            sections = {}
            for name, tensors in doc["sections"].items():
                sections[name] = {
                    pname: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
                    for pname, entry in tensors.items()
                }
            return PolicyCheckpoint(
                kind=str(doc["kind"]),
                sections=sections,
                metadata=doc.get("metadata", {}),
                rng_state=doc.get("rng_state"),
                envelopes=doc.get("envelopes"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"malformed checkpoint: {e}") from e


def save_checkpoint(ckpt: PolicyCheckpoint, path):
    with open(path, "w") as fh:
        json.dump(ckpt.to_json(), fh)


def load_checkpoint(path) -> PolicyCheckpoint:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise CheckpointFormatError(f"{path}: checkpoint must be a JSON object")
    return PolicyCheckpoint.from_json(doc)

"""Named parameter storage, seeded initialisation and checkpoint files."""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import ContractError, Tensor

CHECKPOINT_FORMAT = "posdistill-checkpoint"
CHECKPOINT_VERSION = 1


def component_rng(seed: int, component: str) -> np.random.Generator:
    """Generator keyed by (seed, component name).

    Keeping one stream per component means adding a tower never shifts the
    draws of another, so all models built from one seed share a bitwise
    identical base module.
    """
    return np.random.default_rng([int(seed), zlib.crc32(component.encode())])


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Ordered mapping of parameter name -> leaf :class:`Tensor`.

    Each leaf carries its value in ``.data`` and its gradient in ``.grad``.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def num_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad[...] = 0.0

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad.copy() for k, t in self._entries.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._entries.items()}

    def assign(self, values: dict[str, np.ndarray]) -> None:
        for name, v in values.items():
            if name not in self._entries:
                raise ContractError(f"unknown parameter name {name!r}")
            t = self._entries[name]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise ContractError(
                    f"shape mismatch for {name!r}: stored {t.shape}, given {v.shape}"
                )
            t.data[...] = v


def save_checkpoint(store: ParamStore, path: str | Path, meta: dict | None = None) -> None:
    """Write a version-tagged JSON checkpoint.

    Values are stored with ``float.hex`` so a round trip is bit exact.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": [
            {
                "name": name,
                "shape": list(t.shape),
                "values": [float(v).hex() for v in t.data.ravel()],
            }
            for name, t in store.items()
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(
            f"{path}: unsupported checkpoint version {payload.get('version')!r}"
        )
    values = {}
    for entry in payload["params"]:
        arr = np.array([float.fromhex(v) for v in entry["values"]], dtype=np.float64)
        values[entry["name"]] = arr.reshape(entry["shape"])
    return payload.get("meta", {}), values


def load_checkpoint(store: ParamStore, path: str | Path) -> dict:
    """Load values into ``store``; any name mismatch is an error. Returns meta."""
    meta, values = read_checkpoint(path)
    unknown = sorted(set(values) - set(store))
    missing = sorted(set(store) - set(values))
    if unknown or missing:
        raise ContractError(
            f"{path}: checkpoint does not match model "
            f"(unknown names {unknown}, missing names {missing})"
        )
    store.assign(values)
    return meta

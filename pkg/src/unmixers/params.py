"""Walk nested parameter containers (dataclasses, lists) for named leaf tensors."""
from __future__ import annotations

import dataclasses
from typing import Iterator

from .tensor import Tensor


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is not None:
                yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_parameters(value, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, value in obj.items():
            yield from named_parameters(value, f"{prefix}.{key}" if prefix else str(key))


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]

"""Fixed-size cache block accounting for MM and KV caches."""

from __future__ import annotations

import math
from enum import Enum


class CacheKind(Enum):
    MM = "mm"
    KV = "kv"


class BlockManager:
    """Pre-allocates whole blocks per request; every allocation is freed once.

    Block ids are handed out from a free stack so repeated runs allocate
    identically.
    """

    def __init__(self, kind: CacheKind, block_size: int, total_blocks: int):
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        if total_blocks < 0:
            raise ValueError("total_blocks must be >= 0")
        self.kind = kind
        self.block_size = block_size
        self.total_blocks = total_blocks
        self._free: list[int] = list(range(total_blocks - 1, -1, -1))
        self.allocated: dict[int, list[int]] = {}

    def blocks_needed(self, tokens: int) -> int:
        return math.ceil(tokens / self.block_size) if tokens > 0 else 0

    @property
    def free_blocks(self) -> int:
        return len(self._free)

    @property
    def used_blocks(self) -> int:
        return self.total_blocks - len(self._free)

    def can_allocate(self, tokens: int) -> bool:
        return self.blocks_needed(tokens) <= len(self._free)

    def allocate(self, request_id: int, tokens: int) -> list[int]:
        if request_id in self.allocated:
            raise RuntimeError(f"request {request_id} already holds {self.kind.value} blocks")
        need = self.blocks_needed(tokens)
        if need > len(self._free):
            raise RuntimeError(f"{self.kind.value} cache overcommitted ({need} > {len(self._free)})")
        blocks = [self._free.pop() for _ in range(need)]
        self.allocated[request_id] = blocks
        return blocks

    def free(self, request_id: int) -> None:
        try:
            blocks = self.allocated.pop(request_id)
        except KeyError:
            raise RuntimeError(f"request {request_id} holds no {self.kind.value} blocks") from None
        self._free.extend(reversed(blocks))

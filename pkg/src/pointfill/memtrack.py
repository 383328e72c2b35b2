"""Live-allocation accounting for tensors created by the completion model.

The tracker is a dispatch mode: every tensor produced by an ATen operator is
charged to its storage until the last Python reference to that storage
dies. This is the CPU stand-in for the accelerator memory the model would
occupy; host-side numpy buffers (volumes, merged clouds) are not counted.
"""

from __future__ import annotations

import weakref

import torch
from torch.utils._python_dispatch import TorchDispatchMode
from torch.utils._pytree import tree_flatten


class AllocationTracker(TorchDispatchMode):
    def __init__(self):
        super().__init__()
        self.current = 0
        self.peak = 0
        self._live: dict[int, list[int]] = {}  # storage ptr -> [nbytes, refs]
        self._seen: set[int] = set()

    def _release(self, key: int, tensor_id: int) -> None:
        self._seen.discard(tensor_id)
        entry = self._live.get(key)
        if entry is None:
            return
        entry[1] -= 1
        if entry[1] == 0:
            self.current -= entry[0]
            del self._live[key]

    def _charge(self, t: torch.Tensor) -> None:
        if id(t) in self._seen:
            return
        storage = t.untyped_storage()
        key = storage.data_ptr()
        if key == 0:
            return
        entry = self._live.get(key)
        if entry is None:
            entry = self._live[key] = [storage.nbytes(), 0]
            self.current += entry[0]
            self.peak = max(self.peak, self.current)
        entry[1] += 1
        self._seen.add(id(t))
        weakref.finalize(t, self._release, key, id(t))

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        for t in tree_flatten(out)[0]:
            if isinstance(t, torch.Tensor):
                self._charge(t)
        return out

    def reset_peak(self) -> None:
        self.peak = self.current


class NullTracker:
    """Drop-in when tracking is disabled."""

    current = 0
    peak = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

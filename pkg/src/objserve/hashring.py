"""Consistent-hash ring with virtual nodes.

Object ids map to the first ring point clockwise from their 64-bit hash;
removing a member remaps only the arcs that member owned. The hash is
FNV-1a (64-bit, offset 0xcbf29ce484222325, prime 0x100000001b3) so point
placement is stable across runs and platforms.
"""

from __future__ import annotations

from bisect import bisect_right

from .errors import EmptyRing

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF

DEFAULT_VNODES = 64


def fnv1a_64(data: str) -> int:
    h = FNV_OFFSET
    for byte in data.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


class HashRing:
    def __init__(self, members: list[str] | None = None, vnodes_per_node: int = DEFAULT_VNODES):
        if vnodes_per_node < 1:
            raise ValueError("vnodes_per_node must be positive")
        self.vnodes_per_node = vnodes_per_node
        self._points: list[int] = []
        self._owners: dict[int, str] = {}
        for m in members or []:
            self.add_node(m)

    def add_node(self, node_id: str) -> None:
        for i in range(self.vnodes_per_node):
            point = fnv1a_64(f"{node_id}#{i}")
            # collisions across 64-bit points are effectively impossible at
            # desk scale; last write wins keeps this deterministic anyway
            if point not in self._owners:
                self._points.append(point)
            self._owners[point] = node_id
        self._points.sort()

    def remove_node(self, node_id: str) -> None:
        doomed = {p for p, n in self._owners.items() if n == node_id}
        self._points = [p for p in self._points if p not in doomed]
        for p in doomed:
            del self._owners[p]

    def members(self) -> list[str]:
        return sorted(set(self._owners.values()))

    def route(self, object_id: str) -> str:
        """Primary owner of `object_id`."""
        if not self._points:
            raise EmptyRing("ring has no members")
        h = fnv1a_64(object_id)
        idx = bisect_right(self._points, h)
        if idx == len(self._points):
            idx = 0
        return self._owners[self._points[idx]]

    def preference(self, object_id: str, count: int | None = None) -> list[str]:
        """Distinct owners clockwise from the object's point: primary first,
        then the successors used for replica placement / failover."""
        if not self._points:
            raise EmptyRing("ring has no members")
        distinct = len(set(self._owners.values()))
        want = distinct if count is None else min(count, distinct)
        h = fnv1a_64(object_id)
        idx = bisect_right(self._points, h)
        out: list[str] = []
        n = len(self._points)
        for step in range(n):
            owner = self._owners[self._points[(idx + step) % n]]
            if owner not in out:
                out.append(owner)
                if len(out) == want:
                    break
        return out

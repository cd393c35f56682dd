"""Minimum-cost flow by successive shortest paths with node potentials.

Small, exact solver for integer capacities and nonnegative integer costs.
Shortest paths use Dijkstra on reduced costs; augmentation pushes the path
bottleneck. Arc relaxation follows insertion order and heap ties break on
node index, so identical inputs produce identical flows.
"""

from __future__ import annotations

import heapq


class FlowInfeasibleError(RuntimeError):
    """Supplies cannot be routed within the given capacities."""


class MinCostFlow:
    def __init__(self, num_nodes: int):
        self.n = num_nodes
        self._to: list[int] = []
        self._cap: list[int] = []
        self._cost: list[int] = []
        self._adj: list[list[int]] = [[] for _ in range(num_nodes)]
        self._solved = False

    def add_node(self) -> int:
        self._adj.append([])
        self.n += 1
        return self.n - 1

    def add_arc(self, u: int, v: int, capacity: int, cost: int) -> int:
        """Add a directed arc and its residual twin; returns the arc handle."""
        if capacity < 0:
            raise ValueError("capacity must be nonnegative")
        if cost < 0:
            raise ValueError("costs must be nonnegative")
        if int(capacity) != capacity or int(cost) != cost:
            raise ValueError("capacities and costs must be integers")
        idx = len(self._to)
        self._to.append(v)
        self._cap.append(int(capacity))
        self._cost.append(int(cost))
        self._adj[u].append(idx)
        self._to.append(u)
        self._cap.append(0)
        self._cost.append(-int(cost))
        self._adj[v].append(idx + 1)
        return idx

    def flow_on(self, arc: int) -> int:
        """Units routed through an arc returned by :meth:`add_arc`."""
        return self._cap[arc ^ 1]

    def solve(self, supplies) -> int:
        """Route all supplies (positive = send, negative = receive); returns total cost.

        Raises :class:`FlowInfeasibleError` if the supplies cannot be routed.
        """
        if self._solved:
            raise RuntimeError("solve() can only be called once per instance")
        self._solved = True
        supplies = list(supplies)
        if len(supplies) != self.n:
            raise ValueError("one supply value per node is required")
        if sum(supplies) != 0:
            raise FlowInfeasibleError("supplies do not balance")

        source = self.add_node()
        sink = self.add_node()
        total = 0
        for v, b in enumerate(supplies):
            if b > 0:
                self.add_arc(source, v, b, 0)
                total += b
            elif b < 0:
                self.add_arc(v, sink, -b, 0)

        to, cap, cost, adj = self._to, self._cap, self._cost, self._adj
        n = self.n
        INF = float("inf")
        potential = [0] * n
        routed = 0
        total_cost = 0

        while routed < total:
            dist = [INF] * n
            parent_arc = [-1] * n
            dist[source] = 0
            heap = [(0, source)]
            while heap:
                d, u = heapq.heappop(heap)
                if d > dist[u]:
                    continue
                for a in adj[u]:
                    if cap[a] <= 0:
                        continue
                    v = to[a]
                    nd = d + cost[a] + potential[u] - potential[v]
                    if nd < dist[v]:
                        dist[v] = nd
                        parent_arc[v] = a
                        heapq.heappush(heap, (nd, v))
            if dist[sink] == INF:
                raise FlowInfeasibleError("no augmenting path; problem is infeasible")
            d_sink = dist[sink]
            for v in range(n):
                potential[v] += min(dist[v], d_sink)

            push = total - routed
            v = sink
            while v != source:
                a = parent_arc[v]
                push = min(push, cap[a])
                v = to[a ^ 1]
            v = sink
            while v != source:
                a = parent_arc[v]
                cap[a] -= push
                cap[a ^ 1] += push
                total_cost += push * cost[a]
                v = to[a ^ 1]
            routed += push

        return total_cost

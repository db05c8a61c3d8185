"""
Computational graph substrate.

The base network and the vesicle population share one directed graph. Nodes
are dense integer ids; the graph is frozen after construction.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np

from .models import GraphSpec

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Raised for out-of-range nodes or an invalid topology."""
    pass


@dataclass(frozen=True)
class ComputationGraph:
    """
    Immutable directed graph G=(V,E) with a layer assignment.

    Attributes:
        num_nodes: Number of nodes |V|
        edges: Sorted tuple of directed edges
        layer_of: Layer index of every node
        allow_self_loops: Whether (u, u) edges were accepted
    """
    num_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    layer_of: Tuple[int, ...]
    allow_self_loops: bool = False
    _digraph: nx.DiGraph = field(init=False, repr=False, compare=False)
    _successors: Tuple[Tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.num_nodes < 1:
            raise GraphError("A graph needs at least one node")
        if len(self.layer_of) != self.num_nodes:
            raise GraphError("layer_of must list one layer per node")
        digraph = nx.DiGraph()
        digraph.add_nodes_from(range(self.num_nodes))
        for source, target in self.edges:
            self._check_node(source)
            self._check_node(target)
            if source == target and not self.allow_self_loops:
                raise GraphError(f"Self-loop at node {source} is not enabled")
            digraph.add_edge(source, target)
        object.__setattr__(self, "_digraph", nx.freeze(digraph))
        object.__setattr__(
            self,
            "_successors",
            tuple(tuple(sorted(digraph.successors(node))) for node in range(self.num_nodes)),
        )

    @classmethod
    def from_spec(cls, spec: GraphSpec) -> "ComputationGraph":
        """Build the graph described by a validated config section."""
        layer_of = spec.layer_of if spec.layer_of is not None else [0] * spec.num_nodes
        return cls(
            num_nodes=spec.num_nodes,
            edges=tuple(sorted(tuple(edge) for edge in spec.edges)),
            layer_of=tuple(layer_of),
            allow_self_loops=spec.allow_self_loops,
        )

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: Iterable[Tuple[int, int]],
        layer_of: Optional[Sequence[int]] = None,
    ) -> "ComputationGraph":
        """Build a graph directly from an edge list (layer 0 everywhere by default)."""
        return cls(
            num_nodes=num_nodes,
            edges=tuple(sorted(set((int(u), int(v)) for u, v in edges))),
            layer_of=tuple(layer_of) if layer_of is not None else (0,) * num_nodes,
        )

    def _check_node(self, node: int) -> None:
        if not 0 <= node < self.num_nodes:
            raise GraphError(f"Node {node} is outside [0, {self.num_nodes})")

    @property
    def digraph(self) -> nx.DiGraph:
        """Frozen networkx view of the substrate."""
        return self._digraph

    def neighbors_out(self, node: int) -> List[int]:
        """
        Successors of a node in ascending order.

        Args:
            node: Source node id

        Returns:
            Sorted list of targets; empty for terminals
        """
        self._check_node(node)
        return list(self._successors[node])

    def is_terminal(self, node: int) -> bool:
        """A node without outgoing edges."""
        return not self._successors[node]

    @property
    def terminals(self) -> List[int]:
        """All terminal nodes in ascending order."""
        return [node for node in range(self.num_nodes) if self.is_terminal(node)]

    def adjacency_mask(self) -> np.ndarray:
        """Boolean |V|x|V| matrix with mask[i, j] true iff (i, j) is an edge."""
        mask = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        for source, target in self.edges:
            mask[source, target] = True
        return mask

    def migration_mask(self) -> np.ndarray:
        """Adjacency mask plus a self-loop at every terminal node."""
        mask = self.adjacency_mask()
        for node in self.terminals:
            mask[node, node] = True
        return mask

    def synapse_neighborhood(self, i: int, j: int, radius: int) -> Set[int]:
        """
        Nodes within `radius` undirected hops of either endpoint of synapse (j -> i).

        Args:
            i: Postsynaptic node
            j: Presynaptic node
            radius: Hop radius, 0 gives {i, j}

        Returns:
            Set of node ids including i and j

        Raises:
            GraphError: If i or j is out of range, or radius is negative
        """
        self._check_node(i)
        self._check_node(j)
        if radius < 0:
            raise GraphError("Neighborhood radius must be non-negative")
        undirected = self._digraph.to_undirected(as_view=True)
        reached = nx.multi_source_dijkstra_path_length(undirected, {i, j}, cutoff=radius)
        return set(reached)

    def nodes_in_layer(self, layer: int) -> List[int]:
        """Graph nodes assigned to a base-network layer."""
        return [node for node, node_layer in enumerate(self.layer_of) if node_layer == layer]

"""Self/cross-attention graph network over current and goal keypoints.

The 2K keypoints of a (current, goal) pair form one complete multiplex
graph with two edge kinds: self edges join nodes from the same frame,
cross edges join nodes from different frames. Coordinates are embedded
per node with a shared MLP, updated by a block of self-attention layers
(each frame attends over itself, including the node), then a block of
cross-attention layers (each frame attends over the other), every layer
residual:

    x' = x + MLP([x || m]),   m_p = sum_q softmax_q(q_p . k_q) v_q

with the sum over the K neighbors selected by the edge kind. The final
embeddings are projected and combined bilinearly into a K x K value
matrix: entry (i, j) scores picking current keypoint i and placing it at
goal keypoint j.

Restricting each layer to one edge kind halves the attention-score count
per layer versus attending over all 2K nodes (2K^2 vs 4K^2), and keeps
the two frames' embeddings exactly independent through the self block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Linear, Parameter, Tensor, glorot_uniform
from .keypoints import KeypointSet

__all__ = [
    "GNNConfig",
    "NodeEmbeddings",
    "AttentionLayer",
    "QNetwork",
    "attention_aggregate",
    "count_attention_pairs",
]


@dataclass(frozen=True)
class GNNConfig:
    """Architecture knobs: K keypoints, N-dim nodes, layer counts."""

    n_keypoints: int = 8
    embed_dim: int = 64
    self_layers: int = 2
    cross_layers: int = 2
    num_heads: int = 1
    embed_hidden: int = 32
    update_hidden: int | None = None  # default: embed_dim

    def __post_init__(self):
        if self.self_layers < 1 or self.cross_layers < 1:
            raise ValueError("need at least one self and one cross layer")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def update_width(self) -> int:
        return self.update_hidden or self.embed_dim


@dataclass
class NodeEmbeddings:
    """The multiplex graph state at one layer: 2K nodes, K per frame."""

    current: Tensor   # (B, K, N)
    goal: Tensor      # (B, K, N)
    layer: int = 0


def attention_aggregate(queries: Tensor, keys: Tensor, values: Tensor,
                        num_heads: int = 1,
                        collect: list | None = None) -> Tensor:
    """Dot-product attention: one message per query node.

    ``queries`` is (B, K_q, N); ``keys``/``values`` are (B, K_kv, N). The
    softmax normalizes over exactly the K_kv neighbor scores. With
    ``num_heads`` > 1 the embedding splits into head-sized chunks that
    attend independently. Attention weight arrays are appended to
    ``collect`` when given (for tests and introspection).
    """
    b, kq, n = queries.shape
    kv = keys.shape[1]
    h = num_heads
    if h == 1:
        scores = ad.matmul(queries, ad.swapaxes(keys, -1, -2))   # (B, Kq, Kv)
        weights = ad.softmax(scores, axis=-1)
        if collect is not None:
            collect.append(weights.data)
        return ad.matmul(weights, values)
    d = n // h

    def split(t, nodes):
        return ad.swapaxes(ad.reshape(t, (b, nodes, h, d)), 1, 2)

    q = split(queries, kq)                      # (B, h, Kq, d)
    k = split(keys, kv)
    v = split(values, kv)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2))   # (B, h, Kq, Kv)
    weights = ad.softmax(scores, axis=-1)
    if collect is not None:
        collect.append(weights.data)
    merged = ad.matmul(weights, v)                   # (B, h, Kq, d)
    return ad.reshape(ad.swapaxes(merged, 1, 2), (b, kq, n))


class AttentionLayer:
    """One residual message-passing layer (either edge kind).

    Holds the shared query/key/value projections (N x N, no bias, applied
    to both frames) and the update MLP.
    """

    def __init__(self, config: GNNConfig, rng: np.random.Generator, name: str):
        n = config.embed_dim
        self.proj_q = Parameter(glorot_uniform(rng, n, n, (n, n)), f"{name}/proj_q")
        self.proj_k = Parameter(glorot_uniform(rng, n, n, (n, n)), f"{name}/proj_k")
        self.proj_v = Parameter(glorot_uniform(rng, n, n, (n, n)), f"{name}/proj_v")
        self.update = MLP((2 * n, config.update_width, n), rng, f"{name}/update")
        self.num_heads = config.num_heads

    def _messages(self, target: Tensor, source: Tensor,
                  collect: list | None) -> Tensor:
        q = ad.linear(target, self.proj_q)
        k = ad.linear(source, self.proj_k)
        v = ad.linear(source, self.proj_v)
        return attention_aggregate(q, k, v, self.num_heads, collect)

    def _update(self, x: Tensor, messages: Tensor) -> Tensor:
        return x + self.update(ad.concat([x, messages], axis=-1))

    def __call__(self, graph: NodeEmbeddings, edge_kind: str,
                 collect: list | None = None) -> NodeEmbeddings:
        """Update all nodes simultaneously from the layer's inputs.

        Self layers keep the two frames fully independent; cross layers
        swap the frames' roles as attention sources.
        """
        cur, goal = graph.current, graph.goal
        if edge_kind == "self":
            cur_msg = self._messages(cur, cur, collect)
            goal_msg = self._messages(goal, goal, collect)
        elif edge_kind == "cross":
            cur_msg = self._messages(cur, goal, collect)
            goal_msg = self._messages(goal, cur, collect)
        else:
            raise ValueError(f"edge kind must be 'self' or 'cross', got {edge_kind!r}")
        return NodeEmbeddings(self._update(cur, cur_msg),
                              self._update(goal, goal_msg),
                              graph.layer + 1)

    def parameters(self) -> list[Parameter]:
        return [self.proj_q, self.proj_k, self.proj_v] + self.update.parameters()


class QNetwork:
    """Keypoint pairs in, K x K pick/place value matrix out.

    ``layer_plan`` lists the edge kind of every layer in order: all self
    layers first, then all cross layers ("local" mode), or interleaved
    "global" behaviour is obtained by passing mode="global", where every
    layer attends over all 2K nodes (used by the ablation).
    """

    def __init__(self, config: GNNConfig, seed: int = 0, mode: str = "local"):
        if mode not in ("local", "global"):
            raise ValueError(f"mode must be 'local' or 'global', got {mode!r}")
        self.config = config
        self.mode = mode
        rng = np.random.default_rng([int(seed), 0x6A11])
        n = config.embed_dim
        self.embed_mlp = MLP((2, config.embed_hidden, n), rng, "graphnet/embed")
        self.layers = [
            AttentionLayer(config, rng, f"graphnet/layer{i}")
            for i in range(config.self_layers + config.cross_layers)
        ]
        self.pick_proj = Parameter(glorot_uniform(rng, n, n, (n, n)),
                                   "graphnet/pick_proj")
        self.place_proj = Parameter(glorot_uniform(rng, n, n, (n, n)),
                                    "graphnet/place_proj")

    # -- building blocks -------------------------------------------------

    def embed(self, current: np.ndarray, goal: np.ndarray) -> NodeEmbeddings:
        """Per-node embedding of normalized coordinates, shared MLP."""
        current = np.asarray(current, dtype=np.float64)
        goal = np.asarray(goal, dtype=np.float64)
        if current.ndim == 2:
            current, goal = current[None], goal[None]
        k = self.config.n_keypoints
        if current.shape[1:] != (k, 2) or goal.shape[1:] != (k, 2):
            raise ValueError(
                f"expected (B, {k}, 2) current and goal coordinates, got "
                f"{current.shape} and {goal.shape}")
        return NodeEmbeddings(self.embed_mlp(Tensor(current)),
                              self.embed_mlp(Tensor(goal)), 0)

    def edge_kind(self, layer_index: int) -> str:
        return "self" if layer_index < self.config.self_layers else "cross"

    def encode(self, current: np.ndarray, goal: np.ndarray,
               collect: list | None = None) -> NodeEmbeddings:
        graph = self.embed(current, goal)
        for i, layer in enumerate(self.layers):
            if self.mode == "global":
                graph = self._global_layer(layer, graph, collect)
            else:
                graph = layer(graph, self.edge_kind(i), collect)
        return graph

    def _global_layer(self, layer: AttentionLayer, graph: NodeEmbeddings,
                      collect: list | None) -> NodeEmbeddings:
        """Ablation variant: every node attends over all 2K nodes."""
        both = ad.concat([graph.current, graph.goal], axis=1)   # (B, 2K, N)
        msg = layer._messages(both, both, collect)
        updated = layer._update(both, msg)
        k = self.config.n_keypoints
        return NodeEmbeddings(updated[:, :k, :], updated[:, k:, :],
                              graph.layer + 1)

    def q_values(self, graph: NodeEmbeddings) -> Tensor:
        """Scaled bilinear score between projected final embeddings."""
        pick = ad.linear(graph.current, self.pick_proj)     # (B, K, N)
        place = ad.linear(graph.goal, self.place_proj)
        scores = ad.matmul(pick, ad.swapaxes(place, -1, -2))
        return scores / np.sqrt(self.config.embed_dim)

    # -- public forward ----------------------------------------------------

    def forward(self, current, goal, collect: list | None = None) -> Tensor:
        """(B, K, 2) or (K, 2) coordinate arrays -> (B, K, K) value matrix."""
        current = _coords(current)
        goal = _coords(goal)
        squeeze = current.ndim == 2
        q = self.q_values(self.encode(current, goal, collect))
        return q[0] if squeeze else q

    def __call__(self, current, goal) -> Tensor:
        return self.forward(current, goal)

    def q_matrix(self, current, goal) -> np.ndarray:
        """Inference-only forward for a single pair: (K, K) array."""
        with ad.no_grad():
            return self.forward(current, goal).data

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = list(self.embed_mlp.parameters())
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.pick_proj, self.place_proj])
        return params

    def parameter_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_parameter_dict(self, stored: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in stored:
                raise ValueError(f"missing parameter {p.name!r} in checkpoint")
            if stored[p.name].shape != p.data.shape:
                raise ValueError(
                    f"parameter {p.name!r} has shape {stored[p.name].shape}, "
                    f"expected {p.data.shape}")
            p.data = stored[p.name].astype(np.float64)

    def copy_parameters_from(self, other: "QNetwork") -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data = theirs.data.copy()


def _coords(x) -> np.ndarray:
    if isinstance(x, KeypointSet):
        return x.coords
    return np.asarray(x, dtype=np.float64)


def count_attention_pairs(config: GNNConfig, mode: str) -> int:
    """Attention-score evaluations per layer for a full forward pass.

    Local layers score two K x K blocks (both frames of a self layer, or
    the two directions of a cross layer): 2K^2. A global layer scores all
    ordered node pairs of the complete 2K-node graph: 4K^2, exactly twice
    as many.
    """
    k = config.n_keypoints
    if mode == "local":
        return 2 * k * k
    if mode == "global":
        return (2 * k) * (2 * k)
    raise ValueError(f"mode must be 'local' or 'global', got {mode!r}")

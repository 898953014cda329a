"""Star graph neural network with a highway gate (SGNN-HN style) session encoder.

The encoder maps a session to ``r = [global preference ; last item]`` in
R^{2d}. Every stage works on padded batches: node tensors are (B, N, d),
position tensors are (B, P, d). Weights named ``W_*`` keep the (out, in)
layout in which they appear as left multipliers, so row-vector code
applies them as ``x @ W.T``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .session_graph import GraphBatch, build_session_graph, init_star, pack_graphs
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    layers: int = 1
    max_len: int = 10
    # learnable gain/bias on the similarity LayerNorm; breaks sim(v, v) = d
    ln_affine: bool = False

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"embedding dim must be >= 2, got {self.d}")
        if self.layers < 1:
            raise ValueError(f"need at least one GNN layer, got {self.layers}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")


def param_shapes(n_items: int, cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every trainable tensor; ``n_items`` counts the mask row."""
    d = cfg.d
    sq, wide, vec = (d, d), (d, 2 * d), (d,)
    return {
        "item_embeddings": (n_items, d),
        "position_embeddings": (cfg.max_len, d),
        "W_in": sq, "b_in": vec, "W_out": sq, "b_out": vec,
        "W_z": wide, "U_z": sq, "W_r": wide, "U_r": sq, "W_h": wide, "U_h": sq,
        "W_q1": sq, "W_k1": sq, "W_q2": sq, "W_k2": sq,
        "W_hw": wide,
        "W_0": vec, "W_1": sq, "W_2": sq, "W_3": sq, "b_0": vec,
        "W_pred": wide, "b_pred": vec,
        "W_h1": wide, "b_h1": vec, "W_h2": sq, "b_h2": vec,
        **({"ln_gain": vec, "ln_bias": vec} if cfg.ln_affine else {}),
    }  # fmt: skip


class ModelParams:
    """Named trainable tensors of the encoder, prediction layer and projection head."""

    def __init__(self, tensors: dict[str, Tensor], config: EncoderConfig):
        self.tensors = tensors
        self.config = config

    @classmethod
    def init(cls, n_items: int, config: EncoderConfig, seed=0) -> "ModelParams":
        """Uniform initialization in [-1/sqrt(d), 1/sqrt(d)], LayerNorm gain/bias aside."""
        if n_items < 2:
            raise ValueError("vocabulary needs the mask row plus at least one item")
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(config.d)
        tensors = {
            name: Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
            for name, shape in param_shapes(n_items, config).items()
        }
        # an affine LayerNorm starts as the identity map
        for name, value in (("ln_gain", 1.0), ("ln_bias", 0.0)):
            if name in tensors:
                tensors[name].data = np.full(tensors[name].shape, value)
        return cls(tensors, config)

    @property
    def n_items(self) -> int:
        return self.tensors["item_embeddings"].shape[0]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()},
            self.config,
        )

    def config_dict(self) -> dict:
        return {"n_items": self.n_items, **asdict(self.config)}


def _linear(x, w):
    return T.matmul(x, T.transpose(w))


def _expand_nodes(v: Tensor) -> Tensor:
    # (..., d) -> (..., 1, d) so a per-session vector broadcasts over nodes
    return T.reshape(v, v.shape[:-1] + (1, v.shape[-1]))


def propagate_messages(h, a_in, a_out, params: ModelParams) -> Tensor:
    """Neighbor messages ``[A_in (H W_in + b_in) ; A_out (H W_out + b_out)]``."""
    incoming = T.matmul(a_in, T.matmul(h, params["W_in"]) + params["b_in"])
    outgoing = T.matmul(a_out, T.matmul(h, params["W_out"]) + params["b_out"])
    return T.concat([incoming, outgoing], axis=-1)


def ggnn_cell(m, h, params: ModelParams) -> Tensor:
    z = T.sigmoid(_linear(m, params["W_z"]) + _linear(h, params["U_z"]))
    r = T.sigmoid(_linear(m, params["W_r"]) + _linear(h, params["U_r"]))
    candidate = T.tanh(_linear(m, params["W_h"]) + _linear(T.mul(r, h), params["U_h"]))
    return T.mul(1.0 - z, h) + T.mul(z, candidate)


def star_blend(h_hat, star, params: ModelParams) -> Tensor:
    """Mix the previous star state into each node with an unnormalized gate."""
    d = h_hat.shape[-1]
    keys = _expand_nodes(_linear(star, params["W_k1"]))
    alpha = T.sum(T.mul(_linear(h_hat, params["W_q1"]), keys), axis=-1, keepdims=True)
    alpha = T.scalar_mul(alpha, 1.0 / math.sqrt(d))
    return T.mul(1.0 - alpha, h_hat) + T.mul(alpha, _expand_nodes(star))


def star_update(h, star_prev, params: ModelParams, mask=None) -> Tensor:
    """Attention over nodes with the previous star state as query."""
    d = h.shape[-1]
    query = _expand_nodes(_linear(star_prev, params["W_q2"]))
    scores = T.sum(T.mul(_linear(h, params["W_k2"]), query), axis=-1)
    beta = T.softmax(T.scalar_mul(scores, 1.0 / math.sqrt(d)), axis=-1, mask=mask)
    return T.sum(T.mul(T.reshape(beta, beta.shape + (1,)), h), axis=-2)


def highway(h0, hl, params: ModelParams) -> Tensor:
    g = T.sigmoid(_linear(T.concat([h0, hl], axis=-1), params["W_hw"]))
    return T.mul(g, h0) + T.mul(1.0 - g, hl)


def readout(hf, star, batch: GraphBatch, params: ModelParams) -> Tensor:
    """Soft-attention readout ``r = [sum_i gamma_i u_i^p ; u_last^p]``."""
    b, n, d = hf.shape
    p = batch.n_positions
    if p > params.config.max_len:
        raise ValueError(f"session length {p} exceeds max_len {params.config.max_len}")
    u = T.row_gather(T.reshape(hf, (b * n, d)), batch.alias_flat)
    positions = np.broadcast_to(np.arange(p), (b, p))
    up = u + T.row_gather(params["position_embeddings"], positions)
    last = T.row_gather(T.reshape(up, (b * p, d)), batch.last_flat)
    context = _linear(star, params["W_2"]) + _linear(last, params["W_3"]) + params["b_0"]
    hidden = T.sigmoid(_linear(up, params["W_1"]) + _expand_nodes(context))
    weights = T.mul(T.matmul(hidden, params["W_0"]), batch.position_mask)
    pooled = T.sum(T.mul(T.reshape(weights, (b, p, 1)), up), axis=1)
    return T.concat([pooled, last], axis=-1)


def encode_batch(batch: GraphBatch, params: ModelParams) -> Tensor:
    h0 = T.row_gather(params["item_embeddings"], batch.node_ids)
    star = init_star(h0, batch.node_mask)
    mask = batch.node_mask > 0
    h = h0
    for _ in range(params.config.layers):
        h_hat = ggnn_cell(propagate_messages(h, batch.a_in, batch.a_out, params), h, params)
        h = star_blend(h_hat, star, params)
        star = star_update(h, star, params, mask=mask)
    return readout(highway(h0, h, params), star, batch, params)


def _check_session(items: Sequence[int], n_items: int, max_len: int) -> None:
    if len(items) == 0:
        raise ValueError("empty session")
    if len(items) > max_len:
        raise ValueError(f"session of length {len(items)} exceeds max_len {max_len}")
    for item in items:
        if not 0 <= item < n_items:
            raise IndexError(f"item index {item} outside vocabulary of size {n_items}")


def encode(sessions: Sequence[Sequence[int]], params: ModelParams) -> Tensor:
    """Encode a list of item sequences into a (B, 2d) representation tensor."""
    for items in sessions:
        _check_session(items, params.n_items, params.config.max_len)
    batch = pack_graphs([build_session_graph(items) for items in sessions])
    return encode_batch(batch, params)


def forward(items: Sequence[int], params: ModelParams) -> Tensor:
    """Representation of a single session, shape (2d,)."""
    r = encode([items], params)
    return T.reshape(r, (r.shape[-1],))

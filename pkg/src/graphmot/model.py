"""Graph transformer for track-detection association.

A track encoder runs sparse multi-head self-attention over the track graph.
Each decoder layer runs self-attention over the detection graph, then
edge-augmented cross-attention from detections to candidate tracks, whose
per-head logits also update the association edge features.  Two MLP heads map
final edge features to affinity logits and final detection features to
velocities.  All blocks are pre-LayerNorm with residual connections.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .graph import EDGE_FEATURE_DIM, node_feature_dim


@dataclass
class ModelConfig:
    d: int = 128
    heads: int = 8
    enc_layers: int = 1
    dec_layers: int = 3
    dropout: float = 0.1
    ffn_mult: int = 2
    num_classes: int = 3

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.enc_layers < 0 or self.dec_layers < 1:
            raise ValueError("need enc_layers >= 0 and dec_layers >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def node_in(self) -> int:
        return node_feature_dim(self.num_classes)

    @property
    def edge_in(self) -> int:
        return EDGE_FEATURE_DIM

    def to_dict(self) -> dict:
        return asdict(self)


def node_input_scale(num_classes: int) -> np.ndarray:
    # center, size, yaw, velocity, one-hot, score
    return np.array([0.05, 0.05, 0.5] + [0.5] * 3 + [1 / math.pi] + [0.2, 0.2] + [1.0] * num_classes + [1.0])


EDGE_INPUT_SCALE = np.array([0.2, 0.2, 0.5, 1.0, 1.0, 1.0, 1 / math.pi, 1.0, 0.2])


@dataclass
class ForwardOutput:
    h_det0: Tensor  # embedded detections
    h_track: Optional[Tensor]  # encoder output (None when there are no tracks)
    h_det: Tensor  # decoder output
    h_edge: Tensor  # final association edge features
    affinity_logits: Tensor  # (E,)
    velocity: Tensor  # (N_D, 2)
    cross_weights: list[np.ndarray]  # per decoder layer, (E, C)


class GraphTransformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(seed)
        d, hid = cfg.d, cfg.d * cfg.ffn_mult
        self.head_dim = d // cfg.heads
        head_of = np.repeat(np.arange(cfg.heads), self.head_dim)
        self.head_sum = np.zeros((d, cfg.heads))
        self.head_sum[np.arange(d), head_of] = 1.0
        self.head_expand = self.head_sum.T.copy()
        self.node_scale = node_input_scale(cfg.num_classes)

        self._mlp("embed_det", cfg.node_in, d, d)
        self._mlp("embed_edge", cfg.edge_in, d, d)
        for l in range(cfg.enc_layers):
            p = f"encoder.{l}"
            self._norm(f"{p}.norm1", d)
            self._attention(f"{p}.attn", d)
            self._norm(f"{p}.norm2", d)
            self._mlp(f"{p}.ffn", d, hid, d)
        self._norm("encoder.out_norm", d)
        for l in range(cfg.dec_layers):
            p = f"decoder.{l}"
            self._norm(f"{p}.self_norm", d)
            self._attention(f"{p}.self", d)
            self._norm(f"{p}.cross_norm", d)
            self._norm(f"{p}.edge_norm", d)
            self._attention(f"{p}.cross", d)
            self._param(f"{p}.cross.W_A", self._xavier(d, cfg.heads))
            self._param(f"{p}.cross.W_E", self._xavier(cfg.heads, d))
            self._param(f"{p}.cross.b_E", np.zeros(d))
            self._norm(f"{p}.node_ffn_norm", d)
            self._mlp(f"{p}.node_ffn", d, hid, d)
            self._norm(f"{p}.edge_ffn_norm", d)
            self._mlp(f"{p}.edge_ffn", d, hid, d)
        self._norm("affinity_head.norm", d)
        self._mlp("affinity_head", d, d, 1)
        self._norm("velocity_head.norm", d)
        self._mlp("velocity_head", d, d, 2)
        del self._rng

    # ---------------------------------------------------------------- params

    def _xavier(self, fan_in: int, fan_out: int) -> np.ndarray:
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return self._rng.uniform(-a, a, size=(fan_in, fan_out))

    def _param(self, name: str, value) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def _mlp(self, prefix: str, d_in: int, d_hid: int, d_out: int) -> None:
        self._param(f"{prefix}.0.W", self._xavier(d_in, d_hid))
        self._param(f"{prefix}.0.b", np.zeros(d_hid))
        self._param(f"{prefix}.1.W", self._xavier(d_hid, d_out))
        self._param(f"{prefix}.1.b", np.zeros(d_out))

    def _norm(self, prefix: str, d: int) -> None:
        self._param(f"{prefix}.gain", np.ones(d))
        self._param(f"{prefix}.bias", np.zeros(d))

    def _attention(self, prefix: str, d: int) -> None:
        for proj in ("q", "k", "v", "o"):
            self._param(f"{prefix}.W_{proj}", self._xavier(d, d))
            self._param(f"{prefix}.b_{proj}", np.zeros(d))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    # ---------------------------------------------------------------- blocks

    def mlp(self, prefix: str, x) -> Tensor:
        P = self.params
        h = ad.relu(ad.linear(x, P[f"{prefix}.0.W"], P[f"{prefix}.0.b"]))
        return ad.linear(h, P[f"{prefix}.1.W"], P[f"{prefix}.1.b"])

    def norm(self, prefix: str, x) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def attention(self, prefix: str, x_dst, x_src, src, dst, n_dst: int, edge_bias=None):
        """Multi-head attention restricted to edges ``src -> dst``.

        Returns the projected aggregate (n_dst, d), the per-head logits (E, C)
        and the normalized weights as an array.
        """
        P = self.params
        q = ad.linear(x_dst, P[f"{prefix}.W_q"], P[f"{prefix}.b_q"])
        k = ad.linear(x_src, P[f"{prefix}.W_k"], P[f"{prefix}.b_k"])
        v = ad.linear(x_src, P[f"{prefix}.W_v"], P[f"{prefix}.b_v"])
        qk = ad.mul(ad.row_gather(q, dst), ad.row_gather(k, src))
        logits = ad.scale(ad.matmul(qk, self.head_sum), 1.0 / math.sqrt(self.head_dim))
        if edge_bias is not None:
            logits = ad.add(logits, edge_bias)
        alpha = ad.segment_softmax(logits, dst, n_dst)
        msg = ad.mul(ad.matmul(alpha, self.head_expand), ad.row_gather(v, src))
        agg = ad.index_add_rows(msg, dst, n_dst)
        out = ad.linear(agg, P[f"{prefix}.W_o"], P[f"{prefix}.b_o"])
        return out, logits, alpha.value

    # ---------------------------------------------------------------- public ops

    def embed_detections(self, raw: np.ndarray) -> Tensor:
        raw = np.asarray(raw, dtype=float)
        if raw.ndim != 2 or raw.shape[1] != self.cfg.node_in:
            raise ad.ShapeError("embed_detections", raw.shape, ("*", self.cfg.node_in))
        return self.mlp("embed_det", raw * self.node_scale)

    def embed_edges(self, raw: np.ndarray) -> Tensor:
        raw = np.asarray(raw, dtype=float)
        if raw.size == 0:
            raw = raw.reshape(0, self.cfg.edge_in)
        if raw.ndim != 2 or raw.shape[1] != self.cfg.edge_in:
            raise ad.ShapeError("embed_edges", raw.shape, ("*", self.cfg.edge_in))
        return self.mlp("embed_edge", raw * EDGE_INPUT_SCALE)

    def encode_tracks(self, h_track, track_src, track_dst, dropout: "Dropout" = None) -> Optional[Tensor]:
        if h_track is None or len(h_track) == 0:
            return None
        drop = dropout or Dropout.off()
        n = len(h_track)
        h = h_track
        for l in range(self.cfg.enc_layers):
            p = f"encoder.{l}"
            x = self.norm(f"{p}.norm1", h)
            a, _, _ = self.attention(f"{p}.attn", x, x, track_src, track_dst, n)
            h = ad.add(h, drop(a))
            h = ad.add(h, drop(self.mlp(f"{p}.ffn", self.norm(f"{p}.norm2", h))))
        return h

    def decode(self, h_det, det_src, det_dst, h_track, assoc_track, assoc_det, h_edge, dropout: "Dropout" = None):
        """Run all decoder layers; returns (h_det, h_edge, cross_weights)."""
        drop = dropout or Dropout.off()
        n_det = len(h_det)
        memory = self.norm("encoder.out_norm", h_track) if h_track is not None else None
        n_edges = len(assoc_det)
        has_edge = np.zeros((n_det, 1))
        has_edge[np.asarray(assoc_det, dtype=np.int64), 0] = 1.0
        weights = []
        for l in range(self.cfg.dec_layers):
            p = f"decoder.{l}"
            x = self.norm(f"{p}.self_norm", h_det)
            a, _, _ = self.attention(f"{p}.self", x, x, det_src, det_dst, n_det)
            h_det = ad.add(h_det, drop(a))
            if n_edges:
                xq = self.norm(f"{p}.cross_norm", h_det)
                xe = self.norm(f"{p}.edge_norm", h_edge)
                bias = ad.matmul(xe, self.params[f"{p}.cross.W_A"])
                c, logits, alpha = self.attention(f"{p}.cross", xq, memory, assoc_track, assoc_det, n_det, edge_bias=bias)
                weights.append(alpha)
                # detections without candidate tracks keep their residual stream only
                h_det = ad.add(h_det, drop(ad.mul(c, has_edge)))
                e = ad.linear(logits, self.params[f"{p}.cross.W_E"], self.params[f"{p}.cross.b_E"])
                h_edge = ad.add(h_edge, drop(e))
                h_edge = ad.add(h_edge, drop(self.mlp(f"{p}.edge_ffn", self.norm(f"{p}.edge_ffn_norm", h_edge))))
            h_det = ad.add(h_det, drop(self.mlp(f"{p}.node_ffn", self.norm(f"{p}.node_ffn_norm", h_det))))
        return h_det, h_edge, weights

    def affinity_head(self, h_edge) -> Tensor:
        out = self.mlp("affinity_head", self.norm("affinity_head.norm", h_edge))
        return ad.reshape(out, (out.shape[0],))

    def velocity_head(self, h_det) -> Tensor:
        return self.mlp("velocity_head", self.norm("velocity_head.norm", h_det))

    def forward(
        self,
        det_raw: np.ndarray,
        det_src: np.ndarray,
        det_dst: np.ndarray,
        track_feat: Optional[Tensor],
        track_src: np.ndarray,
        track_dst: np.ndarray,
        assoc_track: np.ndarray,
        assoc_det: np.ndarray,
        edge_raw: np.ndarray,
        dropout: "Dropout" = None,
    ) -> ForwardOutput:
        h_det0 = self.embed_detections(det_raw)
        h_track = self.encode_tracks(track_feat, track_src, track_dst, dropout)
        h_edge0 = self.embed_edges(edge_raw)
        h_det, h_edge, weights = self.decode(h_det0, det_src, det_dst, h_track, assoc_track, assoc_det, h_edge0, dropout)
        return ForwardOutput(
            h_det0=h_det0,
            h_track=h_track,
            h_det=h_det,
            h_edge=h_edge,
            affinity_logits=self.affinity_head(h_edge),
            velocity=self.velocity_head(h_det),
            cross_weights=weights,
        )

    # ---------------------------------------------------------------- state

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.value) for name, p in self.params.items()]

    def copy_from(self, other: "GraphTransformer") -> None:
        for name, p in self.params.items():
            p.value[...] = other.params[name].value


class Dropout:
    """Seeded dropout applied to residual branches; each call draws a fresh counter-based mask."""

    def __init__(self, rate: float, seed: int, train: bool):
        self.rate = rate
        self.seed = seed
        self.train = train and rate > 0
        self.counter = 0

    @classmethod
    def off(cls) -> "Dropout":
        return cls(0.0, 0, False)

    def __call__(self, x):
        if not self.train:
            return x
        self.counter += 1
        return ad.dropout(x, self.rate, (self.seed, self.counter), True)


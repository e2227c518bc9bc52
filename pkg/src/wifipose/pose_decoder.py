"""Skeleton graphs and the topology-constrained pose decoder.

Pipeline per sample: mean-pool the frozen encoder's patch latents, repeat the
pooled vector once per joint and add a learnable per-joint prompt, run graph
convolution over the skeleton (symmetric normalisation of A + I), then joint
self-attention and a feed-forward block, and finally regress coordinates with a
head shared across joints.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError

BUILTIN_SKELETONS = ("mmfi17", "wipose18", "piw3d14")


@dataclass
class SkeletonGraph:
    skeleton_id: str
    joint_names: list[str]
    edges: list[tuple[int, int]]
    # torso length runs from the neck joint(s) to the hip joint(s); several
    # indices mean "midpoint of these joints"
    torso: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        J = len(self.joint_names)
        if J < 1:
            raise ConfigError("skeleton needs at least one joint")
        self.edges = [(int(a), int(b)) for a, b in self.edges]
        for a, b in self.edges:
            if not (0 <= a < J and 0 <= b < J):
                raise ConfigError(f"edge ({a}, {b}) out of range for {J} joints")
            if a == b:
                raise ConfigError(f"self edge ({a}, {a}) not allowed; self-loops are added internally")
        if not self._connected():
            raise ConfigError(f"skeleton {self.skeleton_id!r} is not connected")
        for key in ("neck", "hip"):
            for j in self.torso.get(key, []):
                if not 0 <= j < J:
                    raise ConfigError(f"torso {key} joint {j} out of range")

    @classmethod
    def from_adjacency(cls, adjacency, skeleton_id: str = "custom", joint_names=None) -> "SkeletonGraph":
        A = np.asarray(adjacency)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError(f"adjacency must be square, got shape {A.shape}")
        if not np.array_equal(A, A.T):
            raise ConfigError("adjacency matrix is not symmetric")
        if not np.all(np.isin(A, (0, 1))):
            raise ConfigError("adjacency matrix must be binary")
        if np.any(np.diag(A)):
            raise ConfigError("adjacency matrix must have a zero diagonal")
        J = A.shape[0]
        names = joint_names or [f"joint{j}" for j in range(J)]
        edges = [(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(A)))]
        return cls(skeleton_id, list(names), edges)

    @property
    def J(self) -> int:
        return len(self.joint_names)

    def _neighbours(self) -> list[list[int]]:
        nb = [[] for _ in range(self.J)]
        for a, b in self.edges:
            nb[a].append(b)
            nb[b].append(a)
        return nb

    def _connected(self) -> bool:
        return int((self.tree_parents(check=False)[1] >= 0).sum()) == self.J

    def tree_parents(self, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """BFS parents and depths from joint 0 (parent of the root is -1)."""
        parents = np.full(self.J, -1)
        depth = np.full(self.J, -1)
        depth[0] = 0
        nb = self._neighbours()
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in nb[u]:
                if depth[v] < 0:
                    depth[v] = depth[u] + 1
                    parents[v] = u
                    queue.append(v)
        return parents, depth

    @property
    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.J, self.J))
        for a, b in self.edges:
            A[a, b] = A[b, a] = 1.0
        return A

    @property
    def adjacency_hat(self) -> np.ndarray:
        return self.adjacency + np.eye(self.J)

    @property
    def degree(self) -> np.ndarray:
        return np.diag(self.adjacency_hat.sum(axis=1))

    def normalized_operator(self) -> np.ndarray:
        """D^-1/2 (A + I) D^-1/2."""
        d = 1.0 / np.sqrt(self.adjacency_hat.sum(axis=1))
        return d[:, None] * self.adjacency_hat * d[None, :]

    def torso_length(self, pose: np.ndarray) -> np.ndarray:
        """Per-frame torso length for poses of shape (..., J, C)."""
        if not self.torso.get("neck") or not self.torso.get("hip"):
            raise ConfigError(f"skeleton {self.skeleton_id!r} defines no torso joints")
        neck = pose[..., self.torso["neck"], :].mean(axis=-2)
        hip = pose[..., self.torso["hip"], :].mean(axis=-2)
        return np.linalg.norm(neck - hip, axis=-1)

    def to_json(self) -> dict:
        return {
            "skeleton_id": self.skeleton_id,
            "joint_names": list(self.joint_names),
            "edges": [list(e) for e in self.edges],
            "torso": {k: list(v) for k, v in self.torso.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "SkeletonGraph":
        try:
            return cls(d.get("skeleton_id", "custom"), list(d["joint_names"]),
                       [tuple(e) for e in d["edges"]], dict(d.get("torso", {})))
        except KeyError as exc:
            raise ConfigError(f"skeleton file lacks field {exc}") from None


def load_skeleton(path) -> SkeletonGraph:
    with open(path) as fh:
        return SkeletonGraph.from_json(json.load(fh))


def skeleton_registry(skeleton_id: str) -> SkeletonGraph:
    if skeleton_id not in BUILTIN_SKELETONS:
        path = Path(skeleton_id)
        if path.suffix == ".json" and path.exists():
            return load_skeleton(path)
        raise ConfigError(f"unknown skeleton {skeleton_id!r}; built-ins are {', '.join(BUILTIN_SKELETONS)}")
    text = resources.files("wifipose").joinpath("skeletons", f"{skeleton_id}.json").read_text()
    return SkeletonGraph.from_json(json.loads(text))


def skeleton_for_joint_count(J: int) -> SkeletonGraph:
    by_count = {17: "mmfi17", 18: "wipose18", 14: "piw3d14"}
    if J not in by_count:
        raise ConfigError(f"no built-in skeleton with {J} joints (have 14, 17, 18)")
    return skeleton_registry(by_count[J])


# ---------------------------------------------------------------------------
# functional forms


def build_joint_tokens(latents: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
    """(..., n, d) patch latents + (J, d) prompt -> (..., J, d)."""
    pooled = latents.mean(dim=-2, keepdim=True)
    return pooled + prompt


def gcn_layer(x: torch.Tensor, operator: torch.Tensor, weight: torch.Tensor, activation=F.relu) -> torch.Tensor:
    """activation(operator @ x @ weight); ``operator`` is the normalised adjacency."""
    out = operator @ x @ weight
    return out if activation is None else activation(out)


def attention_block(x, w_q, w_k, w_v, ln_weight=None, ln_bias=None, return_weights=False):
    """LN(x + softmax(Q K^T / sqrt(d_k)) V) over the joint axis."""
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(k.shape[-1]), dim=-1)
    out = F.layer_norm(x + attn @ v, x.shape[-1:], ln_weight, ln_bias)
    return (out, attn) if return_weights else out


def ffn_regress(z_attn, ffn: nn.Module, head: nn.Module, ln_weight=None, ln_bias=None):
    """Return (Z, Y_hat) with Z = LN(FFN(z_attn) + z_attn) and Y_hat = head(Z) per joint."""
    z = F.layer_norm(ffn(z_attn) + z_attn, z_attn.shape[-1:], ln_weight, ln_bias)
    return z, head(z)


def loss_pose(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every joint coordinate."""
    if pred.shape != target.shape:
        raise DataError(f"pose shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


# ---------------------------------------------------------------------------
# modules


class GCNLayer(nn.Module):
    def __init__(self, graph: SkeletonGraph, d: int):
        super().__init__()
        self.register_buffer("operator", torch.as_tensor(graph.normalized_operator(), dtype=torch.float32))
        self.weight = nn.Parameter(torch.empty(d, d))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x):
        return gcn_layer(x, self.operator, self.weight)


class JointAttention(nn.Module):
    def __init__(self, d: int, d_k: int | None = None):
        super().__init__()
        d_k = d_k or d
        self.w_q = nn.Parameter(torch.empty(d, d_k))
        self.w_k = nn.Parameter(torch.empty(d, d_k))
        self.w_v = nn.Parameter(torch.empty(d, d))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)
        self.norm = nn.LayerNorm(d)

    def forward(self, x, return_weights=False):
        return attention_block(x, self.w_q, self.w_k, self.w_v, self.norm.weight, self.norm.bias,
                               return_weights=return_weights)


class FeedForward(nn.Sequential):
    def __init__(self, d: int, hidden: int):
        super().__init__(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))


class JointBlock(nn.Module):
    """Joint self-attention followed by the residual feed-forward sublayer."""

    def __init__(self, d: int, ffn_dim: int, d_k: int | None = None):
        super().__init__()
        self.attn = JointAttention(d, d_k)
        self.ffn = FeedForward(d, ffn_dim)
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        x = self.attn(x)
        return F.layer_norm(self.ffn(x) + x, x.shape[-1:], self.norm.weight, self.norm.bias)


def make_head(d: int, C: int, hidden: int | None = None) -> nn.Module:
    if not hidden:
        return nn.Linear(d, C)
    return nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, C))


class PoseDecoder(nn.Module):
    """Prompt + GCN + joint attention decoder mapping encoder latents to a pose.

    Pooled features are standardised with the fixed ``feat_mean`` / ``feat_std``
    buffers (fitted on training features, like a non-affine batch norm on a
    frozen backbone).  Predictions are made in a standardised coordinate frame
    and mapped back with the fixed ``pose_mean`` / ``pose_scale`` buffers.
    """

    def __init__(self, graph: SkeletonGraph, d: int, C: int, gcn_layers: int = 1, attn_layers: int = 1,
                 ffn_dim: int | None = None, d_k: int | None = None, head_hidden: int | None = None,
                 use_prompt: bool = True, prompt_std: float = 1.0):
        super().__init__()
        self.J, self.C, self.d = graph.J, C, d
        self.use_prompt = use_prompt
        self.prompt = nn.Parameter(torch.randn(graph.J, d) * prompt_std)
        self.gcn = nn.ModuleList(GCNLayer(graph, d) for _ in range(gcn_layers))
        self.blocks = nn.ModuleList(JointBlock(d, ffn_dim or 2 * d, d_k) for _ in range(attn_layers))
        self.head = make_head(d, C, head_hidden)
        self.register_buffer("feat_mean", torch.zeros(d))
        self.register_buffer("feat_std", torch.ones(d))
        self.register_buffer("pose_mean", torch.zeros(graph.J, C))
        self.register_buffer("pose_scale", torch.ones(()))

    def forward_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        """(B, d) pooled encoder features -> (B, J, C) standardised pose."""
        pooled = (pooled - self.feat_mean) / self.feat_std
        x = pooled[:, None, :].expand(-1, self.J, -1)
        if self.use_prompt:
            x = x + self.prompt
        for layer in self.gcn:
            x = layer(x)
        for block in self.blocks:
            x = block(x)
        return self.head(x)

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        return self.forward_pooled(latents.mean(dim=-2))

    def denormalize(self, y: torch.Tensor) -> torch.Tensor:
        return y * self.pose_scale + self.pose_mean

    def normalize(self, y: torch.Tensor) -> torch.Tensor:
        return (y - self.pose_mean) / self.pose_scale

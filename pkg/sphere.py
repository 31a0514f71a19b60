"""Unit-hypersphere geometry: projection, geodesic distance and projected steps.

Numpy versions back the embedding store; the ``torch_*`` twins are used inside
the model so gradients flow through the projection.
"""
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from errors import SphereDomainError

UNIT_TOL = 1e-6
NORM_TOL = 1e-9
HEADER_MAGIC = "CSHT-SPHERE-EMBEDDING v1"


def project_to_sphere(x) -> np.ndarray:
    """Pi(x) = x / ||x|| along the last axis; zero vectors are outside the domain."""
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norm == 0).any() or not np.isfinite(norm).all():
        raise SphereDomainError("cannot project the zero (or non-finite) vector onto the sphere")
    return x / norm


def _check_unit(v: np.ndarray, name: str):
    norm = np.linalg.norm(v, axis=-1)
    if (np.abs(norm - 1.0) > UNIT_TOL).any():
        raise SphereDomainError(f"{name} is not a unit vector (norm {np.max(np.abs(norm - 1.0)) + 1.0:.9f})")


def geodesic_distance(u, v) -> float:
    """arccos<u, v>, with the inner product clamped to [-1, 1]."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_unit(u, "u")
    _check_unit(v, "v")
    # sum of the elementwise product is symmetric in (u, v)
    inner = np.sum(u * v, axis=-1)
    return np.arccos(np.clip(inner, -1.0, 1.0))


def riemannian_step(x, grad, eta: float) -> np.ndarray:
    """x <- Pi(x - eta * grad)."""
    x = np.asarray(x, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if eta == 0 or not grad.any():
        return x.copy()
    moved = x - eta * grad
    if (np.linalg.norm(moved, axis=-1) == 0).any():
        raise SphereDomainError(
            f"projected step landed at the origin (eta={eta}, |grad|={np.linalg.norm(grad):.6g})"
        )
    return project_to_sphere(moved)


# --- TORCH TWINS ---

def torch_project(x: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise SphereDomainError("cannot project the zero vector onto the sphere")
    return x / norm


@torch.no_grad()
def torch_riemannian_step(param: torch.Tensor, eta: float):
    """In-place Pi(x - eta * grad) on every row of an embedding parameter."""
    if param.grad is None or eta == 0 or not bool(param.grad.any()):
        return
    moved = param - eta * param.grad
    if bool((torch.linalg.vector_norm(moved, dim=-1) == 0).any()):
        raise SphereDomainError(f"projected step landed at the origin (eta={eta})")
    param.copy_(torch_project(moved))


# --- EMBEDDING STORE ---

class SphereEmbedding:
    """LaggedNode -> unit vector in R^{dim+1}; rows kept unit-norm."""

    def __init__(self, nodes: Sequence, table: np.ndarray):
        table = np.asarray(table, dtype=float)
        if table.ndim != 2 or table.shape[0] != len(nodes):
            raise SphereDomainError("embedding table must have one row per node")
        self.nodes = list(nodes)
        self.index: Dict = {node: i for i, node in enumerate(self.nodes)}
        self.table = table
        self.check_norms()

    @property
    def dim(self) -> int:
        """Intrinsic sphere dimension n (ambient n+1)."""
        return self.table.shape[1] - 1

    @classmethod
    def random(cls, nodes: Sequence, ambient_dim: int = 64, rng: Optional[np.random.Generator] = None) -> "SphereEmbedding":
        """Isotropic Gaussian draws projected onto the sphere (uniform on S^n)."""
        rng = rng or np.random.default_rng(0)
        return cls(nodes, project_to_sphere(rng.standard_normal((len(nodes), ambient_dim))))

    def __getitem__(self, node) -> np.ndarray:
        return self.table[self.index[node]]

    def __len__(self):
        return len(self.nodes)

    def check_norms(self, tol: float = NORM_TOL):
        drift = np.abs(np.linalg.norm(self.table, axis=1) - 1.0)
        if drift.size and drift.max() >= tol:
            raise SphereDomainError(f"embedding row drifted off the sphere by {drift.max():.3g}")

    def step(self, grads: np.ndarray, eta: float):
        self.table = riemannian_step(self.table, grads, eta)

    def distance(self, a, b) -> float:
        return float(geodesic_distance(self[a], self[b]))

    def save(self, path: str):
        """Text header (magic, dim, node order) then little-endian float64 rows."""
        header = [HEADER_MAGIC, f"rows={len(self.nodes)} ambient={self.table.shape[1]}"]
        header += [str(n) for n in self.nodes]
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n---\n").encode("utf-8"))
            f.write(np.ascontiguousarray(self.table, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str, parse=str) -> "SphereEmbedding":
        with open(path, "rb") as f:
            blob = f.read()
        head, _, body = blob.partition(b"\n---\n")
        lines = head.decode("utf-8").split("\n")
        if lines[0] != HEADER_MAGIC:
            raise SphereDomainError(f"{path} is not an embedding file")
        sizes = dict(kv.split("=") for kv in lines[1].split())
        rows, ambient = int(sizes["rows"]), int(sizes["ambient"])
        nodes = [parse(line) for line in lines[2:2 + rows]]
        table = np.frombuffer(body, dtype="<f8").reshape(rows, ambient).astype(float)
        return cls(nodes, table)

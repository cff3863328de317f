"""Dual linear projection heads trained with a weighted symmetric InfoNCE.

The loss for a batch of ``n`` aligned pairs with unit rows ``B_T`` (text)
and ``B_M`` (molecule), similarity ``S = B_T B_M^T`` and temperature ``T``::

    L_nce = 1/2 * (mean_i CE_w(S[i, :] / T, i) + mean_i CE_w(S[:, i] / T, i))
    CE_w(z, i) = -z_i + log(sum_j w_ij exp(z_j))

where ``w_ij = beta`` when records ``i != j`` share a target and 1
otherwise. A hinge on same-target pairs adds
``lambda * mean_{i != j, same target} max(0, m - (S_ii - S_ij))``.
Gradients are derived by hand and verified by :func:`grad_check`.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError, SchemaError
from .hashing import Xoshiro256

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BRG1"
_SHUFFLE_STREAM = 0x9E3779B97F4A7C15


@dataclass
class TrainConfig:
    temperature: float = 0.07
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 512
    hard_negative_beta: float = 2.0
    margin: float = 0.15
    margin_weight: float = 1.0
    seed: int = 0
    dim: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.hard_negative_beta < 1:
            raise ValueError("hard_negative_beta must be >= 1")
        if self.margin < 0 or self.margin_weight < 0:
            raise ValueError("margin and margin_weight must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0 or self.dim < 1:
            raise ValueError("epochs must be >= 0 and dim >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass
class BridgeParams:
    W_T: np.ndarray  # (d, D_text)
    W_M: np.ndarray  # (d, D_mol)

    @property
    def d(self) -> int:
        return int(self.W_T.shape[0])

    def astype(self, dtype) -> "BridgeParams":
        return BridgeParams(self.W_T.astype(dtype), self.W_M.astype(dtype))

    def copy(self) -> "BridgeParams":
        return BridgeParams(self.W_T.copy(), self.W_M.copy())


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    infonce: list[float] = field(default_factory=list)
    margin: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)


def init_params(d: int, D_text: int, D_mol: int, seed: int = 0) -> BridgeParams:
    """Uniform Glorot-style init, ``W_T`` drawn before ``W_M`` from one stream."""
    if min(d, D_text, D_mol) < 1:
        raise ValueError("dimensions must be >= 1")
    rng = Xoshiro256(seed)
    mats = []
    for D in (D_text, D_mol):
        bound = math.sqrt(6.0 / (d + D))
        mats.append(np.asarray(rng.uniforms(d * D, -bound, bound), dtype=np.float32).reshape(d, D))
    return BridgeParams(*mats)


def _project(W: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Y = X @ W.T
    norms = np.sqrt(np.einsum("ij,ij->i", Y, Y))
    if not np.all(norms > 0):
        bad = int(np.flatnonzero(~(norms > 0))[0])
        raise NumericError(f"projected row {bad} has zero norm (degenerate input?)")
    return Y / norms[:, None], norms


def project(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Rows of ``X W^T``, each scaled to unit length."""
    if X.shape[1] != W.shape[1]:
        raise ValueError(f"input width {X.shape[1]} does not match projection {W.shape}")
    return _project(W, X)[0]


def _normalize_backward(B: np.ndarray, norms: np.ndarray, dB: np.ndarray) -> np.ndarray:
    radial = np.einsum("ij,ij->i", B, dB)
    return (dB - B * radial[:, None]) / norms[:, None]


def _same_target(target_ids: Sequence[str]) -> np.ndarray:
    codes = {}
    labels = np.fromiter((codes.setdefault(t, len(codes)) for t in target_ids),
                         dtype=np.int64, count=len(target_ids))
    return labels[:, None] == labels[None, :]


def negative_weights(target_ids: Sequence[str], beta: float = 2.0) -> np.ndarray:
    same = _same_target(target_ids)
    np.fill_diagonal(same, False)
    return np.where(same, float(beta), 1.0)


def margin_penalty(S: np.ndarray, target_ids: Sequence[str], m: float) -> tuple[float, np.ndarray]:
    """Mean hinge ``max(0, m - (S_ii - S_ij))`` over ordered same-target pairs.

    The subgradient at the kink is 0.
    """
    n = S.shape[0]
    mask = _same_target(target_ids)
    np.fill_diagonal(mask, False)
    count = int(mask.sum())
    grad = np.zeros_like(S)
    if count == 0:
        return 0.0, grad
    slack = m - np.diag(S)[:, None] + S
    active = mask & (slack > 0)
    value = float(slack[active].sum()) / count
    grad[active] = 1.0 / count
    grad[np.arange(n), np.arange(n)] -= active.sum(axis=1) / count
    return value, grad


def _weighted_ce(Z: np.ndarray, log_w: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of the weighted cross-entropy with the diagonal as
    target, and its gradient w.r.t. ``Z``."""
    n = Z.shape[0]
    A = Z + log_w
    A = A - A.max(axis=1, keepdims=True)
    E = np.exp(A)
    denom = E.sum(axis=1, keepdims=True)
    P = E / denom
    lse = np.log(denom[:, 0]) + (Z + log_w).max(axis=1)
    loss = float(np.mean(lse - np.diag(Z)))
    grad = P
    grad[np.arange(n), np.arange(n)] -= 1.0
    return loss, grad / n


def _loss_on_similarity(S, weights, cfg: TrainConfig, target_ids):
    """Return ``(total, infonce, margin, dL/dS)``."""
    T = cfg.temperature
    log_w = np.log(weights)
    l1, g1 = _weighted_ce(S / T, log_w)
    l2, g2 = _weighted_ce(S.T / T, log_w.T)
    nce = 0.5 * (l1 + l2)
    dS = 0.5 * (g1 + g2.T) / T
    marg = 0.0
    if cfg.margin_weight > 0:
        marg, gm = margin_penalty(S, target_ids, cfg.margin)
        dS = dS + cfg.margin_weight * gm
    total = nce + cfg.margin_weight * marg
    if not (math.isfinite(total) and np.all(np.isfinite(dS))):
        raise NumericError(f"non-finite loss or gradient (loss={total})")
    return total, nce, marg, dS


def bridge_loss(B_T: np.ndarray, B_M: np.ndarray, weights: np.ndarray,
                cfg: TrainConfig, target_ids: Sequence[str]):
    """Loss and its gradients with respect to the normalised embeddings.

    Returns ``(loss, grad_B_T, grad_B_M)``.
    """
    if B_T.shape[0] != B_M.shape[0]:
        raise ValueError("B_T and B_M need the same number of rows")
    S = B_T @ B_M.T
    total, _, _, dS = _loss_on_similarity(S, weights, cfg, target_ids)
    return total, dS @ B_M, dS.T @ B_T


def loss_and_grads(params: BridgeParams, X_mol: np.ndarray, Z_text: np.ndarray,
                   target_ids: Sequence[str], cfg: TrainConfig):
    """Full forward/backward through both heads.

    Returns ``(total, infonce, margin, grad_W_T, grad_W_M)``.
    """
    B_T, n_T = _project(params.W_T, Z_text)
    B_M, n_M = _project(params.W_M, X_mol)
    weights = negative_weights(target_ids, cfg.hard_negative_beta).astype(B_T.dtype)
    S = B_T @ B_M.T
    total, nce, marg, dS = _loss_on_similarity(S, weights, cfg, target_ids)
    dY_T = _normalize_backward(B_T, n_T, dS @ B_M)
    dY_M = _normalize_backward(B_M, n_M, dS.T @ B_T)
    return total, nce, marg, dY_T.T @ Z_text, dY_M.T @ X_mol


class AdamW:
    """Adam with decoupled weight decay applied to the parameters only."""

    def __init__(self, shapes, cfg: TrainConfig, dtype=np.float32):
        self.cfg = cfg
        self.m = [np.zeros(s, dtype=dtype) for s in shapes]
        self.v = [np.zeros(s, dtype=dtype) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.adam_beta1 ** self.t
        bc2 = 1.0 - c.adam_beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            p *= 1.0 - c.lr * c.weight_decay
            m *= c.adam_beta1
            m += (1.0 - c.adam_beta1) * g
            v *= c.adam_beta2
            v += (1.0 - c.adam_beta2) * g * g
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def train(mol_X: np.ndarray, text_Z: np.ndarray, target_ids: Sequence[str],
          cfg: TrainConfig | None = None) -> tuple[BridgeParams, TrainHistory]:
    """Fit both heads on aligned pairs (row ``i`` of each matrix is one pair).

    Each epoch reshuffles with a seeded Fisher-Yates pass; a trailing batch
    of one is skipped since it has no negatives.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    N = mol_X.shape[0]
    if N < 2:
        raise DataError("training needs at least 2 pairs")
    if text_Z.shape[0] != N or len(target_ids) != N:
        raise DataError("molecule, text and target rows are not aligned")
    mol_X = np.asarray(mol_X, dtype=np.float32)
    text_Z = np.asarray(text_Z, dtype=np.float32)
    params = init_params(cfg.dim, text_Z.shape[1], mol_X.shape[1], cfg.seed)
    history = TrainHistory()
    if cfg.epochs == 0:
        return params, history
    targets = list(target_ids)
    opt = AdamW([params.W_T.shape, params.W_M.shape], cfg)
    rng = Xoshiro256(cfg.seed ^ _SHUFFLE_STREAM)
    order = list(range(N))
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        totals, nces, margins = [], [], []
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            total, nce, marg, gT, gM = loss_and_grads(
                params, mol_X[idx], text_Z[idx], [targets[i] for i in idx], cfg)
            opt.step([params.W_T, params.W_M], [gT.astype(np.float32), gM.astype(np.float32)])
            totals.append(total)
            nces.append(nce)
            margins.append(marg)
        history.loss.append(float(np.mean(totals)))
        history.infonce.append(float(np.mean(nces)))
        history.margin.append(float(np.mean(margins)))
        log.debug("epoch %d loss %.5f", epoch + 1, history.loss[-1])
    if history.loss[-1] > history.loss[0]:
        log.warning("final loss %.4f exceeds first-epoch loss %.4f", history.loss[-1], history.loss[0])
    return params, history


def encode(params: BridgeParams, mol_X: np.ndarray, text_Z: np.ndarray):
    """Project both modalities: returns ``(B_T, B_M)``."""
    return (project(params.W_T, np.asarray(text_Z, dtype=params.W_T.dtype)),
            project(params.W_M, np.asarray(mol_X, dtype=params.W_M.dtype)))


def _hinge_state(params, X_mol, Z_text, target_ids, cfg) -> np.ndarray:
    B_T = project(params.W_T, Z_text)
    B_M = project(params.W_M, X_mol)
    S = B_T @ B_M.T
    mask = _same_target(target_ids)
    np.fill_diagonal(mask, False)
    return mask & (cfg.margin - np.diag(S)[:, None] + S > 0)


def grad_check(params: BridgeParams, batch, cfg: TrainConfig, eps: float = 1e-5,
               n_samples: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``batch`` is ``(X_mol, Z_text, target_ids)``. Everything runs in float64.
    ``n_samples`` entries are drawn from each of ``W_T`` and ``W_M``; entries
    whose perturbation flips any margin hinge are skipped.
    """
    X_mol, Z_text, target_ids = batch
    if len(target_ids) < 2:
        raise ValueError("grad_check needs a batch of at least 2")
    p = params.astype(np.float64)
    X_mol = np.asarray(X_mol, dtype=np.float64)
    Z_text = np.asarray(Z_text, dtype=np.float64)
    _, _, _, gT, gM = loss_and_grads(p, X_mol, Z_text, target_ids, cfg)
    use_hinge = cfg.margin_weight > 0
    base_state = _hinge_state(p, X_mol, Z_text, target_ids, cfg) if use_hinge else None
    rng = np.random.default_rng(seed)
    worst = 0.0
    skipped = 0
    for W, G in ((p.W_T, gT), (p.W_M, gM)):
        flat = rng.choice(W.size, size=min(n_samples, W.size), replace=False)
        for f in flat:
            r, c = divmod(int(f), W.shape[1])
            orig = W[r, c]
            values = []
            flipped = False
            for delta in (eps, -eps):
                W[r, c] = orig + delta
                values.append(loss_and_grads(p, X_mol, Z_text, target_ids, cfg)[0])
                if use_hinge and not np.array_equal(
                        _hinge_state(p, X_mol, Z_text, target_ids, cfg), base_state):
                    flipped = True
            W[r, c] = orig
            if flipped:
                skipped += 1
                continue
            fd = (values[0] - values[1]) / (2 * eps)
            ga = G[r, c]
            worst = max(worst, abs(ga - fd) / max(1e-12, abs(ga) + abs(fd)))
    if skipped:
        log.info("grad_check skipped %d entries at hinge kinks", skipped)
    return worst


def save_checkpoint(params: BridgeParams, cfg: TrainConfig, path: str | Path) -> None:
    W_T = np.ascontiguousarray(params.W_T, dtype="<f4")
    W_M = np.ascontiguousarray(params.W_M, dtype="<f4")
    d, D_text = W_T.shape
    D_mol = W_M.shape[1]
    trailer = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<III", d, D_text, D_mol))
        fh.write(W_T.tobytes())
        fh.write(W_M.tobytes())
        fh.write(trailer)


def load_checkpoint(path: str | Path) -> tuple[BridgeParams, TrainConfig]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC or len(data) < 16:
        raise SchemaError(f"{path}: not a BRG1 checkpoint")
    d, D_text, D_mol = struct.unpack_from("<III", data, 4)
    pos = 16
    n_T, n_M = d * D_text, d * D_mol
    if len(data) < pos + 4 * (n_T + n_M):
        raise SchemaError(f"{path}: truncated checkpoint")
    W_T = np.frombuffer(data, "<f4", n_T, pos).reshape(d, D_text).astype(np.float32)
    pos += 4 * n_T
    W_M = np.frombuffer(data, "<f4", n_M, pos).reshape(d, D_mol).astype(np.float32)
    pos += 4 * n_M
    try:
        cfg = TrainConfig.from_dict(json.loads(data[pos:].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: bad config trailer ({exc})") from None
    return BridgeParams(W_T, W_M), cfg

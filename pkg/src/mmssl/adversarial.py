"""Adversarial modality-aware relation generation.

The generator turns raw modality features into user/item collaborative
embeddings and scores every user-item pair by cosine similarity, producing
one dense relation matrix per modality.  A small row-wise critic is trained
to tell those rows apart from a smoothed proxy of the observed interaction
rows; the generator is trained to fool it.  The critic is regularized with
a gradient penalty on interpolated rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (
    AffineLayer,
    BatchNormLayer,
    BatchNormState,
    DropoutLayer,
    LeakyReluLayer,
    SigmoidLayer,
    Tensor,
)
from .data import NormalizedAdjacency

__all__ = [
    "GeneratorParams",
    "DiscriminatorParams",
    "GumbelConfig",
    "modality_collab_embeddings",
    "generate_relations",
    "relation_rows",
    "gumbel_real_proxy",
    "discriminate",
    "interpolate_rows",
    "loss_g",
    "loss_d",
]


@dataclass
class GeneratorParams:
    """Per-modality feature transforms (one affine map + dropout each)."""

    weights: list[Tensor]  # [m]: (raw_dim_m, d)
    biases: list[Tensor]  # [m]: (d,)
    dropout_rate: float = 0.1

    @classmethod
    def create(
        cls,
        modality_dims: list[int],
        embed_dim: int,
        rng: np.random.Generator,
        dropout_rate: float = 0.1,
    ) -> "GeneratorParams":
        weights, biases = [], []
        for m, dim in enumerate(modality_dims):
            bound = np.sqrt(6.0 / (dim + embed_dim))
            weights.append(
                ad.parameter(rng.uniform(-bound, bound, size=(dim, embed_dim)), f"gen.w{m}")
            )
            biases.append(ad.parameter(np.zeros(embed_dim), f"gen.b{m}"))
        return cls(weights=weights, biases=biases, dropout_rate=dropout_rate)

    def parameters(self) -> list[Tensor]:
        return list(self.weights) + list(self.biases)


def modality_collab_embeddings(
    adj: NormalizedAdjacency,
    raw_features: np.ndarray,
    gen: GeneratorParams,
    modality: int,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Collaborative modality embeddings for users, then items.

    Raw item features are first pushed through the modality transform with
    dropout; user vectors aggregate transformed item vectors over observed
    interactions with 1/sqrt(degree) weights, and item vectors then
    aggregate those user vectors the same way.
    """
    feats = ad.add(
        ad.matmul(ad.constant(np.asarray(raw_features, dtype=np.float64)), gen.weights[modality]),
        gen.biases[modality],
    )
    feats = ad.dropout(feats, gen.dropout_rate, rng, train)
    f_user = ad.sparse_matmul(adj.user_from_item, feats)
    f_item = ad.sparse_matmul(adj.item_from_user, f_user)
    return f_user, f_item


def relation_rows(f_user_rows: Tensor, f_item: Tensor) -> Tensor:
    """Cosine similarity of the given user rows against every item."""
    q = ad.l2_normalize_rows(f_user_rows)
    k = ad.l2_normalize_rows(f_item)
    return ad.matmul(q, ad.transpose(k))


def generate_relations(f_user: Tensor, f_item: Tensor, block_rows: int = 0) -> Tensor:
    """Full relation matrix, assembled from row blocks of the given size.

    ``block_rows`` of zero (or >= the user count) computes the matrix in
    one piece; any positive block size yields the identical result.
    """
    n = f_user.shape[0]
    if block_rows <= 0 or block_rows >= n:
        return relation_rows(f_user, f_item)
    k = ad.l2_normalize_rows(f_item)
    kt = ad.transpose(k)
    blocks = []
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        q = ad.l2_normalize_rows(ad.gather_rows(f_user, np.arange(start, stop)))
        blocks.append(ad.matmul(q, kt))
    return ad.concat(blocks, axis=0)


# --------------------------------------------------------------------------
# Real-sample proxy
# --------------------------------------------------------------------------


@dataclass
class GumbelConfig:
    tau: float = 0.2
    zeta: float = 100.0
    disable: bool = False  # feed raw interaction rows as real samples


def gumbel_real_proxy(
    a_rows: np.ndarray,
    rng: np.random.Generator,
    cfg: GumbelConfig,
    h_user_rows: np.ndarray | None = None,
    h_item: np.ndarray | None = None,
) -> np.ndarray:
    """Smoothed interaction rows used as the critic's real samples.

    Each row gets i.i.d. Gumbel noise ``g = -log(-log(u))``, a temperature
    softmax over items, and an augmentation term ``zeta * cos(h_u, h_i)``
    built from the current final embeddings.  The output carries no
    gradient: the proxy is a training target, not a trainable path.
    """
    a_rows = np.asarray(a_rows, dtype=np.float64)
    if cfg.disable:
        return a_rows.copy()
    u = rng.random(a_rows.shape)
    gumbel = -np.log(-np.log(u))
    shifted = (a_rows + gumbel) / cfg.tau
    shifted -= shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    rows = e / e.sum(axis=1, keepdims=True)
    if cfg.zeta != 0.0 and h_user_rows is not None and h_item is not None:
        un = np.linalg.norm(h_user_rows, axis=1, keepdims=True)
        vn = np.linalg.norm(h_item, axis=1, keepdims=True)
        qu = np.divide(h_user_rows, un, out=np.zeros_like(h_user_rows), where=un > 0)
        qi = np.divide(h_item, vn, out=np.zeros_like(h_item), where=vn > 0)
        rows = rows + cfg.zeta * (qu @ qi.T)
    return rows


# --------------------------------------------------------------------------
# Critic
# --------------------------------------------------------------------------


@dataclass
class DiscriminatorParams:
    """Row-wise critic: two (affine, leaky-relu, batch-norm, dropout) blocks,
    then an affine map to one logit and a sigmoid."""

    w1: Tensor
    b1: Tensor
    gamma1: Tensor
    beta1: Tensor
    bn1: BatchNormState
    w2: Tensor
    b2: Tensor
    gamma2: Tensor
    beta2: Tensor
    bn2: BatchNormState
    w3: Tensor
    b3: Tensor
    slope: float = 0.2
    dropout_rate: float = 0.1

    @classmethod
    def create(
        cls,
        num_items: int,
        hidden: int,
        rng: np.random.Generator,
        slope: float = 0.2,
        dropout_rate: float = 0.1,
    ) -> "DiscriminatorParams":
        def xavier(fan_in, fan_out, name):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name)

        return cls(
            w1=xavier(num_items, hidden, "disc.w1"),
            b1=ad.parameter(np.zeros(hidden), "disc.b1"),
            gamma1=ad.parameter(np.ones(hidden), "disc.gamma1"),
            beta1=ad.parameter(np.zeros(hidden), "disc.beta1"),
            bn1=BatchNormState.create(hidden),
            w2=xavier(hidden, hidden, "disc.w2"),
            b2=ad.parameter(np.zeros(hidden), "disc.b2"),
            gamma2=ad.parameter(np.ones(hidden), "disc.gamma2"),
            beta2=ad.parameter(np.zeros(hidden), "disc.beta2"),
            bn2=BatchNormState.create(hidden),
            w3=xavier(hidden, 1, "disc.w3"),
            b3=ad.parameter(np.zeros(1), "disc.b3"),
            slope=slope,
            dropout_rate=dropout_rate,
        )

    def parameters(self) -> list[Tensor]:
        return [
            self.w1, self.b1, self.gamma1, self.beta1,
            self.w2, self.b2, self.gamma2, self.beta2,
            self.w3, self.b3,
        ]

    def layers(self) -> list:
        return [
            AffineLayer(self.w1, self.b1),
            LeakyReluLayer(self.slope),
            BatchNormLayer(self.gamma1, self.beta1, self.bn1),
            DropoutLayer(self.dropout_rate),
            AffineLayer(self.w2, self.b2),
            LeakyReluLayer(self.slope),
            BatchNormLayer(self.gamma2, self.beta2, self.bn2),
            DropoutLayer(self.dropout_rate),
            AffineLayer(self.w3, self.b3),
            SigmoidLayer(),
        ]


def discriminate(
    rows,
    disc: DiscriminatorParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Score a batch of relation rows, one value in (0, 1) per row."""
    rows = rows if isinstance(rows, Tensor) else ad.constant(rows)
    if rows.ndim != 2:
        raise ValueError("discriminate expects a 2-D batch of rows")
    out = ad.forward_layers(disc.layers(), rows, train=train, rng=rng)
    return ad.reshape(out, (rows.shape[0],))


def interpolate_rows(
    real: np.ndarray, fake: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Per-row convex mix of real and fake samples for the gradient penalty."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: real {real.shape} vs fake {fake.shape}")
    eps = rng.random((real.shape[0], 1))
    return eps * real + (1.0 - eps) * fake


# --------------------------------------------------------------------------
# Adversarial losses
# --------------------------------------------------------------------------


def loss_g(fake_scores_per_modality: list[Tensor]) -> Tensor:
    """Generator loss: -E[D(generated rows)], summed over modalities."""
    total = None
    for scores in fake_scores_per_modality:
        term = ad.scale(ad.mean(scores), -1.0)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("loss_g needs at least one modality batch")
    return total


def loss_d(
    real_scores: Tensor,
    fake_scores: Tensor,
    gp_rows: np.ndarray,
    disc: DiscriminatorParams,
    lam1: float = 1.0,
    train: bool = True,
    rng: np.random.Generator | None = None,
    negate_critic: bool = False,
) -> Tensor:
    """Critic loss: E[D(real)] - E[D(fake)] plus the unit-norm penalty.

    The penalty differentiates each interpolated row through the critic and
    pushes the gradient norm toward one.  ``negate_critic`` flips the sign
    of the score difference for the conventional critic direction while
    keeping the penalty positive.
    """
    diff = ad.sub(ad.mean(real_scores), ad.mean(fake_scores))
    if negate_critic:
        diff = ad.scale(diff, -1.0)
    _, norms = ad.input_gradient_norm(disc.layers(), gp_rows, train=train, rng=rng)
    off = ad.sub(norms, ad.constant(np.ones(norms.shape)))
    penalty = ad.mean(ad.mul(off, off))
    return ad.add(diff, ad.scale(penalty, lam1))

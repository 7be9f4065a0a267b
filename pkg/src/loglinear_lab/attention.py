"""Log-linear attention over the Fenwick level hierarchy.

For each head, token ``t`` reads every active level of ``partition(t + 1)``
with its query and mixes the reads with λ:

    o_t = sum_l  λ_t[l] * q_t^T S_t[l]

where ``S_t[l]`` is the sum of ``k_i v_i^T`` over the level-``l`` bucket.
There is no feature map, no 1/sqrt(d) scaling and no normalizer.

Three evaluation paths produce the same numbers:

``forward_recurrent``
    streams tokens through a :class:`HierarchicalMemory` (O(T log T) reads).
``forward_masked``
    materializes the (T, T) level-weight matrix once; fastest in numpy and
    the default for training.
``forward_oracle``
    rebuilds every bucket from scratch per token in plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fenwick import HierarchicalMemory, active_mask, level_matrix, num_levels, partition
from .lam import LambdaParams, check_mode, compute_lambda, init_lambda, xavier_uniform

IMPLS = ("masked", "recurrent")


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    d_head: int
    t_max: int
    lambda_mode: str = "mlp_softplus"
    d_h: int = 64
    short_conv: int = 0

    def __post_init__(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(f"n_heads * d_head must equal d_model ({self.n_heads}*{self.d_head} != {self.d_model})")
        if self.t_max < 1 or self.t_max & (self.t_max - 1):
            raise ValueError(f"t_max must be a power of two, got {self.t_max}")
        check_mode(self.lambda_mode)
        if self.short_conv < 0:
            raise ValueError(f"short_conv must be >= 0, got {self.short_conv}")

    @property
    def n_levels(self) -> int:
        return num_levels(self.t_max)


class AttentionLayer:
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.W_q = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
        self.W_k = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
        self.W_v = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
        self.W_o = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
        self.lam: LambdaParams = init_lambda(cfg.lambda_mode, d, cfg.n_heads, cfg.n_levels, cfg.d_h, rng)
        self.convs: dict[str, Tensor] = {}
        if cfg.short_conv:
            bound = 1.0 / np.sqrt(cfg.short_conv)
            for name in ("q", "k", "v"):
                w = rng.uniform(-bound, bound, size=(cfg.short_conv, d))
                self.convs[name] = Tensor(w, requires_grad=True)
        self.read_counts: list[int] = []

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o}
        out.update({f"conv_{k}": v for k, v in self.convs.items()})
        out.update({f"lambda.{k}": v for k, v in self.lam.named().items()})
        return out

    # ------------------------------------------------------------ shared pieces

    def _check(self, X: Tensor) -> None:
        if X.ndim != 3 or X.shape[-1] != self.cfg.d_model:
            raise ad.ShapeError(f"expected (B, T, {self.cfg.d_model}) input, got {X.shape}")
        if X.shape[1] > self.cfg.t_max:
            raise ValueError(f"sequence length {X.shape[1]} exceeds t_max {self.cfg.t_max}")

    def _heads(self, X: Tensor, name: str) -> Tensor:
        """Project, apply the optional causal depthwise conv, split heads -> (B, H, T, dh)."""
        B, T, _ = X.shape
        H, dh = self.cfg.n_heads, self.cfg.d_head
        y = X @ getattr(self, f"W_{name}")
        if name in self.convs:
            w = self.convs[name]
            y = sum((ad.causal_shift(y, j) * w[j] for j in range(1, w.shape[0])), y * w[0])
        return y.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    def _qkv(self, X: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self._heads(X, "q"), self._heads(X, "k"), self._heads(X, "v")

    def lambdas(self, X: Tensor) -> Tensor:
        """Dense λ of shape (B, T, H, L), before the active-level mask."""
        return compute_lambda(self.lam, X)

    def _merge_heads(self, O: Tensor) -> Tensor:
        B, H, T, dh = O.shape
        return O.transpose(0, 2, 1, 3).reshape(B, T, H * dh) @ self.W_o

    # ------------------------------------------------------------ evaluation paths

    def forward(self, X, impl: str = "masked", lam_override=None) -> Tensor:
        if impl == "masked":
            return self.forward_masked(X, lam_override)
        if impl == "recurrent":
            return self.forward_recurrent(X, lam_override)
        raise ValueError(f"unknown attention impl {impl!r}; expected one of {IMPLS}")

    def forward_masked(self, X, lam_override=None) -> Tensor:
        X, squeeze = _batched(X)
        self._check(X)
        B, T, _ = X.shape
        L = self.cfg.n_levels
        q, k, v = self._qkv(X)
        lam = self.lambdas(X) if lam_override is None else ad.as_tensor(lam_override)
        lvl = level_matrix(T)
        onehot = (lvl[:, :, None] == np.arange(L)[None, None, :]).astype(np.float64)
        weights = ad.einsum("bthl,til->bhti", lam, onehot)
        scores = q @ k.transpose(0, 1, 3, 2)
        out = self._merge_heads((scores * weights) @ v)
        return out.reshape(out.shape[1:]) if squeeze else out

    def forward_recurrent(self, X, lam_override=None) -> Tensor:
        X, squeeze = _batched(X)
        self._check(X)
        B, T, _ = X.shape
        H, dh = self.cfg.n_heads, self.cfg.d_head
        q, k, v = self._qkv(X)
        lam = self.lambdas(X) if lam_override is None else ad.as_tensor(lam_override)
        mem = HierarchicalMemory(dh, dh, self.cfg.t_max)
        outs = []
        self.read_counts = []
        for t in range(T):
            mem.append(k[:, :, t, :], v[:, :, t, :])
            q_t = q[:, :, t, :].reshape(B, H, 1, dh)
            before = mem.reads
            acc = None
            for lvl in mem.active_levels():
                read = (q_t @ mem.read_level(lvl)).reshape(B, H, dh)
                term = lam[:, t, :, lvl].reshape(B, H, 1) * read
                acc = term if acc is None else acc + term
            self.read_counts.append(mem.reads - before)
            outs.append(acc)
        out = self._merge_heads(ad.stack(outs, axis=2))
        return out.reshape(out.shape[1:]) if squeeze else out

    def forward_oracle(self, X, lam_override=None) -> np.ndarray:
        """Brute-force reference: every bucket is re-summed from scratch."""
        X, squeeze = _batched(X)
        self._check(X)
        B, T, _ = X.shape
        H, dh = self.cfg.n_heads, self.cfg.d_head
        x = X.data

        def heads(name):
            y = x @ getattr(self, f"W_{name}").data
            if name in self.convs:
                w = self.convs[name].data
                y = np.stack([sum(w[j] * y[:, t - j] for j in range(min(len(w), t + 1))) for t in range(T)], axis=1)
            return y.reshape(B, T, H, dh)

        q, k, v = heads("q"), heads("k"), heads("v")
        lam = (self.lambdas(X) if lam_override is None else ad.as_tensor(lam_override)).data
        out = np.zeros((B, T, H, dh))
        for t in range(T):
            for bucket in partition(t + 1).buckets:
                state = np.zeros((B, H, dh, dh))
                for i in range(bucket.start, bucket.end):
                    state += k[:, i, :, :, None] * v[:, i, :, None, :]
                read = np.einsum("bhk,bhkv->bhv", q[:, t], state)
                out[:, t] += lam[:, t, :, bucket.level, None] * read
        out = out.reshape(B, T, H * dh) @ self.W_o.data
        return out[0] if squeeze else out

    def level_reads(self, X) -> tuple[np.ndarray, np.ndarray]:
        """λ (B, T, H, L) as used by the forward passes, plus the (T, L) active mask."""
        X, _ = _batched(X)
        self._check(X)
        lam = self.lambdas(X).data
        return lam, active_mask(X.shape[1], self.cfg.n_levels)


def _batched(X) -> tuple[Tensor, bool]:
    X = ad.as_tensor(X)
    if X.ndim == 2:
        return X.reshape(1, *X.shape), True
    return X, False
